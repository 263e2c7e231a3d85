"""Central finite-difference verification of analytic gradients at 64-bit precision."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import ParameterError
from .nets.dconv import deformable_conv
from .nets.fusion import similarity


@dataclass
class GradReport:
    op: str
    trial: int
    errors: dict = field(default_factory=dict)  # tensor name -> relative error
    tolerance: float = 1e-3

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values())

    def to_dict(self):
        return {"op": self.op, "trial": self.trial, "errors": self.errors,
                "tolerance": self.tolerance, "passed": self.passed}


def relative_error(analytic, numeric, floor=1e-10):
    """max |a - n| / max |n| over all entries."""
    scale = max(numeric.abs().max().item(), analytic.abs().max().item(), floor)
    return (analytic - numeric).abs().max().item() / scale


def compare_gradients(loss_fn, tensors: dict, eps=1e-5, max_entries=None, generator=None):
    """Relative error between autograd and central differences for each named tensor.

    ``loss_fn`` takes no arguments and closes over ``tensors``, which are perturbed
    in place. ``max_entries`` samples a random subset of coordinates per tensor.
    """
    for t in tensors.values():
        t.requires_grad_(True)
        t.grad = None
    loss_fn().backward()
    out = {}
    with torch.no_grad():
        for name, t in tensors.items():
            analytic = t.grad.reshape(-1).clone()
            flat = t.view(-1)
            idx = torch.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = torch.randperm(flat.numel(), generator=generator)[:max_entries]
            numeric = torch.empty(len(idx), dtype=t.dtype)
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = loss_fn().item()
                flat[i] = orig - eps
                minus = loss_fn().item()
                flat[i] = orig
                numeric[j] = (plus - minus) / (2 * eps)
            out[name] = relative_error(analytic[idx], numeric)
    return out


def _away_from_kinks(offsets, margin=1e-3):
    # bilinear sampling is not differentiable where a position crosses an integer
    frac = offsets - torch.floor(offsets)
    frac = frac.clamp(margin, 1 - margin)
    return torch.floor(offsets) + frac


def dconv_instance(generator, channels=2, out_channels=2, size=8, kernel=3, max_offset=2.0):
    k = kernel * kernel
    g = generator
    x = torch.randn(1, channels, size, size, generator=g, dtype=torch.float64)
    offsets = _away_from_kinks((torch.rand(1, 2 * k, size, size, generator=g, dtype=torch.float64) * 2 - 1) * max_offset)
    mask = torch.rand(1, k, size, size, generator=g, dtype=torch.float64)
    weight = torch.randn(out_channels, channels, kernel, kernel, generator=g, dtype=torch.float64)
    bias = torch.randn(out_channels, generator=g, dtype=torch.float64)
    proj = torch.randn(1, out_channels, size, size, generator=g, dtype=torch.float64)
    return {"input": x, "offsets": offsets, "modulation": mask, "weight": weight, "bias": bias}, proj


def check_dconv(trials=20, seed=0, eps=1e-5, tolerance=1e-3, sampler="grid"):
    g = torch.Generator().manual_seed(seed)
    reports = []
    for trial in range(trials):
        t, proj = dconv_instance(g)

        def loss():
            out = deformable_conv(t["input"], t["offsets"], t["modulation"], t["weight"], t["bias"], sampler)
            return (out * proj).sum()

        reports.append(GradReport("dconv", trial, compare_gradients(loss, t, eps), tolerance))
    return reports


def check_similarity(trials=20, seed=0, eps=1e-5, tolerance=1e-3):
    """Sigmoid-of-dot-product weighting applied to a neighbour slice."""
    g = torch.Generator().manual_seed(seed)
    reports = []
    for trial in range(trials):
        t = {name: torch.randn(1, 4, 5, 5, generator=g, dtype=torch.float64)
             for name in ("features", "embedded", "embedded_center")}
        proj = torch.randn(1, 4, 5, 5, generator=g, dtype=torch.float64)

        def loss():
            return (t["features"] * similarity(t["embedded"], t["embedded_center"]) * proj).sum()

        reports.append(GradReport("similarity", trial, compare_gradients(loss, t, eps), tolerance))
    return reports


def check_module(module: nn.Module, make_inputs, name, trials=3, seed=0, eps=1e-5, tolerance=1e-3,
                 max_entries=6):
    """Parameter gradients of ``sum(module(*inputs) * proj)`` against finite differences.

    Samples ``max_entries`` coordinates of every parameter tensor per trial.
    """
    g = torch.Generator().manual_seed(seed)
    module = module.double()
    params = {n: p for n, p in module.named_parameters() if p.requires_grad}
    reports = []
    for trial in range(trials):
        inputs = make_inputs(g)
        with torch.no_grad():
            proj = torch.randn(module(*inputs).shape, generator=g, dtype=torch.float64)

        def loss():
            return (module(*inputs) * proj).sum()

        reports.append(GradReport(name, trial, compare_gradients(loss, params, eps, max_entries, g), tolerance))
    return reports


def _randomize_zero_layers(module, generator, scale=0.05):
    # zero-initialized output layers put every offset exactly on a bilinear kink
    with torch.no_grad():
        for p in module.parameters():
            if not p.abs().sum():
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * scale)
    return module


def check_alignment(trials=3, seed=0, eps=1e-5, tolerance=1e-3, max_entries=4):
    from .nets.alignment import PyramidAlign

    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    module = _randomize_zero_layers(PyramidAlign(channels=2, levels=2).double(), g)

    def inputs(gen):
        pyr = []
        for _ in range(4):
            pyr.append([torch.randn(1, 2, 8 // 2 ** l, 8 // 2 ** l, generator=gen, dtype=torch.float64)
                        for l in range(2)])
        return pyr

    return check_module(module, inputs, "alignment", trials, seed, eps, tolerance, max_entries)


def check_predenoiser(trials=2, seed=0, eps=1e-5, tolerance=1e-3, max_entries=3):
    from .nets.unet import Predenoiser, UNetSpec

    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    module = _randomize_zero_layers(Predenoiser(UNetSpec(depth=2, base_channels=4)).double(), g)
    return check_module(module, lambda gen: [torch.rand(1, 4, 8, 8, generator=gen, dtype=torch.float64)],
                        "predenoiser", trials, seed, eps, tolerance, max_entries)


OPS = {
    "dconv": check_dconv,
    "similarity": check_similarity,
    "alignment": check_alignment,
    "predenoiser": check_predenoiser,
}


def run(op, trials=None, seed=0):
    if op not in OPS:
        raise ParameterError(f"unknown gradcheck op {op!r}; choose from {sorted(OPS)}")
    kwargs = {"seed": seed}
    if trials is not None:
        kwargs["trials"] = trials
    return OPS[op](**kwargs)
