import numpy as np
import pytest
import torch
import torch.nn.functional as F

from rawvid import gradcheck, kernels
from rawvid.errors import ConfigurationError
from rawvid.nets.alignment import OffsetField
from rawvid.nets.dconv import DeformConv2d, bilinear_gather, deformable_conv, grid_gather


def _instance(c=3, o=2, h=7, w=9, scale=1.5, dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, c, h, w, generator=g, dtype=dtype)
    off = (torch.rand(1, 18, h, w, generator=g, dtype=dtype) * 2 - 1) * scale
    mask = torch.rand(1, 9, h, w, generator=g, dtype=dtype)
    weight = torch.randn(o, c, 3, 3, generator=g, dtype=dtype)
    bias = torch.randn(o, generator=g, dtype=dtype)
    return x, off, mask, weight, bias


@pytest.mark.parametrize("sampler", ["grid", "gather"])
def test_zero_offset_unit_mask_is_plain_conv(sampler):
    x, off, mask, weight, bias = _instance(dtype=torch.float32)
    out = deformable_conv(x, torch.zeros_like(off), torch.ones_like(mask), weight, bias, sampler)
    ref = F.conv2d(x, weight, bias, padding=1)
    assert (out - ref).abs().max().item() <= 1e-6 * max(1.0, ref.abs().max().item())


def test_constant_input_interior():
    x, off, mask, weight, _ = _instance(c=1, o=1, h=12, w=12, scale=0.9)
    x = torch.full_like(x, 0.7)
    out = deformable_conv(x, off, torch.ones_like(mask), weight)
    # taps reach at most 1 + 0.9 px from the centre, so a 2-px border suffices
    interior = out[..., 2:-2, 2:-2]
    assert torch.allclose(interior, torch.full_like(interior, 0.7 * weight.sum().item()), atol=1e-12)


def test_samplers_agree():
    x, off, mask, weight, bias = _instance(scale=4.0)
    a = deformable_conv(x, off, mask, weight, bias, "grid")
    b = deformable_conv(x, off, mask, weight, bias, "gather")
    assert torch.allclose(a, b, atol=1e-12)


def test_grid_gather_degenerate_width():
    x = torch.randn(1, 2, 1, 5, dtype=torch.float64)
    py = torch.zeros(1, 3, 1, 5, dtype=torch.float64)
    px = torch.rand(1, 3, 1, 5, dtype=torch.float64) * 4
    assert torch.allclose(grid_gather(x, py, px), bilinear_gather(x, py, px))


def test_matches_numba_reference():
    x, off, mask, weight, bias = _instance(scale=3.0)
    out = deformable_conv(x, off, mask, weight, bias)[0].numpy()
    ref = kernels.dconv_reference(x[0].numpy(), off[0].numpy(), mask[0].numpy(), weight.numpy(), bias.numpy())
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_matches_torchvision():
    ops = pytest.importorskip("torchvision.ops")
    x, off, mask, weight, bias = _instance(scale=3.0)
    ref = ops.deform_conv2d(x, off, weight, bias, padding=1, mask=mask)
    assert torch.allclose(deformable_conv(x, off, mask, weight, bias), ref, atol=1e-10)


def test_integer_shift_samples_neighbour():
    x = torch.arange(25, dtype=torch.float64).view(1, 1, 5, 5)
    weight = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    weight[0, 0, 1, 1] = 1
    off = torch.zeros(1, 18, 5, 5, dtype=torch.float64)
    off[:, 8] = 1.0  # centre tap dy
    off[:, 9] = -1.0  # centre tap dx
    out = deformable_conv(x, off, torch.ones(1, 9, 5, 5, dtype=torch.float64), weight)
    assert out[0, 0, 2, 2] == x[0, 0, 3, 1]
    assert out[0, 0, 4, 0] == 0  # sample falls outside -> zero padding


def test_gradcheck_acceptance_size():
    reports = gradcheck.check_dconv(trials=3, seed=5)
    for r in reports:
        assert set(r.errors) == {"input", "offsets", "modulation", "weight", "bias"}
        assert r.passed, r.errors


def test_torch_gradcheck_agrees():
    inputs, _ = gradcheck.dconv_instance(torch.Generator().manual_seed(3), channels=1, out_channels=1, size=5)
    args = [inputs[k].requires_grad_() for k in ("input", "offsets", "modulation", "weight", "bias")]
    assert torch.autograd.gradcheck(lambda *a: deformable_conv(*a), args, eps=1e-6, atol=1e-6)


def test_tap_mismatch_is_configuration_error():
    x, off, mask, weight, bias = _instance()
    with pytest.raises(ConfigurationError):
        deformable_conv(x, off[:, :8], mask, weight, bias)
    layer = DeformConv2d(3, 2, kernel_size=5)
    with pytest.raises(ConfigurationError):
        layer(x.float(), OffsetField(off.float(), mask.float()))
