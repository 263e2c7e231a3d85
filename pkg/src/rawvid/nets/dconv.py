"""Modulated deformable convolution built from a differentiable bilinear gather."""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigurationError


def bilinear_gather(x, py, px):
    """Sample ``x`` (N, C, H, W) at fractional pixel positions ``py, px`` (N, *S).

    Returns (N, C, *S). Positions outside the image read zeros.
    """
    n, c, h, w = x.shape
    y0f = torch.floor(py)
    x0f = torch.floor(px)
    fy = py - y0f
    fx = px - x0f
    y0 = y0f.long()
    x0 = x0f.long()
    flat = x.reshape(n, c, h * w)
    out = None
    for dy, dx, wt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = (yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1)).reshape(n, 1, -1).expand(n, c, -1)
        vals = torch.gather(flat, 2, idx).reshape(n, c, *py.shape[1:])
        term = vals * (wt * valid).unsqueeze(1)
        out = term if out is None else out + term
    return out


def grid_gather(x, py, px):
    """Same contract as :func:`bilinear_gather`, through ``grid_sample`` (faster on CPU)."""
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        return bilinear_gather(x, py, px)
    grid = torch.stack([2 * px / (w - 1) - 1, 2 * py / (h - 1) - 1], dim=-1)
    out = F.grid_sample(x, grid.reshape(n, -1, grid.shape[-2], 2), mode="bilinear",
                        padding_mode="zeros", align_corners=True)
    return out.view(n, c, *py.shape[1:])


SAMPLERS = {"grid": grid_gather, "gather": bilinear_gather}


def deformable_conv(x, offset, mask, weight, bias=None, sampler="grid"):
    """``out(p0) = sum_k w_k * x(p0 + p_k + dp_k) * m_k`` with stride 1 and same padding.

    ``offset`` is (N, 2K, H, W) holding ``(dy, dx)`` for each tap in row-major tap
    order, ``mask`` is (N, K, H, W), ``weight`` is (O, C, kh, kw). ``sampler``
    picks the bilinear sampling backend; both read zeros outside the image.
    """
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    k = kh * kw
    if c_in != c:
        raise ConfigurationError(f"kernel expects {c_in} input channels, got {c}")
    if offset.shape[1] != 2 * k or mask.shape[1] != k:
        raise ConfigurationError(
            f"offset/modulation carry {offset.shape[1] // 2}/{mask.shape[1]} taps, kernel has {k}"
        )
    if offset.shape[-2:] != x.shape[-2:] or mask.shape[-2:] != x.shape[-2:]:
        raise ConfigurationError("offset field and features differ in spatial size")
    ky, kx = torch.meshgrid(
        torch.arange(kh, device=x.device) - (kh - 1) // 2,
        torch.arange(kw, device=x.device) - (kw - 1) // 2,
        indexing="ij",
    )
    gy, gx = torch.meshgrid(torch.arange(h, device=x.device), torch.arange(w, device=x.device), indexing="ij")
    py = gy + ky.reshape(k, 1, 1) + offset[:, 0::2]
    px = gx + kx.reshape(k, 1, 1) + offset[:, 1::2]
    cols = SAMPLERS[sampler](x, py.to(x.dtype), px.to(x.dtype)) * mask.unsqueeze(1)
    out = torch.einsum("ock,nckhw->nohw", weight.reshape(c_out, c_in, k), cols)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class DeformConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, bias=True, sampler="grid"):
        super().__init__()
        self.kernel_size = kernel_size
        self.sampler = sampler
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    @property
    def taps(self):
        return self.kernel_size ** 2

    def forward(self, x, field):
        if field.offsets.shape[1] != 2 * self.taps:
            raise ConfigurationError(f"offset field has {field.offsets.shape[1] // 2} taps, kernel has {self.taps}")
        return deformable_conv(x, field.offsets, field.modulation, self.weight, self.bias, self.sampler)
