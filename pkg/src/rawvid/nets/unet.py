from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import DimensionError, ParameterError


@dataclass(frozen=True)
class UNetSpec:
    depth: int = 4
    base_channels: int = 32
    in_channels: int = 4
    out_channels: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ParameterError("U-Net depth must be >= 1")
        if min(self.base_channels, self.in_channels, self.out_channels) < 1:
            raise ParameterError("channel counts must be positive")

    def to_dict(self):
        return asdict(self)


def pad_to_multiple(x, multiple):
    """Pad the last two dims up to a multiple; returns the padded tensor and the crop size."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.LeakyReLU(0.2),
        )


class UNet(nn.Module):
    """Plain U-Net: max-pool down path, transposed-conv up path, skip concatenation."""

    def __init__(self, spec: UNetSpec = UNetSpec()):
        super().__init__()
        self.spec = spec
        chans = [spec.base_channels * 2 ** i for i in range(spec.depth + 1)]
        self.down = nn.ModuleList([DoubleConv(spec.in_channels, chans[0])])
        self.down.extend(DoubleConv(chans[i], chans[i + 1]) for i in range(spec.depth))
        self.upconv = nn.ModuleList(
            nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2) for i in reversed(range(spec.depth))
        )
        self.up = nn.ModuleList(DoubleConv(2 * chans[i], chans[i]) for i in reversed(range(spec.depth)))
        self.head = nn.Conv2d(chans[0], spec.out_channels, 1)

    def forward(self, x):
        multiple = 2 ** self.spec.depth
        if x.shape[-2] < 2 or x.shape[-1] < 2:
            raise DimensionError(f"input {tuple(x.shape[-2:])} too small for a depth-{self.spec.depth} U-Net")
        x, (h, w) = pad_to_multiple(x, multiple)
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for upconv, block in zip(self.upconv, self.up):
            x = block(torch.cat([upconv(x), skips.pop()], dim=1))
        return self.head(x)[..., :h, :w]


class Predenoiser(nn.Module):
    """Single-frame denoiser on packed planes: ``x + g(x)`` with a zero-initialized head."""

    def __init__(self, spec: UNetSpec = UNetSpec()):
        super().__init__()
        if spec.in_channels != spec.out_channels:
            raise ParameterError("residual pre-denoiser needs in_channels == out_channels")
        self.spec = spec
        self.body = UNet(spec)
        nn.init.zeros_(self.body.head.weight)
        nn.init.zeros_(self.body.head.bias)

    def forward(self, planes):
        return planes + self.body(planes)


class LearnedISP(nn.Module):
    """Packed raw (4 x H x W) to sRGB (3 x 2H x 2W) via 12 output channels and depth-to-space.

    A learnable 3x3 linear shortcut runs beside the U-Net: interpolation across
    the mosaic is linear in the packed planes, and deep nets fit linear maps slowly.
    The [0, 1] clamp applies in inference mode only; during training it would
    zero the gradient of any channel that drifts out of range.
    """

    def __init__(self, spec: UNetSpec = UNetSpec(depth=2, base_channels=16, out_channels=12)):
        super().__init__()
        if spec.in_channels != 4 or spec.out_channels != 12:
            raise ParameterError("learned ISP maps 4 packed planes to 12 channels")
        self.spec = spec
        self.body = UNet(spec)
        self.linear = nn.Conv2d(4, 12, 3, padding=1)

    def forward(self, planes):
        out = F.pixel_shuffle(self.body(planes) + self.linear(planes), 2)
        return out if self.training else out.clamp(0, 1)


def freeze(module: nn.Module):
    """Mark a sub-network as fixed: no gradients, inference mode."""
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    module.frozen = True
    return module


def is_frozen(module: nn.Module):
    return getattr(module, "frozen", False) and not any(p.requires_grad for p in module.parameters())
