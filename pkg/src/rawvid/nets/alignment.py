"""Pyramidal deformable alignment guided by pre-denoised features."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import PyramidError
from .dconv import DeformConv2d


def lrelu(x):
    return F.leaky_relu(x, 0.1)


@dataclass
class OffsetField:
    offsets: torch.Tensor  # (N, 2K, H, W), (dy, dx) per tap
    modulation: torch.Tensor  # (N, K, H, W) in [0, 1]
    level: int = 1


def upsample_offsets(offsets, size):
    """Bilinear x2 upsampling; displacements double with the resolution."""
    return 2.0 * F.interpolate(offsets, size=size, mode="bilinear", align_corners=False)


class FeatureExtractor(nn.Module):
    """L-level pyramid: level 1 at input resolution, each further level by a stride-2 conv."""

    def __init__(self, in_channels=1, channels=16, levels=3, bias=True):
        super().__init__()
        self.levels = levels
        self.head = nn.Conv2d(in_channels, channels, 3, padding=1, bias=bias)
        self.down = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(channels, channels, 3, stride=2, padding=1, bias=bias),
                nn.LeakyReLU(0.1),
                nn.Conv2d(channels, channels, 3, padding=1, bias=bias),
                nn.LeakyReLU(0.1),
            )
            for _ in range(levels - 1)
        )

    def forward(self, x):
        multiple = 2 ** (self.levels - 1)
        if x.shape[-2] % multiple or x.shape[-1] % multiple:
            raise PyramidError(f"input {tuple(x.shape[-2:])} not divisible by {multiple}; pad first")
        feats = [lrelu(self.head(x))]
        for down in self.down:
            feats.append(down(feats[-1]))
        return feats


class OffsetPredictor(nn.Module):
    """Predicts per-tap offsets and modulation from [neighbour, centre] denoised features."""

    def __init__(self, channels=16, taps=9, with_coarser=True, max_offset_frac=0.25):
        super().__init__()
        self.taps = taps
        self.with_coarser = with_coarser
        self.max_offset_frac = max_offset_frac
        cin = 2 * channels + (2 * taps if with_coarser else 0)
        self.body = nn.Conv2d(cin, channels, 3, padding=1)
        self.out = nn.Conv2d(channels, 3 * taps, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, neighbor, center, coarser: OffsetField | None = None, level=1):
        if neighbor.shape != center.shape:
            raise PyramidError(f"neighbour {tuple(neighbor.shape)} and centre {tuple(center.shape)} differ")
        inputs = [neighbor, center]
        base = None
        if coarser is not None:
            if not self.with_coarser:
                raise PyramidError("this predictor takes no coarser field")
            if coarser.level != level + 1 or [2 * s for s in coarser.offsets.shape[-2:]] != list(neighbor.shape[-2:]):
                raise PyramidError(f"coarser field at level {coarser.level} does not feed level {level}")
            base = upsample_offsets(coarser.offsets, neighbor.shape[-2:])
            inputs.append(base)
        elif self.with_coarser:
            raise PyramidError(f"level {level} predictor needs the coarser offset field")
        out = self.out(lrelu(self.body(torch.cat(inputs, dim=1))))
        offsets = out[:, : 2 * self.taps]
        if base is not None:
            offsets = offsets + base
        limit = self.max_offset_frac * max(neighbor.shape[-2:])
        offsets = offsets.clamp(-limit, limit)
        return OffsetField(offsets, torch.sigmoid(out[:, 2 * self.taps:]), level)


class Blend(nn.Sequential):
    """Merges warped features with upsampled coarser aligned features."""

    def __init__(self, channels):
        super().__init__(
            nn.Conv2d(2 * channels, channels, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(channels, channels, 3, padding=1),
        )


class PyramidAlign(nn.Module):
    def __init__(self, channels=16, levels=3, kernel_size=3, max_offset_frac=0.25):
        super().__init__()
        taps = kernel_size ** 2
        self.levels = levels
        self.predict = nn.ModuleList(
            OffsetPredictor(channels, taps, with_coarser=(l < levels - 1), max_offset_frac=max_offset_frac)
            for l in range(levels)
        )
        self.dconv = nn.ModuleList(DeformConv2d(channels, channels, kernel_size) for _ in range(levels))
        self.blend = nn.ModuleList(Blend(channels) for _ in range(levels - 1))
        self.refine_predict = OffsetPredictor(channels, taps, with_coarser=False, max_offset_frac=max_offset_frac)
        self.refine_dconv = DeformConv2d(channels, channels, kernel_size)

    def forward(self, nb_noisy, nb_denoised, center_noisy, center_denoised, trace=None):
        """Align one neighbour to the centre. Pyramids are lists indexed from level 1.

        Offsets are computed from the denoised pyramids only and the same field
        warps both the noisy and the denoised features. Pass a list as ``trace``
        to collect the offset fields, coarsest first, refinement last.
        """
        pyramids = (nb_noisy, nb_denoised, center_noisy, center_denoised)
        if len({len(p) for p in pyramids}) != 1 or len(nb_noisy) != self.levels:
            raise PyramidError(f"expected four {self.levels}-level pyramids")
        field = None
        aligned_n = aligned_d = None
        for l in reversed(range(self.levels)):
            field = self.predict[l](nb_denoised[l], center_denoised[l], field, level=l + 1)
            warped_n = self.dconv[l](nb_noisy[l], field)
            warped_d = self.dconv[l](nb_denoised[l], field)
            if trace is not None:
                trace.append(field)
            if aligned_n is None:
                aligned_n, aligned_d = lrelu(warped_n), lrelu(warped_d)
            else:
                size = warped_n.shape[-2:]
                up_n = F.interpolate(aligned_n, size=size, mode="bilinear", align_corners=False)
                up_d = F.interpolate(aligned_d, size=size, mode="bilinear", align_corners=False)
                aligned_n = self.blend[l](torch.cat([warped_n, up_n], dim=1))
                aligned_d = self.blend[l](torch.cat([warped_d, up_d], dim=1))
        refine = self.refine_predict(aligned_d, center_denoised[0], level=1)
        if trace is not None:
            trace.append(refine)
        return self.refine_dconv(aligned_n, refine)


def dump_offsets(fields, directory, prefix="offsets"):
    """Write each field's offsets and modulation as little-endian PFM images (one per channel)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, field in enumerate(fields):
        for name, t in (("off", field.offsets), ("mod", field.modulation)):
            arr = t.detach().double().cpu().numpy()[0]
            for c, plane in enumerate(arr):
                path = directory / f"{prefix}_{i}_L{field.level}_{name}{c:02d}.pfm"
                write_pfm(path, plane)
                paths.append(path)
    return paths


def write_pfm(path, image):
    image = np.asarray(image, dtype="<f4")
    h, w = image.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode()
    Path(path).write_bytes(header + np.flipud(image).tobytes())


def read_pfm(path):
    raw = Path(path).read_bytes()
    magic, dims, scale, data = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    dtype = "<f4" if float(scale) < 0 else ">f4"
    return np.flipud(np.frombuffer(data, dtype=dtype, count=w * h).reshape(h, w)).astype(np.float64)
