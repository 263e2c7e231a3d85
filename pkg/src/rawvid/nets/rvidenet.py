"""End-to-end raw video denoiser: packing, guided alignment, attention, fusion."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigurationError, DependencyError, DimensionError
from ..raw import pack_array, unpack_array
from .alignment import FeatureExtractor, PyramidAlign
from .attention import NonLocalAttention
from .fusion import SpatialFusion, TemporalFusion, spatial_fuse


@dataclass(frozen=True)
class RViDeNetConfig:
    channels: int = 16
    levels: int = 3
    frames: int = 3
    res_blocks: int = 10
    packing: bool = True
    predenoise: bool = True
    nonlocal_attention: bool = True
    raw_domain: bool = True
    recurrence: int = 1
    max_offset_frac: float = 0.25

    def __post_init__(self):
        if self.frames % 2 != 1 or self.frames < 3:
            raise ConfigurationError("frames must be odd and >= 3")
        if not self.raw_domain and (self.packing or self.predenoise):
            raise ConfigurationError("packing and pre-denoising require raw-domain processing")
        if self.channels < 1 or self.levels < 1 or self.res_blocks < 0:
            raise ConfigurationError("channels, levels and res_blocks must be positive")

    @property
    def streams(self):
        return 4 if self.packing else 1

    @property
    def feature_channels(self):
        # a single unpacked stream gets the width of all four plane streams
        return self.channels if self.packing else 4 * self.channels

    @property
    def in_channels(self):
        return 1 if self.raw_domain else 3

    @property
    def out_channels(self):
        if self.packing:
            return 4
        return 1 if self.raw_domain else 3

    def to_dict(self):
        return asdict(self)


def _pad_spatial(x, multiple):
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    lead = x.shape[:-2]
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x.reshape(-1, 1, h, w), (0, pw, 0, ph), mode=mode).reshape(*lead, h + ph, w + pw)


class RViDeNet(nn.Module):
    """Denoises the centre of ``frames`` consecutive normalized raw frames.

    ``predenoiser`` and ``isp`` are frozen helper networks; they are required when
    pre-denoising is enabled or sRGB output is requested.
    """

    def __init__(self, config: RViDeNetConfig = RViDeNetConfig(), predenoiser=None, isp=None):
        super().__init__()
        self.config = config
        c = config.feature_channels
        self.extractor = FeatureExtractor(config.in_channels, c, config.levels)
        self.align = PyramidAlign(c, config.levels, 3, config.max_offset_frac)
        self.attention = NonLocalAttention(c, recurrence=config.recurrence, enabled=config.nonlocal_attention)
        self.temporal = TemporalFusion(c, config.frames)
        self.spatial = SpatialFusion(config.streams * c, config.out_channels, config.res_blocks)
        self.predenoiser = predenoiser
        self.isp = isp

    def trainable_modules(self):
        return {name: getattr(self, name) for name in ("extractor", "align", "attention", "temporal", "spatial")}

    def predenoise_frames(self, noisy, pattern):
        if self.predenoiser is None:
            raise DependencyError("pre-denoising enabled but no trained pre-denoiser attached")
        b, t = noisy.shape[:2]
        planes = pack_array(noisy, pattern).flatten(0, 1)
        with torch.no_grad():
            den = self.predenoiser(planes.to(next(self.predenoiser.parameters()).dtype)).to(noisy.dtype)
        return unpack_array(den.view(b, t, *den.shape[1:]), pattern)

    def to_srgb(self, raw, pattern="RGGB"):
        """Frozen learned ISP on a (B, 2H, 2W) raw batch."""
        if self.isp is None:
            raise DependencyError("sRGB output requested but no learned ISP attached")
        return self.isp(pack_array(raw, pattern))

    def _streams(self, frames, pattern):
        # (B, T, ...) -> (S*B, T, Cin, h, w), stream index fastest within each batch item
        cfg = self.config
        b, t = frames.shape[:2]
        if cfg.packing:
            planes = pack_array(frames, pattern)
            return planes.permute(0, 2, 1, 3, 4).reshape(b * 4, t, 1, *planes.shape[-2:])
        if cfg.raw_domain:
            return frames.unsqueeze(2)
        return frames

    def _pyramid(self, x):
        st, t = x.shape[:2]
        return [f.view(st, t, *f.shape[1:]) for f in self.extractor(x.flatten(0, 1))]

    def forward(self, noisy, pattern="RGGB", trace=None):
        cfg = self.config
        expected = 4 if cfg.raw_domain else 5
        if noisy.dim() != expected or noisy.shape[1] != cfg.frames:
            raise DimensionError(f"expected {expected}D input with {cfg.frames} frames, got {tuple(noisy.shape)}")
        b, t = noisy.shape[:2]
        mid = t // 2
        center = noisy[:, mid]

        guide = self.predenoise_frames(noisy, pattern) if cfg.predenoise else None
        x = self._streams(noisy, pattern)
        h, w = x.shape[-2:]
        multiple = max(2 ** (cfg.levels - 1), 2)
        feats_n = self._pyramid(_pad_spatial(x, multiple))
        feats_d = self._pyramid(_pad_spatial(self._streams(guide, pattern), multiple)) if guide is not None else feats_n

        neighbors = [i for i in range(t) if i != mid]

        def nb(f):
            return f[:, neighbors].flatten(0, 1)

        def ctr(f):
            return f[:, mid:mid + 1].expand(-1, len(neighbors), *f.shape[2:]).flatten(0, 1)

        aligned = self.align([nb(f) for f in feats_n], [nb(f) for f in feats_d],
                             [ctr(f) for f in feats_n], [ctr(f) for f in feats_d], trace=trace)
        aligned = aligned.view(-1, len(neighbors), *aligned.shape[1:])
        stack = torch.cat([aligned[:, :mid], feats_n[0][:, mid:mid + 1], aligned[:, mid:]], dim=1)
        fused = self.temporal(self.attention(stack))[..., :h, :w]

        fused = fused.reshape(b, cfg.streams, *fused.shape[1:])
        if cfg.packing:
            return spatial_fuse(list(fused.unbind(1)), center, self.spatial, pattern)
        noise = self.spatial(fused.flatten(1, 2))
        return center + (noise[:, 0] if cfg.raw_domain else noise)
