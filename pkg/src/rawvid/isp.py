"""Reference (invertible) ISP and the learned raw-to-sRGB mapping."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import kernels
from .errors import ConfigurationError, StateError
from .raw import BayerFrame, SRGBFrame, cfa_channel_map, pack_array


@dataclass(frozen=True)
class ReferenceISPConfig:
    wb_gains: tuple = (2.0, 1.0, 1.6)
    ccm: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    gamma: float = 1 / 2.2

    def __post_init__(self):
        gains = np.asarray(self.wb_gains, dtype=np.float64)
        ccm = np.asarray(self.ccm, dtype=np.float64)
        if gains.shape != (3,) or np.any(gains <= 0):
            raise ConfigurationError(f"wb_gains must be three positive numbers, got {self.wb_gains}")
        if ccm.shape != (3, 3):
            raise ConfigurationError(f"ccm must be 3x3, got shape {ccm.shape}")
        if abs(np.linalg.det(ccm)) < 1e-10 or np.linalg.cond(ccm) > 1e10:
            raise ConfigurationError("color correction matrix is not invertible")
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        object.__setattr__(self, "wb_gains", tuple(float(g) for g in gains))
        object.__setattr__(self, "ccm", tuple(tuple(float(v) for v in row) for row in ccm))
        object.__setattr__(self, "gamma", float(self.gamma))

    @classmethod
    def identity(cls):
        return cls(wb_gains=(1.0, 1.0, 1.0), gamma=1.0)

    def to_dict(self):
        return {"wb_gains": list(self.wb_gains), "ccm": [list(r) for r in self.ccm], "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"wb_gains", "ccm", "gamma"}
        if unknown:
            raise ConfigurationError(f"unknown ISP config keys {sorted(unknown)}")
        return cls(**{k: (tuple(map(tuple, v)) if k == "ccm" else v) for k, v in d.items()})

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})
        except (OSError, yaml.YAMLError, TypeError) as e:
            raise ConfigurationError(f"cannot read ISP config {path}: {e}") from e

    def jittered(self, rng, amount=0.2):
        """Copy with white-balance gains scaled by independent factors in [1-amount, 1+amount]."""
        scale = rng.uniform(1 - amount, 1 + amount, size=3)
        return replace(self, wb_gains=tuple(np.asarray(self.wb_gains) * scale))


def reference_isp_forward(raw: BayerFrame, config: ReferenceISPConfig = ReferenceISPConfig()) -> SRGBFrame:
    """Bilinear demosaic, white balance, color matrix, clamp and gamma encode.

    Clipping at [0, 1] loses highlights, so the inverse is exact only where no
    channel saturates after gains and color correction.
    """
    if not raw.normalized:
        raise StateError("reference ISP expects a normalized frame")
    h, w = raw.shape
    rgb = kernels.demosaic(raw.data, cfa_channel_map(raw.pattern, h, w))
    rgb *= np.asarray(config.wb_gains)[:, None, None]
    rgb = np.einsum("ij,jhw->ihw", np.asarray(config.ccm), rgb)
    rgb = np.clip(rgb, 0.0, 1.0) ** config.gamma
    return SRGBFrame(rgb)


def reference_isp_inverse(srgb, config: ReferenceISPConfig = ReferenceISPConfig(), pattern="RGGB",
                          **levels) -> BayerFrame:
    """Undo gamma, color matrix and gains, then sample the mosaic for ``pattern``."""
    data = srgb.data if isinstance(srgb, SRGBFrame) else np.asarray(srgb, dtype=np.float64)
    _, h, w = data.shape
    lin = np.clip(data, 0.0, 1.0) ** (1.0 / config.gamma)
    lin = np.linalg.solve(np.asarray(config.ccm), lin.reshape(3, -1)).reshape(3, h, w)
    lin /= np.asarray(config.wb_gains)[:, None, None]
    cfa = cfa_channel_map(pattern, h, w)
    mosaic = np.take_along_axis(lin, cfa[None], axis=0)[0]
    return BayerFrame(np.clip(mosaic, 0.0, 1.0), pattern=pattern, normalized=True, **levels)


def learned_isp_apply(raw: BayerFrame, model) -> SRGBFrame:
    """Run a trained :class:`rawvid.nets.unet.LearnedISP` on one frame."""
    import torch

    if not raw.normalized:
        raise StateError("learned ISP expects a normalized frame")
    dtype = next(model.parameters()).dtype
    planes = torch.as_tensor(pack_array(raw.data, raw.pattern), dtype=dtype)[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(planes)[0]
    model.train(was_training)
    return SRGBFrame(out.clamp(0, 1).double().numpy())
