"""Poisson-Gaussian sensor noise: sampling, calibration and noisy/clean pair synthesis.

All parameters are in normalized units (fractions of ``white_level - black_level``).
Convert with :func:`to_digital_numbers` when a camera-native scale is needed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import (
    CalibrationQualityError,
    ConsistencyError,
    InsufficientDataError,
    MetadataError,
    ParameterError,
    StateError,
)
from .isp import ReferenceISPConfig, reference_isp_inverse
from .raw import BayerFrame, Sequence, to_normalized_units

# Above this Poisson rate a normal approximation N(lam, lam) is drawn instead.
POISSON_EXACT_LIMIT = 1e5


@dataclass(frozen=True)
class NoiseParams:
    sigma_s_sq: float
    sigma_r: float
    iso: int = 0

    def __post_init__(self):
        if not (self.sigma_s_sq >= 0 and self.sigma_r >= 0):
            raise ParameterError(f"noise parameters must be non-negative, got {self}")

    def variance(self, y):
        return self.sigma_s_sq * np.asarray(y) + self.sigma_r ** 2


def to_digital_numbers(params: NoiseParams, black_level, white_level):
    """(shot slope, read std) in digital numbers for the given sensor levels."""
    scale = white_level - black_level
    return params.sigma_s_sq * scale, params.sigma_r * scale


def save_noise_table(params, path):
    entries = sorted(params.values() if isinstance(params, dict) else params, key=lambda p: p.iso)
    doc = {"units": "normalized", "params": [asdict(p) for p in entries]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_noise_table(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise MetadataError(f"cannot read noise table {path}: {e}") from e
    if doc.get("units") != "normalized":
        raise MetadataError(f"{path}: unsupported units {doc.get('units')!r}")
    return {int(p["iso"]): NoiseParams(float(p["sigma_s_sq"]), float(p["sigma_r"]), int(p["iso"]))
            for p in doc["params"]}


def lookup_params(table: dict, iso=None) -> NoiseParams:
    if iso is None:
        if len(table) != 1:
            raise MetadataError(f"noise table has ISOs {sorted(table)}; choose one")
        return next(iter(table.values()))
    if iso not in table:
        raise MetadataError(f"ISO {iso} not in noise table {sorted(table)}")
    return table[iso]


def sample_poisson_gaussian(y, sigma_s_sq, sigma_r, rng):
    """Draw ``sigma_s_sq * Poisson(y / sigma_s_sq) + N(0, sigma_r**2)`` per element."""
    y = np.asarray(y, dtype=np.float64)
    if sigma_s_sq > 0:
        lam = np.maximum(y, 0.0) / sigma_s_sq
        counts = np.empty_like(lam)
        exact = lam <= POISSON_EXACT_LIMIT
        counts[exact] = rng.poisson(lam[exact])
        if not exact.all():
            big = lam[~exact]
            counts[~exact] = rng.normal(big, np.sqrt(big))
        out = sigma_s_sq * counts
    else:
        out = y.copy()
    if sigma_r > 0:
        out += rng.normal(0.0, sigma_r, size=y.shape)
    return out


def sample_noise(clean: BayerFrame, params: NoiseParams, seed=None) -> BayerFrame:
    """Corrupt a normalized frame; the result is not clamped."""
    if not clean.normalized:
        raise StateError("sample_noise expects a normalized frame")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return clean.replace(data=sample_poisson_gaussian(clean.data, params.sigma_s_sq, params.sigma_r, rng))


@dataclass(frozen=True)
class CalibrationStack:
    frames: tuple
    kind: str = "flat_field"
    exposure_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.kind not in ("flat_field", "bias"):
            raise ParameterError(f"stack kind must be flat_field or bias, got {self.kind!r}")
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise ConsistencyError(f"calibration frames differ in shape: {sorted(shapes)}")

    def statistics(self):
        """Spatial means of the per-pixel temporal mean and variance (normalized units)."""
        if len(self.frames) < 2:
            raise InsufficientDataError(f"{self.kind} stack needs >= 2 frames, got {len(self.frames)}")
        stack = np.stack([to_normalized_units(f) for f in self.frames])
        mean, var = kernels.temporal_mean_var(stack)
        return float(mean.mean()), float(var.mean())


@dataclass(frozen=True)
class CalibrationFit:
    params: NoiseParams
    means: tuple
    corrected_variances: tuple
    intercept: float


def fit_noise_params(flat_stacks, bias_stack, iso=0) -> CalibrationFit:
    """Photon-transfer fit: read variance from the bias stack, shot slope from flat fields."""
    levels = {s.exposure_index for s in flat_stacks}
    if len(flat_stacks) < 3 or len(levels) < 3:
        raise InsufficientDataError(
            f"need >= 3 flat-field stacks at distinct exposures, got {len(flat_stacks)} "
            f"stacks at {len(levels)} levels"
        )
    if any(s.kind != "flat_field" for s in flat_stacks) or bias_stack.kind != "bias":
        raise ParameterError("stack kinds do not match their roles")
    _, read_var = bias_stack.statistics()
    points = [s.statistics() for s in flat_stacks]
    x = np.array([m for m, _ in points])
    v = np.array([var - read_var for _, var in points])
    dx = x - x.mean()
    denom = float(dx @ dx)
    if denom <= 0:
        raise InsufficientDataError("flat-field means do not span distinct intensities")
    slope = float(dx @ (v - v.mean())) / denom
    if slope < 0:
        raise CalibrationQualityError(f"negative shot-noise slope {slope:.3g}; flat fields unusable")
    params = NoiseParams(slope, float(np.sqrt(read_var)), iso)
    return CalibrationFit(params, tuple(x), tuple(v), float(v.mean() - slope * x.mean()))


def estimate_noise_params(flat_stacks, bias_stack, iso=0) -> NoiseParams:
    return fit_noise_params(flat_stacks, bias_stack, iso).params


def unprocess_srgb(srgb, isp_config: ReferenceISPConfig = ReferenceISPConfig(), target_pattern="RGGB",
                   rng=None, **levels) -> BayerFrame:
    """sRGB to normalized raw through the reference ISP's inverse.

    When ``rng`` is given the white-balance gains are jittered by up to 20% first.
    """
    if rng is not None:
        isp_config = isp_config.jittered(rng)
    return reference_isp_inverse(srgb, isp_config, target_pattern, **levels)


def frame_seeds(seed, count):
    """Independent per-frame generators derived from (seed, frame index)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def synthesize_pairs(clean_seq: Sequence, params: NoiseParams, seed=0):
    if not clean_seq.normalized:
        raise StateError("synthesize_pairs expects a normalized clean sequence")
    rngs = frame_seeds(seed, len(clean_seq))
    noisy = replace(
        clean_seq,
        frames=tuple(sample_noise(f, params, rng) for f, rng in zip(clean_seq.frames, rngs)),
        role="noisy",
        iso=params.iso or clean_seq.iso,
        meta={**clean_seq.meta, "noise": asdict(params), "seed": seed},
    )
    return noisy, clean_seq


def synthesize_calibration_stacks(params: NoiseParams, means=(0.2, 0.4, 0.6, 0.8), frames=100,
                                  shape=(64, 64), seed=0, **levels):
    """Flat-field stacks at the given mean levels plus a bias stack, drawn from the noise model."""
    rngs = frame_seeds(seed, len(means) + 1)

    def stack(level, rng, kind, index):
        y = np.full(shape, float(level))
        return CalibrationStack(
            tuple(BayerFrame(sample_poisson_gaussian(y, params.sigma_s_sq, params.sigma_r, rng),
                             normalized=True, **levels) for _ in range(frames)),
            kind, index,
        )

    flats = [stack(m, rng, "flat_field", i) for i, (m, rng) in enumerate(zip(means, rngs))]
    return flats, stack(0.0, rngs[-1], "bias", -1)
