"""Synthetic moving scenes, noisy/clean video sources and Bayer-phase-aligned sampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConsistencyError, MetadataError
from .isp import ReferenceISPConfig, reference_isp_inverse
from .noise import NoiseParams, sample_poisson_gaussian
from .raw import TEMPORAL_RADIUS, BayerFrame, Sequence, load_sequence, normalize_sequence

PAIR_MODES = ("realizations", "static_quad")


def _blur(img, sigma):
    radius = max(1, min(int(3 * sigma), (min(img.shape) - 1) // 2))
    x = np.arange(-radius, radius + 1)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return kernels.separable_filter(img, taps / taps.sum())


def random_texture(rng, height, width):
    """sRGB canvas: smooth colour field plus hard-edged rectangles and disks, values in [0.05, 0.95]."""
    img = np.stack([_blur(rng.normal(size=(height, width)), 6.0) for _ in range(3)])
    img = 0.5 + 0.2 * img / (img.std() + 1e-12)
    img += 0.1 * np.stack([_blur(rng.normal(size=(height, width)), 1.0) for _ in range(3)])
    yy, xx = np.mgrid[:height, :width]
    for _ in range(rng.integers(4, 9)):
        colour = rng.uniform(0.05, 0.95, size=3)[:, None]
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(0.05, 0.2) * min(height, width)
        inside = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r) if rng.random() < 0.5 \
            else (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[:, inside] = colour
    return np.clip(img, 0.05, 0.95)


def moving_scene(rng, frames=7, size=(64, 64), max_speed=2):
    """(T, 3, H, W) sRGB frames with camera panning and one independently moving object."""
    h, w = size
    pan = rng.integers(-max_speed, max_speed + 1, size=2)
    margin = max_speed * frames + 1
    canvas = random_texture(rng, h + 2 * margin, w + 2 * margin)
    obj_size = max(4, min(h, w) // 4)
    obj = random_texture(rng, obj_size, obj_size)
    obj_pos = rng.uniform(0, [h - obj_size, w - obj_size])
    obj_vel = rng.uniform(-max_speed, max_speed, size=2)
    out = np.empty((frames, 3, h, w))
    for t in range(frames):
        y0, x0 = margin + pan * t
        frame = canvas[:, y0:y0 + h, x0:x0 + w].copy()
        oy, ox = np.clip(np.round(obj_pos + obj_vel * t).astype(int), 0, [h - obj_size, w - obj_size])
        frame[:, oy:oy + obj_size, ox:ox + obj_size] = obj
        out[t] = frame
    return out


def clean_raw_sequence(rng, frames=7, size=(64, 64), pattern="RGGB",
                       isp_config: ReferenceISPConfig = ReferenceISPConfig(), frame_rate=25.0):
    """Normalized clean raw video unprocessed from a synthetic moving sRGB scene."""
    srgb = moving_scene(rng, frames, size)
    return Sequence(tuple(reference_isp_inverse(f, isp_config, pattern) for f in srgb),
                    frame_rate=frame_rate, role="clean", meta={"source": "synthetic"})


@dataclass
class VideoSource:
    """A clean raw video with either a noise model (unlimited realizations) or fixed noisy takes."""

    clean: np.ndarray  # (T, 2H, 2W) normalized
    pattern: str = "RGGB"
    params: NoiseParams | None = None
    noisy: tuple = field(default_factory=tuple)  # each (T, 2H, 2W)

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.float64)
        self.noisy = tuple(np.asarray(n, dtype=np.float64) for n in self.noisy)
        if self.params is None and not self.noisy:
            raise ConsistencyError("video source needs a noise model or noisy realizations")
        if any(n.shape != self.clean.shape for n in self.noisy):
            raise ConsistencyError("noisy realizations differ in shape from the clean video")
        if self.clean.shape[0] < 2 * TEMPORAL_RADIUS + 1:
            raise ConsistencyError("video shorter than one temporal window")

    @classmethod
    def from_sequences(cls, clean: Sequence, params=None, noisy=()):
        clean = normalize_sequence(clean)
        return cls(clean.stack(), clean[0].pattern, params,
                   tuple(normalize_sequence(n).stack() for n in noisy))

    @property
    def realizations(self):
        return None if self.params is not None else len(self.noisy)

    @property
    def frames(self):
        return self.clean.shape[0]

    def full_window(self):
        return (0, 0, *self.clean.shape[-2:])

    def draw(self, rng, frames, window, realization=0):
        """Noisy crop of ``frames``. Fresh noise when a model is present.

        ``window`` is (y, x, size) or (y, x, height, width).
        """
        region = _region(window)
        if self.params is not None:
            return sample_poisson_gaussian(self.clean[frames][(..., *region)],
                                           self.params.sigma_s_sq, self.params.sigma_r, rng)
        return self.noisy[realization % len(self.noisy)][frames][(..., *region)]

    def crop(self, frames, window):
        return self.clean[frames][(..., *_region(window))]


def _region(window):
    y, x, *size = window
    h, w = (size[0], size[0]) if len(size) == 1 else size
    return slice(y, y + h), slice(x, x + w)


def bayer_aligned_window(rng, shape, patch):
    """Random (y, x, patch) crop with even corners so the crop keeps the Bayer phase."""
    h, w = shape[-2:]
    if patch % 2 or patch > min(h, w):
        raise ConsistencyError(f"patch {patch} must be even and fit inside {h}x{w}")
    y = 2 * rng.integers(0, (h - patch) // 2 + 1)
    x = 2 * rng.integers(0, (w - patch) // 2 + 1)
    return int(y), int(x), patch


def sample_window(source: VideoSource, rng, patch, radius=TEMPORAL_RADIUS):
    """One noisy (2r+1)-frame window and its clean centre."""
    t = int(rng.integers(radius, source.frames - radius))
    win = bayer_aligned_window(rng, source.clean.shape, patch)
    frames = list(range(t - radius, t + radius + 1))
    r = int(rng.integers(0, source.realizations)) if source.realizations else 0
    return {"noisy": source.draw(rng, frames, win, r), "clean": source.crop([t], win)[0], "t": t, "window": win}


def sample_temporal_pair(source: VideoSource, rng, patch, mode="realizations", radius=TEMPORAL_RADIUS):
    """Two noisy windows that both estimate the same clean frame.

    ``realizations``: the same frames t-r..t+r under two independent noise draws.
    ``static_quad``: 2r+2 noisy captures of frame t alone; the first 2r+1 form one
    window and the last 2r+1 the other.
    """
    if mode not in PAIR_MODES:
        raise ConsistencyError(f"pair mode must be one of {PAIR_MODES}, got {mode!r}")
    t = int(rng.integers(radius, source.frames - radius))
    win = bayer_aligned_window(rng, source.clean.shape, patch)
    n = 2 * radius + 1
    if mode == "realizations":
        frames = list(range(t - radius, t + radius + 1))
        if source.realizations is not None and source.realizations < 2:
            raise ConsistencyError("realization pairs need at least two noisy takes")
        a, b = (0, 1) if source.realizations is None else rng.choice(source.realizations, 2, replace=False)
        w1, w2 = source.draw(rng, frames, win, int(a)), source.draw(rng, frames, win, int(b))
    else:
        if source.realizations is not None and source.realizations < n + 1:
            raise ConsistencyError(f"static quads need at least {n + 1} noisy takes")
        takes = np.stack([source.draw(rng, [t], win, i)[0] for i in range(n + 1)])
        w1, w2 = takes[:n], takes[1:]
    return {"noisy_1": w1, "noisy_2": w2, "clean": source.crop([t], win)[0], "t": t, "window": win}


def load_sources(root, params=None):
    """Scan ``root`` for scene directories holding ``clean/`` and optional ``noisy_*/`` sequences."""
    root = Path(root)
    scenes = sorted(p for p in root.iterdir() if (p / "clean").is_dir()) if root.is_dir() else []
    if (root / "clean").is_dir():
        scenes = [root]
    if not scenes:
        raise MetadataError(f"no scene directories with a clean/ sequence under {root}")
    sources = []
    for scene in scenes:
        noisy = [load_sequence(p) for p in sorted(scene.glob("noisy_*")) if p.is_dir()]
        if params is None and not noisy:
            raise MetadataError(f"{scene}: no noisy takes and no noise model given")
        sources.append(VideoSource.from_sequences(load_sequence(scene / "clean"), params, noisy))
    return sources


def synthetic_sources(seed, count=1, frames=7, size=(64, 64), params=NoiseParams(0.01, 0.02), pattern="RGGB"):
    rng = np.random.default_rng(seed)
    return [VideoSource(clean_raw_sequence(rng, frames, size, pattern).stack(), pattern, params)
            for _ in range(count)]


def frame_of(array, pattern="RGGB"):
    return BayerFrame(np.asarray(array, dtype=np.float64), pattern, normalized=True)
