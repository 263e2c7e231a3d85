"""Bayer-domain data model: frames, packing, level normalization and sequence I/O.

Frames on disk are 16-bit binary PGM files named by a zero-padded index, with a
``meta.json`` sidecar per sequence directory.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConsistencyError,
    DimensionError,
    GapError,
    MetadataError,
    ParameterError,
    PatternError,
    StateError,
)

log = logging.getLogger(__name__)

# (row, col) phase of the R, G1, B, G2 samples inside the 2x2 tile. G1 shares a row with R.
PLANE_OFFSETS = {
    "RGGB": ((0, 0), (0, 1), (1, 1), (1, 0)),
    "BGGR": ((1, 1), (1, 0), (0, 0), (0, 1)),
    "GRBG": ((0, 1), (0, 0), (1, 0), (1, 1)),
    "GBRG": ((1, 0), (1, 1), (0, 1), (0, 0)),
}
PATTERNS = tuple(PLANE_OFFSETS)
PLANE_NAMES = ("R", "G1", "B", "G2")
# RGB channel measured by each canonical plane
PLANE_CHANNEL = (0, 1, 2, 1)

TEMPORAL_RADIUS = 1
SIDECAR = "meta.json"
FRAME_GLOB = re.compile(r"^(\d+)\.pgm$")


def plane_offsets(pattern):
    try:
        return PLANE_OFFSETS[pattern]
    except KeyError:
        raise PatternError(f"unknown Bayer pattern {pattern!r}") from None


def cfa_channel_map(pattern, height, width):
    """Per-pixel RGB channel index (0=R, 1=G, 2=B) of the mosaic."""
    offsets = plane_offsets(pattern)
    cfa = np.empty((height, width), dtype=np.int64)
    for (r, c), ch in zip(offsets, PLANE_CHANNEL):
        cfa[r::2, c::2] = ch
    return cfa


def _check_even(shape):
    if len(shape) < 2 or shape[-1] % 2 or shape[-2] % 2:
        raise DimensionError(f"mosaic dims must be even, got {tuple(shape[-2:])}")


def pack_array(mosaic, pattern):
    """Split ``(..., 2H, 2W)`` into ``(..., 4, H, W)`` planes ordered R, G1, B, G2.

    Works on numpy arrays and torch tensors alike.
    """
    offsets = plane_offsets(pattern)
    _check_even(mosaic.shape)
    h, w = mosaic.shape[-2] // 2, mosaic.shape[-1] // 2
    shape = tuple(mosaic.shape[:-2]) + (4, h, w)
    if hasattr(mosaic, "new_zeros"):
        planes = mosaic.new_zeros(shape)
    else:
        planes = np.empty(shape, dtype=mosaic.dtype)
    for i, (r, c) in enumerate(offsets):
        planes[..., i, :, :] = mosaic[..., r::2, c::2]
    return planes


def unpack_array(planes, pattern):
    """Inverse of :func:`pack_array`."""
    offsets = plane_offsets(pattern)
    if planes.ndim < 3 or planes.shape[-3] != 4:
        raise DimensionError(f"expected 4 planes, got shape {tuple(planes.shape)}")
    h, w = planes.shape[-2], planes.shape[-1]
    shape = tuple(planes.shape[:-3]) + (2 * h, 2 * w)
    if hasattr(planes, "new_zeros"):
        mosaic = planes.new_zeros(shape)
    else:
        mosaic = np.empty(shape, dtype=planes.dtype)
    for i, (r, c) in enumerate(offsets):
        mosaic[..., r::2, c::2] = planes[..., i, :, :]
    return mosaic


@dataclass(frozen=True)
class BayerFrame:
    """One raw mosaic frame.

    Unnormalized frames hold digital numbers in ``[0, 2**bit_depth)``. Normalized
    frames hold fractions of full scale; the range is not enforced on construction
    because sampled noise is allowed to leave ``[0, 1]``.
    """

    data: np.ndarray
    pattern: str = "RGGB"
    bit_depth: int = 16
    black_level: float = 0.0
    white_level: float | None = None
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise DimensionError(f"mosaic must be 2D, got {data.ndim}D")
        _check_even(data.shape)
        plane_offsets(self.pattern)
        full = 2 ** int(self.bit_depth) - 1
        if self.white_level is None:
            object.__setattr__(self, "white_level", float(full))
        if not self.black_level < self.white_level <= full:
            raise ParameterError(
                f"need black_level < white_level <= {full}, "
                f"got {self.black_level}, {self.white_level}"
            )
        if not self.normalized and data.size and (data.min() < 0 or data.max() > full):
            raise ParameterError(f"digital numbers outside [0, {full}]")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def levels(self):
        return dict(
            pattern=self.pattern,
            bit_depth=self.bit_depth,
            black_level=self.black_level,
            white_level=self.white_level,
        )


@dataclass(frozen=True)
class PackedFrame:
    planes: np.ndarray  # (4, H, W) in R, G1, B, G2 order
    pattern: str = "RGGB"

    def __post_init__(self):
        planes = np.asarray(self.planes)
        if planes.ndim != 3 or planes.shape[0] != 4:
            raise DimensionError(f"expected (4, H, W) planes, got {planes.shape}")
        plane_offsets(self.pattern)
        object.__setattr__(self, "planes", planes)

    def __getitem__(self, name):
        return self.planes[PLANE_NAMES.index(name)]


@dataclass(frozen=True)
class SRGBFrame:
    data: np.ndarray  # (3, 2H, 2W), values in [0, 1]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[0] != 3:
            raise DimensionError(f"sRGB frame must be (3, H, W), got {data.shape}")
        if data.size and (data.min() < 0 or data.max() > 1):
            raise ParameterError("sRGB values outside [0, 1]")
        object.__setattr__(self, "data", data)


def pack(frame: BayerFrame) -> PackedFrame:
    return PackedFrame(pack_array(frame.data, frame.pattern), frame.pattern)


def unpack(packed, pattern=None, **levels) -> BayerFrame:
    """Reassemble a mosaic from four planes.

    ``packed`` is a :class:`PackedFrame` or a sequence of four ``H x W`` arrays
    (then ``pattern`` is required). Extra keywords become the frame's levels.
    """
    if isinstance(packed, PackedFrame):
        planes, pattern = packed.planes, pattern or packed.pattern
    else:
        shapes = {np.shape(p) for p in packed}
        if len(packed) != 4 or len(shapes) != 1:
            raise DimensionError(f"need four equal-size planes, got shapes {sorted(shapes)}")
        planes = np.stack([np.asarray(p) for p in packed])
    return BayerFrame(unpack_array(planes, pattern or "RGGB"), pattern=pattern or "RGGB", **levels)


def normalize(frame: BayerFrame) -> BayerFrame:
    """Black-level subtraction and white-level scaling, clamped to [0, 1]."""
    if frame.normalized:
        raise StateError("frame is already normalized")
    scale = frame.white_level - frame.black_level
    out = np.clip((frame.data.astype(np.float64) - frame.black_level) / scale, 0.0, 1.0)
    return frame.replace(data=out, normalized=True)


def denormalize(frame: BayerFrame, quantize=True) -> BayerFrame:
    """Map back to digital numbers; values are rounded and clipped to the sensor range."""
    if not frame.normalized:
        raise StateError("frame is not normalized")
    scale = frame.white_level - frame.black_level
    out = frame.data * scale + frame.black_level
    out = np.clip(out, 0, 2 ** frame.bit_depth - 1)
    if quantize:
        out = np.round(out).astype(np.uint16 if frame.bit_depth <= 16 else np.uint32)
    return frame.replace(data=out, normalized=False)


def to_normalized_units(frame: BayerFrame) -> np.ndarray:
    """Unclamped affine rescale to normalized units (keeps sub-black readings signed)."""
    if frame.normalized:
        return np.asarray(frame.data, dtype=np.float64)
    return (frame.data.astype(np.float64) - frame.black_level) / (frame.white_level - frame.black_level)


@dataclass(frozen=True)
class Sequence:
    frames: tuple
    iso: int = 0
    frame_rate: float = 0.0
    role: str = "clean"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if self.role not in ("noisy", "clean"):
            raise MetadataError(f"role must be noisy or clean, got {self.role!r}")
        if len(frames) < 2 * TEMPORAL_RADIUS + 1:
            raise ConsistencyError(
                f"sequence needs at least {2 * TEMPORAL_RADIUS + 1} frames, got {len(frames)}"
            )
        ref = frames[0]
        for i, f in enumerate(frames[1:], 1):
            if f.shape != ref.shape or f.levels() != ref.levels() or f.normalized != ref.normalized:
                raise ConsistencyError(f"frame {i} differs from frame 0 in shape, levels or state")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @property
    def normalized(self):
        return self.frames[0].normalized

    def stack(self):
        return np.stack([f.data for f in self.frames])

    def map(self, fn, **changes):
        return dataclasses.replace(self, frames=tuple(fn(f) for f in self.frames), **changes)


def normalize_sequence(seq: Sequence) -> Sequence:
    return seq if seq.normalized else seq.map(normalize)


# -- netpbm I/O ---------------------------------------------------------------


def _read_netpbm(path, magic):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise MetadataError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    channels = 3 if magic == b"P6" else 1
    count = width * height * channels
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    return data.reshape(height, width, channels), maxval


def read_pgm(path) -> np.ndarray:
    data, _ = _read_netpbm(path, b"P5")
    return data[..., 0].astype(np.uint16)


def write_pgm(path, data):
    data = np.asarray(data)
    if data.ndim != 2 or data.min() < 0 or data.max() > 65535:
        raise ParameterError("PGM data must be a 2D array of 16-bit values")
    h, w = data.shape
    header = f"P5\n{w} {h}\n65535\n".encode()
    Path(path).write_bytes(header + data.astype(">u2").tobytes())


def read_ppm(path) -> SRGBFrame:
    data, maxval = _read_netpbm(path, b"P6")
    return SRGBFrame(np.moveaxis(data.astype(np.float64) / maxval, -1, 0))


def write_ppm(path, frame, bits=16):
    data = frame.data if isinstance(frame, SRGBFrame) else np.asarray(frame)
    maxval = 2 ** bits - 1
    q = np.round(np.clip(np.moveaxis(data, 0, -1), 0, 1) * maxval)
    h, w = q.shape[:2]
    header = f"P6\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + q.astype(">u2" if bits > 8 else "u1").tobytes())


def frame_name(index, ext="pgm"):
    return f"{index:07d}.{ext}"


def _indexed_files(path, pattern):
    found = {}
    for p in Path(path).iterdir():
        m = pattern.match(p.name)
        if m:
            found[int(m.group(1))] = p
    return found


def load_frames(path, metadata=None):
    """Consecutively indexed PGM frames of one directory plus the merged sidecar dict.

    ``metadata`` overrides the sidecar; when given as a dict no sidecar is needed.
    """
    path = Path(path)
    meta = {}
    sidecar = path / SIDECAR
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    elif metadata is None:
        raise MetadataError(f"missing sidecar {sidecar}")
    if metadata:
        meta.update(metadata)
    for key in ("pattern", "bit_depth"):
        if key not in meta:
            raise MetadataError(f"sidecar lacks required key {key!r}")
    bit_depth = int(meta["bit_depth"])
    if "black_level" not in meta or "white_level" not in meta:
        log.warning("%s: sidecar omits levels, defaulting to black=0 white=%d", path, 2 ** bit_depth - 1)
    black = float(meta.get("black_level", 0))
    white = float(meta.get("white_level", 2 ** bit_depth - 1))

    files = _indexed_files(path, FRAME_GLOB)
    if not files:
        raise GapError(f"no frame files in {path}")
    indices = sorted(files)
    missing = sorted(set(range(indices[0], indices[-1] + 1)) - set(indices))
    if missing:
        raise GapError(f"{path}: missing frame indices {missing}")

    frames = []
    for i in indices:
        data = read_pgm(files[i])
        if data.shape[0] % 2 or data.shape[1] % 2:
            raise ConsistencyError(f"{files[i].name}: odd dimensions {data.shape}")
        if frames and data.shape != frames[0].shape:
            raise ConsistencyError(f"{files[i].name}: shape {data.shape} != {frames[0].shape}")
        frames.append(BayerFrame(data, meta["pattern"], bit_depth, black, white))
    return frames, meta


def load_sequence(path, metadata=None) -> Sequence:
    """Load a frame directory (see :func:`load_frames`) as a :class:`Sequence`."""
    frames, meta = load_frames(path, metadata)
    extra = {k: v for k, v in meta.items()
             if k not in ("pattern", "bit_depth", "black_level", "white_level", "iso", "frame_rate", "role")}
    return Sequence(
        tuple(frames),
        iso=int(meta.get("iso", 0)),
        frame_rate=float(meta.get("frame_rate", 0.0)),
        role=meta.get("role", "clean"),
        meta=extra,
    )


def save_sequence(seq: Sequence, path):
    """Write frames as 16-bit PGM (denormalizing if needed) plus the sidecar."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(seq.frames):
        dn = denormalize(f) if f.normalized else f
        write_pgm(path / frame_name(i), dn.data)
    meta = dict(seq.meta)
    meta.update(seq.frames[0].levels(), iso=seq.iso, frame_rate=seq.frame_rate, role=seq.role)
    (path / SIDECAR).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_srgb_dir(path):
    files = _indexed_files(path, re.compile(r"^(\d+)\.ppm$"))
    if not files:
        raise GapError(f"no PPM frames in {path}")
    indices = sorted(files)
    missing = sorted(set(range(indices[0], indices[-1] + 1)) - set(indices))
    if missing:
        raise GapError(f"{path}: missing frame indices {missing}")
    return [read_ppm(files[i]) for i in indices]
