import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rawvid.errors import (
    ConsistencyError, DimensionError, GapError, MetadataError, ParameterError, PatternError, StateError,
)
from rawvid.raw import (
    PLANE_OFFSETS, BayerFrame, PackedFrame, Sequence, cfa_channel_map, denormalize, load_sequence,
    normalize, pack, read_pgm, read_ppm, save_sequence, unpack, write_pgm, write_ppm, SRGBFrame,
)

from conftest import random_frame

PATTERNS = sorted(PLANE_OFFSETS)


def test_pack_rggb_tile():
    p = pack(BayerFrame(np.array([[100, 50], [60, 30]]), "RGGB"))
    assert p["R"].tolist() == [[100]]
    assert p["G1"].tolist() == [[50]]
    assert p["G2"].tolist() == [[60]]
    assert p["B"].tolist() == [[30]]


def test_pack_bggr_tile_is_canonical():
    a = pack(BayerFrame(np.array([[100, 50], [60, 30]]), "RGGB"))
    b = pack(BayerFrame(np.array([[30, 60], [50, 100]]), "BGGR"))
    np.testing.assert_array_equal(a.planes, b.planes)


@pytest.mark.parametrize("pattern", PATTERNS)
def test_constant_frame_packs_to_constant_planes(pattern):
    p = pack(BayerFrame(np.full((6, 4), 77), pattern))
    assert p.planes.shape == (4, 3, 2)
    assert (p.planes == 77).all()


def test_pack_errors():
    with pytest.raises(DimensionError):
        BayerFrame(np.zeros((3, 4)))
    with pytest.raises(PatternError):
        BayerFrame(np.zeros((4, 4)), "RGBG")


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(PATTERNS), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_roundtrip_bit_exact(pattern, h, w, seed):
    f = random_frame(np.random.default_rng(seed), (2 * h, 2 * w), pattern)
    g = unpack(pack(f))
    assert g.pattern == pattern
    np.testing.assert_array_equal(g.data, f.data)
    assert g.data.dtype == f.data.dtype


@pytest.mark.parametrize("pattern", PATTERNS)
def test_r_plane_holds_red_samples(pattern, rng):
    f = random_frame(rng, (8, 10), pattern)
    cfa = cfa_channel_map(pattern, 8, 10)
    planes = pack(f).planes
    np.testing.assert_array_equal(np.sort(planes[0].ravel()), np.sort(f.data[cfa == 0]))
    np.testing.assert_array_equal(np.sort(planes[2].ravel()), np.sort(f.data[cfa == 2]))
    # G1 sits on the red rows
    assert PLANE_OFFSETS[pattern][1][0] == PLANE_OFFSETS[pattern][0][0]


@pytest.mark.parametrize("pattern", PATTERNS)
def test_plane_neighbours_share_filter(pattern):
    cfa = cfa_channel_map(pattern, 8, 8)
    # 4-neighbours inside a plane are mosaic pixels two apart
    for plane in pack(BayerFrame(cfa, pattern)).planes:
        assert (plane == plane[0, 0]).all()


def test_unpack_constant_and_mismatch():
    f = unpack([np.full((2, 3), 5)] * 4, "GRBG")
    assert f.shape == (4, 6) and (f.data == 5).all()
    with pytest.raises(DimensionError):
        unpack([np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2))], "RGGB")
    with pytest.raises(DimensionError):
        PackedFrame(np.zeros((3, 2, 2)))


def test_normalize_anchors():
    f = BayerFrame(np.array([[240, 4095], [2167.5, 0]]), "RGGB", 12, 240, 4095)
    n = normalize(f)
    assert n.normalized
    np.testing.assert_allclose(n.data, [[0.0, 1.0], [0.5, 0.0]])
    with pytest.raises(StateError):
        normalize(n)


def test_normalize_parameter_errors():
    with pytest.raises(ParameterError):
        BayerFrame(np.zeros((2, 2)), "RGGB", 12, 4095, 240)
    with pytest.raises(ParameterError):
        BayerFrame(np.zeros((2, 2)), "RGGB", 12, 0, 5000)
    with pytest.raises(ParameterError):
        BayerFrame(np.full((2, 2), 4096), "RGGB", 12)


@settings(max_examples=30, deadline=None)
@given(st.integers(8, 16), st.integers(0, 2 ** 32 - 1))
def test_normalize_denormalize_within_one_step(bits, seed):
    rng = np.random.default_rng(seed)
    black = int(rng.integers(0, 2 ** (bits - 2)))
    white = int(rng.integers(black + 1, 2 ** bits))
    data = rng.integers(black, white + 1, (4, 4))
    f = BayerFrame(data, "RGGB", bits, black, white)
    back = denormalize(normalize(f))
    assert np.abs(back.data.astype(np.int64) - data).max() <= 1


def _write_seq(path, n=7, shape=(4, 6), skip=(), meta=True):
    path.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    for i in range(n):
        if i not in skip:
            write_pgm(path / f"{i:07d}.pgm", rng.integers(0, 4096, shape))
    if meta:
        (path / "meta.json").write_text(json.dumps(dict(
            pattern="GBRG", bit_depth=12, black_level=240, white_level=4095, iso=3200,
            frame_rate=25, role="noisy")))


def test_load_sequence(tmp_path):
    _write_seq(tmp_path / "s")
    seq = load_sequence(tmp_path / "s")
    assert len(seq) == 7
    assert seq.iso == 3200 and seq.role == "noisy" and seq[0].pattern == "GBRG"
    assert seq[0].black_level == 240


def test_load_sequence_gap(tmp_path):
    _write_seq(tmp_path / "s", n=4, skip=(2,))
    with pytest.raises(GapError):
        load_sequence(tmp_path / "s")


def test_load_sequence_odd_width(tmp_path):
    _write_seq(tmp_path / "s", n=3)
    write_pgm(tmp_path / "s" / "0000001.pgm", np.zeros((4, 5)))
    with pytest.raises(ConsistencyError):
        load_sequence(tmp_path / "s")


def test_load_sequence_mismatched_dims(tmp_path):
    _write_seq(tmp_path / "s", n=3)
    write_pgm(tmp_path / "s" / "0000002.pgm", np.zeros((6, 6)))
    with pytest.raises(ConsistencyError):
        load_sequence(tmp_path / "s")


def test_load_sequence_missing_sidecar(tmp_path):
    _write_seq(tmp_path / "s", n=3, meta=False)
    with pytest.raises(MetadataError):
        load_sequence(tmp_path / "s")


def test_default_levels_warn(tmp_path, caplog):
    _write_seq(tmp_path / "s", n=3, meta=False)
    (tmp_path / "s" / "meta.json").write_text(json.dumps({"pattern": "RGGB", "bit_depth": 12}))
    seq = load_sequence(tmp_path / "s")
    assert seq[0].black_level == 0 and seq[0].white_level == 4095
    assert "defaulting" in caplog.text


def test_sequence_save_load_roundtrip(tmp_path, rng):
    frames = [random_frame(rng, (4, 4), "BGGR", 12) for _ in range(3)]
    seq = Sequence(frames, iso=1600, frame_rate=24.0, role="clean", meta={"scene": "toy"})
    save_sequence(seq, tmp_path / "out")
    back = load_sequence(tmp_path / "out")
    for a, b in zip(seq.frames, back.frames):
        np.testing.assert_array_equal(a.data, b.data)
    assert back.meta == {"scene": "toy"} and back.iso == 1600


def test_sequence_invariants(rng):
    with pytest.raises(ConsistencyError):
        Sequence([random_frame(rng)] * 2)
    with pytest.raises(ConsistencyError):
        Sequence([random_frame(rng), random_frame(rng), random_frame(rng, (4, 4))])


def test_pgm_is_big_endian(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.array([[1, 258]]))
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.endswith(b"\x00\x01\x01\x02")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[1, 258]])


@pytest.mark.parametrize("bits", [8, 16])
def test_ppm_roundtrip(tmp_path, rng, bits):
    img = SRGBFrame(rng.uniform(0, 1, (3, 4, 6)))
    write_ppm(tmp_path / "a.ppm", img, bits=bits)
    back = read_ppm(tmp_path / "a.ppm")
    assert np.abs(back.data - img.data).max() <= 0.5 / (2 ** bits - 1) + 1e-12
