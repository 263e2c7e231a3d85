import numpy as np
import pytest
from scipy import ndimage, signal

from rawvid import kernels
from rawvid.raw import PLANE_OFFSETS, cfa_channel_map

needs_numba = pytest.mark.skipif(kernels.numba is None, reason="numba not installed")


@pytest.mark.parametrize("pattern", sorted(PLANE_OFFSETS))
def test_demosaic_keeps_samples_and_averages_neighbours(pattern, rng):
    mosaic = rng.uniform(0, 1, (8, 10))
    cfa = cfa_channel_map(pattern, 8, 10)
    rgb = kernels.demosaic(mosaic, cfa)
    for c in range(3):
        np.testing.assert_array_equal(rgb[c][cfa == c], mosaic[cfa == c])
    # interior: each missing value is the plain mean of the nearest same-colour samples
    for y in range(1, 7):
        for x in range(1, 9):
            for c in range(3):
                if cfa[y, x] == c:
                    continue
                near = [(y + dy, x + dx) for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0))
                        if cfa[y + dy, x + dx] == c]
                if not near:
                    near = [(y + dy, x + dx) for dy in (-1, 1) for dx in (-1, 1)]
                assert rgb[c, y, x] == pytest.approx(np.mean([mosaic[p] for p in near]), abs=1e-14)


def test_demosaic_constant(rng):
    rgb = kernels.demosaic(np.full((6, 6), 0.3), cfa_channel_map("GRBG", 6, 6))
    np.testing.assert_allclose(rgb, 0.3, atol=1e-15)


@needs_numba
def test_demosaic_paths_agree(rng):
    mosaic = rng.uniform(0, 1, (16, 12))
    cfa = cfa_channel_map("BGGR", 16, 12)
    a = kernels.numba_demosaic(mosaic, cfa, kernels.DEMOSAIC_WEIGHTS)
    b = kernels.numpy_demosaic(mosaic, cfa)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("impl", ["numba", "numpy"])
def test_temporal_mean_var(impl, rng):
    if impl == "numba" and kernels.numba is None:
        pytest.skip("numba not installed")
    stack = rng.normal(size=(5, 4, 3))
    fn = getattr(kernels, f"{impl}_temporal_mean_var")
    m, v = fn(stack)
    np.testing.assert_allclose(m, stack.mean(0), atol=1e-14)
    np.testing.assert_allclose(v, stack.var(0, ddof=1), atol=1e-14)


@pytest.mark.parametrize("impl", ["numba", "numpy"])
def test_separable_filter_matches_scipy_reflect(impl, rng):
    if impl == "numba" and kernels.numba is None:
        pytest.skip("numba not installed")
    img = rng.uniform(size=(13, 17))
    taps = rng.uniform(size=11)
    fn = getattr(kernels, f"{impl}_separable_filter")
    ref = ndimage.correlate1d(ndimage.correlate1d(img, taps, axis=1, mode="reflect"), taps, axis=0, mode="reflect")
    np.testing.assert_allclose(fn(img, taps), ref, atol=1e-12)


def test_separable_filter_rejects_wide_kernel():
    with pytest.raises(ValueError):
        kernels.separable_filter(np.zeros((3, 3)), np.ones(11))


@pytest.mark.parametrize("impl", ["numba", "numpy"])
def test_dconv_zero_offset_is_correlation(impl, rng):
    if impl == "numba" and kernels.numba is None:
        pytest.skip("numba not installed")
    x = rng.normal(size=(2, 7, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = getattr(kernels, f"{impl}_dconv")(x, np.zeros((18, 7, 6)), np.ones((9, 7, 6)), w, b)
    ref = np.stack([sum(signal.correlate2d(x[c], w[o, c], mode="same") for c in range(2)) + b[o] for o in range(3)])
    np.testing.assert_allclose(out, ref, atol=1e-12)


@needs_numba
def test_dconv_paths_agree(rng):
    x = rng.normal(size=(3, 6, 5))
    off = rng.normal(scale=2.0, size=(18, 6, 5))
    mask = rng.uniform(size=(9, 6, 5))
    w = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=2)
    np.testing.assert_allclose(kernels.numba_dconv(x, off, mask, w, b), kernels.numpy_dconv(x, off, mask, w, b),
                               atol=1e-12)


def test_dconv_integer_shift(rng):
    # an offset of exactly (0, +1) on every tap reads the right-hand neighbour
    x = rng.normal(size=(1, 5, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    off = np.zeros((18, 5, 6))
    off[1::2] = 1.0
    out = kernels.dconv_reference(x, off, np.ones((9, 5, 6)), w)
    np.testing.assert_allclose(out[0, :, :-1], x[0, :, 1:])
    np.testing.assert_allclose(out[0, :, -1], 0.0)
