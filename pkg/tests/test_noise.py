import numpy as np
import pytest

from rawvid.errors import CalibrationQualityError, InsufficientDataError, StateError
from rawvid.noise import (
    CalibrationStack, NoiseParams, estimate_noise_params, fit_noise_params, load_noise_table,
    sample_noise, sample_poisson_gaussian, save_noise_table, synthesize_calibration_stacks,
    synthesize_pairs, to_digital_numbers, unprocess_srgb,
)
from rawvid.isp import ReferenceISPConfig
from rawvid.raw import BayerFrame, Sequence, cfa_channel_map

N_DRAWS = 10 ** 6


def _flat(value, n=N_DRAWS):
    return BayerFrame(np.full((1000, n // 1000), value), normalized=True)


def test_noiseless_is_identity(rng):
    clean = BayerFrame(rng.uniform(0, 1, (6, 8)), normalized=True)
    out = sample_noise(clean, NoiseParams(0, 0), seed=3)
    np.testing.assert_array_equal(out.data, clean.data)


def test_zero_signal_is_gaussian_only():
    x = sample_noise(_flat(0.0), NoiseParams(0.01, 0.02), seed=1).data
    assert abs(x.mean()) < 5 * 0.02 / np.sqrt(N_DRAWS)
    assert x.var() == pytest.approx(4.0e-4, rel=0.02)


def test_moments_at_half_scale():
    # variance oracle 0.01 * 0.5 + 0.02**2
    expected_var = 5.4e-3
    x = sample_noise(_flat(0.5), NoiseParams(0.01, 0.02), seed=2).data
    assert x.mean() == pytest.approx(0.5, rel=0.02)
    assert x.var() == pytest.approx(expected_var, rel=0.02)


def test_output_not_clamped():
    x = sample_noise(_flat(0.0, 10_000), NoiseParams(0.0, 0.05), seed=0).data
    assert x.min() < 0


def test_unnormalized_rejected():
    with pytest.raises(StateError):
        sample_noise(BayerFrame(np.zeros((2, 2), dtype=int)), NoiseParams(0.01, 0.01))


def test_large_rate_normal_branch():
    rng = np.random.default_rng(0)
    x = sample_poisson_gaussian(np.full(200_000, 0.5), 1e-7, 0.0, rng)
    assert x.mean() == pytest.approx(0.5, rel=1e-4)
    assert x.var() == pytest.approx(0.5e-7, rel=0.02)


def test_determinism():
    clean = _flat(0.3, 4000)
    a = sample_noise(clean, NoiseParams(0.01, 0.02), seed=11).data
    b = sample_noise(clean, NoiseParams(0.01, 0.02), seed=11).data
    np.testing.assert_array_equal(a, b)


def test_calibration_closed_loop():
    truth = NoiseParams(0.004, 0.02)
    flats, bias = synthesize_calibration_stacks(truth, frames=100, shape=(64, 64), seed=5)
    est = estimate_noise_params(flats, bias)
    assert est.sigma_s_sq == pytest.approx(0.004, rel=0.05)
    assert est.sigma_r == pytest.approx(0.02, rel=0.05)


def test_calibration_noiseless():
    flats, bias = synthesize_calibration_stacks(NoiseParams(0, 0), frames=3, shape=(8, 8))
    est = estimate_noise_params(flats, bias)
    assert est.sigma_s_sq == 0 and est.sigma_r == 0


def test_calibration_needs_three_levels():
    flats, bias = synthesize_calibration_stacks(NoiseParams(0.01, 0.01), means=(0.2, 0.6), frames=3, shape=(4, 4))
    with pytest.raises(InsufficientDataError):
        estimate_noise_params(flats, bias)


def test_calibration_needs_two_frames():
    flats, bias = synthesize_calibration_stacks(NoiseParams(0.01, 0.01), frames=1, shape=(4, 4))
    with pytest.raises(InsufficientDataError):
        estimate_noise_params(flats, bias)


def test_negative_slope_reported():
    # brighter exposures with less variance
    rng = np.random.default_rng(0)
    flats = [CalibrationStack([BayerFrame(m + rng.normal(0, s, (8, 8)), normalized=True) for _ in range(10)],
                              "flat_field", i) for i, (m, s) in enumerate([(0.2, 0.1), (0.5, 0.05), (0.8, 0.01)])]
    bias = CalibrationStack([BayerFrame(rng.normal(0, 0.001, (8, 8)), normalized=True) for _ in range(10)], "bias")
    with pytest.raises(CalibrationQualityError):
        fit_noise_params(flats, bias)


def test_bias_variance_independent_of_flats():
    p = NoiseParams(0.002, 0.01)
    flats_a, bias = synthesize_calibration_stacks(p, frames=10, shape=(16, 16), seed=1)
    flats_b, _ = synthesize_calibration_stacks(NoiseParams(0.008, 0.01), frames=10, shape=(16, 16), seed=2)
    assert estimate_noise_params(flats_a, bias).sigma_r == estimate_noise_params(flats_b, bias).sigma_r


def test_noise_table_roundtrip(tmp_path):
    table = {1600: NoiseParams(1e-3, 2e-3, 1600), 3200: NoiseParams(2e-3, 4e-3, 3200)}
    save_noise_table(table, tmp_path / "p.json")
    assert load_noise_table(tmp_path / "p.json") == table
    assert to_digital_numbers(table[1600], 240, 4095) == pytest.approx((3.855, 7.71))


def _clean_seq(rng, n=7):
    return Sequence([BayerFrame(rng.uniform(0.05, 0.95, (16, 16)), normalized=True) for _ in range(n)])


def test_synthesize_noiseless(rng):
    clean = _clean_seq(rng)
    noisy, same = synthesize_pairs(clean, NoiseParams(0, 0), seed=1)
    assert same is clean and noisy.role == "noisy"
    for a, b in zip(noisy.frames, clean.frames):
        np.testing.assert_array_equal(a.data, b.data)


def test_synthesize_deterministic_and_recorded(rng):
    clean = _clean_seq(rng)
    p = NoiseParams(0.01, 0.02, 1600)
    a, _ = synthesize_pairs(clean, p, seed=9)
    b, _ = synthesize_pairs(clean, p, seed=9)
    c, _ = synthesize_pairs(clean, p, seed=10)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.frames, b.frames))
    assert not np.array_equal(a[0].data, c[0].data)
    assert not np.array_equal(a[0].data, a[1].data - clean[1].data + clean[0].data)
    assert a.meta["seed"] == 9 and a.meta["noise"]["sigma_s_sq"] == 0.01 and a.iso == 1600


def test_synthesize_per_frame_moments():
    clean = Sequence([BayerFrame(np.full((500, 400), y), normalized=True) for y in np.linspace(0.1, 0.7, 7)])
    p = NoiseParams(0.01, 0.02)
    noisy, _ = synthesize_pairs(clean, p, seed=4)
    for n, c in zip(noisy.frames, clean.frames):
        y = c.data[0, 0]
        assert n.data.mean() == pytest.approx(y, rel=0.01)
        assert n.data.var() == pytest.approx(p.variance(y), rel=0.03)


def test_unprocess_identity_is_mosaic(rng):
    srgb = rng.uniform(0, 1, (3, 4, 6))
    raw = unprocess_srgb(srgb, ReferenceISPConfig.identity(), "GBRG")
    cfa = cfa_channel_map("GBRG", 4, 6)
    np.testing.assert_allclose(raw.data, np.take_along_axis(srgb, cfa[None], 0)[0], atol=1e-15)


def test_unprocess_gray_inverse_gamma():
    cfg = ReferenceISPConfig(wb_gains=(1, 1, 1), gamma=1 / 2.2)
    raw = unprocess_srgb(np.full((3, 2, 2), 0.6), cfg)
    np.testing.assert_allclose(raw.data, 0.6 ** 2.2, rtol=1e-12)


def test_unprocess_gain_jitter(rng):
    cfg = ReferenceISPConfig()
    a = unprocess_srgb(np.full((3, 2, 2), 0.5), cfg, rng=np.random.default_rng(0))
    b = unprocess_srgb(np.full((3, 2, 2), 0.5), cfg)
    assert not np.allclose(a.data, b.data)
    ratio = b.data / a.data
    assert np.all((ratio > 0.8 - 1e-9) & (ratio < 1.2 + 1e-9))
