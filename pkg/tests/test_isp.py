import numpy as np
import pytest

from rawvid.errors import ConfigurationError, StateError
from rawvid.isp import ReferenceISPConfig, reference_isp_forward, reference_isp_inverse
from rawvid.raw import BayerFrame, cfa_channel_map


def test_identity_on_constant():
    out = reference_isp_forward(BayerFrame(np.full((6, 8), 0.37), normalized=True), ReferenceISPConfig.identity())
    assert out.data.shape == (3, 6, 8)
    np.testing.assert_allclose(out.data, 0.37, atol=1e-15)


def test_gamma_value():
    cfg = ReferenceISPConfig(wb_gains=(1, 1, 1), gamma=1 / 2.2)
    out = reference_isp_forward(BayerFrame(np.full((4, 4), 0.25), normalized=True), cfg)
    np.testing.assert_allclose(out.data, 0.5325, rtol=1e-3)


def test_forward_keeps_measured_samples(rng):
    raw = BayerFrame(rng.uniform(0, 1, (8, 8)), "GRBG", normalized=True)
    out = reference_isp_forward(raw, ReferenceISPConfig.identity())
    cfa = cfa_channel_map("GRBG", 8, 8)
    np.testing.assert_array_equal(np.take_along_axis(out.data, cfa[None], 0)[0], raw.data)


def test_inverse_identity_is_mosaic(rng):
    srgb = rng.uniform(size=(3, 4, 4))
    raw = reference_isp_inverse(srgb, ReferenceISPConfig.identity(), "BGGR")
    np.testing.assert_array_equal(raw.data, np.take_along_axis(srgb, cfa_channel_map("BGGR", 4, 4)[None], 0)[0])


def test_inverse_gray():
    raw = reference_isp_inverse(np.full((3, 4, 4), 0.8), ReferenceISPConfig(wb_gains=(1, 1, 1)))
    np.testing.assert_allclose(raw.data, 0.8 ** 2.2, rtol=1e-12)


@pytest.mark.parametrize("pattern", ["RGGB", "BGGR", "GRBG", "GBRG"])
def test_roundtrip_with_color_matrix(pattern, rng):
    ccm = ((0.8, 0.15, 0.05), (0.1, 0.8, 0.1), (0.05, 0.15, 0.8))
    cfg = ReferenceISPConfig(wb_gains=(2.0, 1.0, 1.6), ccm=ccm)
    raw = BayerFrame(rng.uniform(0, 0.5, (8, 12)), pattern, normalized=True)
    back = reference_isp_inverse(reference_isp_forward(raw, cfg), cfg, pattern)
    assert np.abs(back.data - raw.data).max() < 1e-3


def test_config_validation(tmp_path):
    with pytest.raises(ConfigurationError):
        ReferenceISPConfig(ccm=((1, 2, 3), (2, 4, 6), (0, 0, 1)))
    with pytest.raises(ConfigurationError):
        ReferenceISPConfig(wb_gains=(1, 0, 1))
    with pytest.raises(ConfigurationError):
        ReferenceISPConfig(gamma=0)
    cfg = ReferenceISPConfig(gamma=0.5)
    cfg.save(tmp_path / "isp.yaml")
    assert ReferenceISPConfig.load(tmp_path / "isp.yaml") == cfg


def test_forward_requires_normalized():
    with pytest.raises(StateError):
        reference_isp_forward(BayerFrame(np.zeros((2, 2), dtype=int)))
