import pytest
import torch
import torch.nn as nn

from rawvid.errors import ConfigurationError, DependencyError, DimensionError
from rawvid.nets.rvidenet import RViDeNet, RViDeNetConfig
from rawvid.nets.unet import LearnedISP, Predenoiser, UNetSpec, freeze, is_frozen

SMALL = dict(channels=4, res_blocks=2)


def _helpers():
    return freeze(Predenoiser(UNetSpec(2, 4))), freeze(LearnedISP(UNetSpec(2, 4, 4, 12)))


@pytest.mark.parametrize("flags", [
    dict(),
    dict(nonlocal_attention=False),
    dict(predenoise=False),
    dict(packing=False, predenoise=False),
])
@pytest.mark.parametrize("size", [(16, 16), (20, 28)])
def test_residual_identity_at_init(flags, size):
    pre, isp = _helpers()
    model = RViDeNet(RViDeNetConfig(**SMALL, **flags), pre, isp)
    noisy = torch.rand(2, 3, *size)
    out = model(noisy)
    assert out.shape == (2, *size)
    assert torch.equal(out, noisy[:, 1])


def test_srgb_domain_identity_and_shape():
    model = RViDeNet(RViDeNetConfig(**SMALL, raw_domain=False, packing=False, predenoise=False))
    x = torch.rand(1, 3, 3, 16, 16)
    assert torch.equal(model(x), x[:, 1])


def test_unpacked_width_is_four_c():
    cfg = RViDeNetConfig(channels=16, packing=False, predenoise=False)
    model = RViDeNet(cfg)
    assert cfg.feature_channels == 64
    assert model.extractor.head.out_channels == 64
    assert model.spatial.conv_in.in_channels == 64
    packed = RViDeNet(RViDeNetConfig(channels=16))
    assert packed.extractor.head.out_channels == 16
    assert packed.spatial.conv_in.in_channels == 64


def test_config_validation():
    with pytest.raises(ConfigurationError):
        RViDeNetConfig(raw_domain=False)
    with pytest.raises(ConfigurationError):
        RViDeNetConfig(frames=4)


def test_dependencies_and_shapes():
    model = RViDeNet(RViDeNetConfig(**SMALL))
    with pytest.raises(DependencyError):
        model(torch.rand(1, 3, 16, 16))
    with pytest.raises(DependencyError):
        model.to_srgb(torch.rand(1, 16, 16))
    pre, isp = _helpers()
    model = RViDeNet(RViDeNetConfig(**SMALL), pre, isp)
    with pytest.raises(DimensionError):
        model(torch.rand(1, 5, 16, 16))
    assert model.to_srgb(torch.rand(2, 16, 16)).shape == (2, 3, 16, 16)


def test_every_trainable_parameter_gets_gradient():
    pre, isp = _helpers()
    model = RViDeNet(RViDeNetConfig(**SMALL), pre, isp)
    # leave the zero-init start so every branch is live
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d) and not m.weight.any():
                m.weight.normal_(std=0.05)
    noisy = torch.rand(1, 3, 16, 16)
    out = model(noisy)
    (out - noisy[:, 1] * 0.9).abs().mean().backward()
    dead = [n for n, p in model.named_parameters() if p.requires_grad and (p.grad is None or not p.grad.any())]
    assert not dead
    assert is_frozen(model.predenoiser) and is_frozen(model.isp)
    assert all(p.grad is None for p in model.predenoiser.parameters())


def test_trace_collects_fields_per_level():
    pre, isp = _helpers()
    model = RViDeNet(RViDeNetConfig(**SMALL), pre, isp)
    trace = []
    model(torch.rand(1, 3, 16, 16), trace=trace)
    assert [f.level for f in trace] == [3, 2, 1, 1]
    # four colour streams x two neighbours share one batched alignment pass
    assert trace[2].offsets.shape[0] == 8
