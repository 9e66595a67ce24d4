import pytest
import torch

from brainfuse.model import GROUPS, AblationSwitches, FusionSegmenter, parameter_groups
from brainfuse.segnet import (AttentionGate, ConditionalHead, NetworkConfig, ResidualCBAMBlock,
                              SegNet, describe)
from brainfuse.semantic import SemanticFeatures
from brainfuse.errors import ConfigError
from conftest import SMALL_NET as SMALL, SMALL_SEM, module_leaves


def _t(seed, *shape, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64) * scale


def test_default_forward_shapes():
    torch.manual_seed(0)
    model = FusionSegmenter().eval()
    with torch.no_grad():
        out = model(torch.randn(1, 4, 32, 32, 32), ["brain MRI"], 1.0)
    assert out.main.shape == (1, 3, 32, 32, 32)
    assert [tuple(a.shape[1:]) for a in out.aux] == [(3, 16, 16, 16), (3, 8, 8, 8), (3, 4, 4, 4)]
    assert out.class_logits.shape == (1, 2)
    assert out.bottleneck_features.shape == (1, 512, 2, 2, 2)
    assert 0 <= out.main.min() and out.main.max() <= 1


def test_input_divisibility_error_suggests_padding():
    net = SegNet(SMALL)
    with pytest.raises(ValueError, match=r"pad input to \(16, 16, 32\)"):
        net(torch.zeros(1, 4, 16, 16, 20))
    with pytest.raises(ValueError):
        net(torch.zeros(1, 3, 16, 16, 16))


def test_unknown_extractor_rejected():
    with pytest.raises(ConfigError):
        SegNet(SMALL, extractor="vit")
    with pytest.raises(ConfigError):
        AblationSwitches(feature_extractor="vit")
    with pytest.raises(ConfigError):
        NetworkConfig(encoder_channels=(32, 16, 64, 128))


@pytest.mark.parametrize("extractor", ["base", "3d_resnet", "2d_resnet", "plain_unet", "none"])
def test_every_extractor_runs(extractor):
    torch.manual_seed(0)
    model = FusionSegmenter(SMALL, SMALL_SEM, AblationSwitches(feature_extractor=extractor)).eval()
    with torch.no_grad():
        out = model(torch.randn(2, 4, 16, 16, 16), ["a", "b"], 1.0)
    assert out.main.shape == (2, 3, 16, 16, 16)


def test_no_extractor_prediction_ignores_voxels():
    torch.manual_seed(0)
    sw = AblationSwitches(feature_extractor="none", semantic_fusion=False)
    model = FusionSegmenter(SMALL, SMALL_SEM, sw).eval()
    with torch.no_grad():
        a = model(torch.randn(1, 4, 16, 16, 16)).main
        b = model(torch.randn(1, 4, 16, 16, 16)).main
    assert torch.equal(a, b)
    flat = a.flatten(2)
    assert torch.allclose(flat, flat[..., :1].expand_as(flat))
    # with semantic fusion, WT (which has no spatial attention) is still constant
    model = FusionSegmenter(SMALL, SMALL_SEM, AblationSwitches(feature_extractor="none")).eval()
    with torch.no_grad():
        wt = model(torch.randn(1, 4, 16, 16, 16), ["a"], 1.0).main[:, 0].flatten()
    assert torch.allclose(wt, wt[:1].expand_as(wt))


def test_semantic_off_matches_plain_segnet_bitwise():
    torch.manual_seed(0)
    model = FusionSegmenter(SMALL, SMALL_SEM, AblationSwitches(semantic_fusion=False)).eval()
    plain = SegNet(SMALL).eval()
    plain.load_state_dict(model.segnet.state_dict())
    x = torch.randn(1, 4, 16, 16, 16)
    with torch.no_grad():
        a = model(x, ["ignored"], 1.0).main
        b = plain(x, None).main
        c = model.segnet(x, None).main
    assert torch.equal(a, b) and torch.equal(a, c)


def test_zero_semantic_weight_skips_semantic_path():
    torch.manual_seed(0)
    model = FusionSegmenter(SMALL, SMALL_SEM).eval()
    x = torch.randn(1, 4, 16, 16, 16)
    with torch.no_grad():
        a = model(x, ["a"], 0.0)
        b = model.segnet(x, None)
    assert torch.equal(a.main, b.main)
    assert "semantic" not in a.extras


def test_neutral_semantic_with_zero_init_conditioning_is_half_gate():
    torch.manual_seed(0)
    net = SegNet(SMALL, semantic_dim=8).eval()
    x = torch.randn(1, 4, 16, 16, 16)
    with torch.no_grad():
        out = net(x, SemanticFeatures.neutral(1, 8))
    assert out.main.shape == (1, 3, 16, 16, 16)


def test_base_parameter_names_superset_of_ablations():
    torch.manual_seed(0)
    base = {n for n, _ in FusionSegmenter(SMALL, SMALL_SEM).named_parameters()}
    variants = [
        AblationSwitches(pixel_fusion=False), AblationSwitches(semantic_fusion=False),
        AblationSwitches(semantic_guidance=False), AblationSwitches(semantic_attention=False),
        AblationSwitches(semantic_guidance=False, semantic_attention=False),
        AblationSwitches(feature_extractor="3d_resnet"), AblationSwitches(feature_extractor="2d_resnet"),
        AblationSwitches(feature_extractor="plain_unet"), AblationSwitches(feature_extractor="none"),
        AblationSwitches(pixel_fusion=False, semantic_fusion=False, feature_extractor="plain_unet"),
    ]
    for sw in variants:
        names = {n for n, _ in FusionSegmenter(SMALL, SMALL_SEM, sw).named_parameters()}
        assert names <= base, (sw, sorted(names - base)[:5])
        if sw != AblationSwitches(pixel_fusion=False):
            assert names < base


def test_parameter_groups_cover_everything_once():
    torch.manual_seed(0)
    model = FusionSegmenter(SMALL, SMALL_SEM)
    groups = parameter_groups(model)
    assert set(groups) == set(GROUPS)
    ids = [id(p) for ps in groups.values() for p in ps]
    trainable = [id(p) for p in model.parameters() if p.requires_grad]
    assert sorted(ids) == sorted(trainable) and len(set(ids)) == len(ids)
    att = {id(p) for p in groups["attention"]}
    assert all(id(p) in att for p in model.segnet.gates.parameters())
    assert all(id(p) in att for p in model.semantic.refine.parameters())
    clip = {id(p) for p in groups["clip_adapter"]}
    assert all(id(p) in clip for p in model.semantic.vision_mapper.parameters())


def test_attention_gate_coefficients_range_and_saturation():
    torch.manual_seed(0)
    ag = AttentionGate(4, 8).double()
    skip, gating = _t(0, 1, 4, 4, 4, 4), _t(1, 1, 8, 2, 2, 2)
    a = ag.coefficients(skip, gating)
    assert a.shape == (1, 1, 4, 4, 4) and torch.all((a > 0) & (a < 1))
    with torch.no_grad():
        ag.psi.weight.zero_()
        ag.psi.bias.fill_(40.0)
    torch.testing.assert_close(ag(skip, gating), skip, atol=1e-12, rtol=0)
    with torch.no_grad():
        ag.psi.bias.fill_(-40.0)
    assert ag(skip, gating).abs().max() < 1e-12
    with pytest.raises(ValueError):
        ag(skip, _t(2, 1, 4, 2, 2, 2))


def test_residual_block_identity_shortcut_and_channel_check():
    blk = ResidualCBAMBlock(4, 4, groups=4)
    assert blk.shortcut is None
    assert ResidualCBAMBlock(2, 4, groups=4).shortcut is not None
    with pytest.raises(ValueError):
        blk(torch.zeros(1, 3, 4, 4, 4))
    down = ResidualCBAMBlock(2, 4, stride=2, planar=True, groups=4)
    assert down(torch.zeros(1, 2, 4, 4, 4)).shape == (1, 4, 2, 2, 2)


def test_conditional_head_zero_init_is_unconditioned():
    torch.manual_seed(0)
    head = ConditionalHead(4, 3, 4, semantic_dim=6).double()
    x = _t(0, 1, 4, 4, 4, 4)
    torch.testing.assert_close(head(x, _t(1, 1, 6)), head(x, None), rtol=0, atol=0)


def test_describe_counts():
    torch.manual_seed(0)
    model = FusionSegmenter(SMALL, SMALL_SEM)
    d = describe(model)
    assert d["total_parameters"] == sum(p.numel() for p in model.parameters())
    assert set(d["children"]) == {"semantic", "segnet"}


# --------------------------------------------------------------------------- gradients

def test_gradcheck_residual_cbam_block(gradcheck, smooth):
    def make(seed):
        torch.manual_seed(seed)
        blk = ResidualCBAMBlock(2, 4, groups=4, reduction=2, spatial_kernel=3).double()
        x = _t(seed, 1, 2, 4, 4, 4).requires_grad_()
        return (lambda: blk(x)), module_leaves(blk, x)

    assert gradcheck(*smooth(make)) < 1e-3


def test_gradcheck_attention_gate(gradcheck, smooth):
    def make(seed):
        torch.manual_seed(seed)
        ag = AttentionGate(2, 3).double()
        skip = _t(seed, 1, 2, 4, 4, 4).requires_grad_()
        gating = _t(seed + 1, 1, 3, 2, 2, 2).requires_grad_()
        return (lambda: ag(skip, gating)), module_leaves(ag, skip, gating)

    assert gradcheck(*smooth(make)) < 1e-3


@pytest.mark.parametrize("prior", [0.01, 0.2])
def test_featureless_heads_start_at_output_prior(prior):
    cfg = NetworkConfig(**{**SMALL.__dict__, "output_prior": prior})
    net = SegNet(cfg, extractor="none").eval()
    with torch.no_grad():
        out = net(torch.randn(1, 4, 16, 16, 16))
    assert torch.allclose(out.main, torch.full_like(out.main, prior), atol=1e-6)
    assert all(torch.allclose(a, torch.full_like(a, prior), atol=1e-6) for a in out.aux)


def test_output_prior_range():
    with pytest.raises(ConfigError):
        NetworkConfig(output_prior=1.0)
