import numpy as np
import pytest

from conftest import naive_matmul
from mixbalance.backbone import (
    BackboneConfig, ClassifierHead, build_backbone, classify, forward_features, resnet18_preset,
)
from mixbalance.tensor import ShapeError, Tensor, gradient_check, log_softmax


def tiny(**kw):
    base = dict(stage_blocks=[1, 1], base_channels=4, input_size=8, feature_dim=6,
                num_classes=3, reduction_ratio=2, spatial_kernel=3)
    base.update(kw)
    return BackboneConfig(**base)


class TestConfig:
    def test_indivisible_input(self):
        with pytest.raises(ShapeError):
            BackboneConfig(stage_blocks=[1, 1, 1], input_size=30)

    @pytest.mark.parametrize("kw", [dict(feature_dim=0), dict(num_classes=1), dict(stage_blocks=[])])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            BackboneConfig(**kw)

    def test_json_round_trip(self):
        cfg = tiny(cbam_on=False)
        assert BackboneConfig.from_json(cfg.to_json()) == cfg

    def test_resnet18_preset_layout(self):
        cfg = resnet18_preset()
        assert cfg.stage_blocks == [2, 2, 2, 2] and cfg.input_size == 224
        assert cfg.downsampling == 32


class TestBuild:
    def test_same_seed_is_bitwise_identical(self):
        a, _ = build_backbone(tiny(), 11)
        b, _ = build_backbone(tiny(), 11)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb and pa.tobytes() == pb.tobytes()

    def test_different_seed_differs(self):
        a, _ = build_backbone(tiny(), 1)
        b, _ = build_backbone(tiny(), 2)
        assert a.head.weight.data.tobytes() != b.head.weight.data.tobytes()

    def test_desk_default_forward_shapes(self, rng):
        net, desc = build_backbone(BackboneConfig(), 0)
        mu, sigma = net.features(Tensor(rng.random((4, 1, 32, 32)).astype(np.float32)))
        assert mu.shape == (4, 64) and sigma.shape == (4, 64)
        assert np.all(sigma.data > 0)
        assert net(Tensor(rng.random((4, 1, 32, 32)).astype(np.float32))).shape == (4, 4)
        assert desc["name"] == "mini-resnet-cbam"

    @pytest.mark.parametrize("cbam_on", [True, False])
    def test_parameter_count_closed_form(self, cbam_on):
        ch, b, fd, c, r, k = 3, 8, 5, 4, 4, 3
        cfg = BackboneConfig(stage_blocks=[1], base_channels=b, input_size=6, in_channels=ch,
                             feature_dim=fd, num_classes=c, cbam_on=cbam_on,
                             reduction_ratio=r, spatial_kernel=k)
        net, _ = build_backbone(cfg, 0)
        stem = ch * b * 9 + 2 * b
        block = 2 * (b * b * 9 + 2 * b)
        h = b // r
        cbam = (b * h + h) + (h * b + b) + (2 * k * k + 1)
        heads = 2 * (b * fd + fd)
        expected = stem + block + (cbam if cbam_on else 0) + heads + c * fd
        assert net.num_parameters() == expected

    def test_stage_transition_adds_projection(self):
        net, _ = build_backbone(tiny(), 0)
        blocks = list(net.backbone.blocks)
        assert blocks[0].shortcut is None and blocks[1].shortcut is not None


class TestForward:
    def test_zero_sigma_head_gives_unit_sigma(self, rng):
        net, _ = build_backbone(tiny(), 0, np.float64)
        net.backbone.sigma_head.weight.data[:] = 0
        net.backbone.sigma_head.bias.data[:] = 0
        sigma = net.features(Tensor(rng.random((2, 1, 8, 8)))).sigma.data
        assert np.all(sigma == 1.0)

    def test_sigma_clamped_positive_for_extreme_inputs(self, rng):
        net, _ = build_backbone(tiny(), 0, np.float64)
        net.backbone.sigma_head.bias.data[:] = 1e4
        sigma = net.features(Tensor(rng.random((2, 1, 8, 8)))).sigma.data
        np.testing.assert_allclose(sigma, np.exp(10.0))

    def test_cbam_off_equals_plain_network(self, rng):
        plain, _ = build_backbone(tiny(cbam_on=False), 5, np.float64)
        with_cbam, _ = build_backbone(tiny(cbam_on=True), 5, np.float64)
        state = {k: v for k, v in with_cbam.state_dict().items() if ".cbam." not in k}
        plain.load_state_dict(state)
        for blk in with_cbam.backbone.blocks:
            blk.cbam = None
            blk._children.pop("cbam")
        x = Tensor(rng.random((2, 1, 8, 8)))
        assert plain(x).data.tobytes() == with_cbam(x).data.tobytes()

    def test_wrong_channel_count(self):
        net, _ = build_backbone(tiny(), 0)
        with pytest.raises(ShapeError):
            forward_features(Tensor(np.zeros((2, 3, 8, 8), dtype=np.float32)), net.backbone)

    def test_gradient_through_both_heads(self, rng):
        net, _ = build_backbone(tiny(), 3, np.float64)
        bb = net.backbone
        probe = Tensor(rng.normal(size=(2, 6)))

        def f(x, wm, ws):
            bb.mu_head.weight, bb.sigma_head.weight = wm, ws
            mu, sigma = forward_features(x, bb)
            return (mu * probe).sum() + (sigma * probe).sum()

        point = [rng.random((2, 1, 8, 8)), bb.mu_head.weight.data.copy(), bb.sigma_head.weight.data.copy()]
        assert gradient_check(f, point) < 1e-4


class TestClassify:
    def test_zero_head_uniform_softmax(self, rng):
        head = ClassifierHead(4, 3, rng, dtype=np.float64)
        head.weight.data[:] = 0
        logits = classify(Tensor(rng.normal(size=(5, 4))), head)
        assert np.all(logits.data == 0)
        np.testing.assert_allclose(np.exp(log_softmax(logits).data), 1 / 3)

    def test_one_hot_rows_select_coordinates(self, rng):
        head = ClassifierHead(4, 2, rng, dtype=np.float64)
        head.weight.data[:] = [[0, 0, 1, 0], [1, 0, 0, 0]]
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(classify(Tensor(x), head).data, x[:, [2, 0]])

    def test_random_vs_matmul(self, rng):
        head = ClassifierHead(5, 3, rng, dtype=np.float64)
        x = rng.normal(size=(4, 5))
        np.testing.assert_allclose(classify(Tensor(x), head).data,
                                   naive_matmul(x, head.weight.data.T), rtol=1e-13)

    def test_no_bias_by_default(self, rng):
        assert ClassifierHead(5, 3, rng).bias is None
