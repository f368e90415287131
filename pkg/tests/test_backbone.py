import numpy as np
import pytest

from condattn import autodiff as ad
from condattn.backbone import (
    ConfigError,
    backbone_forward,
    build_backbone,
    desk_config,
    flat_dim,
    full_scale_config,
    layer_shapes,
    parameter_count,
    tiny_config,
)


def learnable_size(params):
    return sum(v.size for k, v in params.items() if not k.endswith(("bn_mean", "bn_var")))


class TestConfig:
    def test_full_scale_topology(self):
        cfg = full_scale_config()
        shapes = {ls.name: ls for ls in layer_shapes(cfg)}
        assert cfg.fc_dim == 512
        assert cfg.layer_names()[:4] == ["conv1_1", "conv1_2", "conv2_1", "conv2_2"]
        # nothing shrinks before the end of stage 3
        assert shapes["conv3_3"].hw == shapes["conv1_1"].hw == 54
        assert cfg.pool_plan == ("conv3_3", "conv4_3", "conv5_3", "conv6", "conv7")
        assert len(cfg.layer_names()) == 15

    def test_desk_local_grids(self):
        shapes = {ls.name: ls for ls in layer_shapes(desk_config())}
        assert (shapes["conv4"].channels, shapes["conv4"].hw, shapes["conv4"].stride) == (32, 14, 4)
        assert (shapes["conv5"].channels, shapes["conv5"].hw, shapes["conv5"].stride) == (32, 7, 8)
        assert flat_dim(desk_config()) == 32 * 4 * 4

    def test_unknown_layer(self):
        with pytest.raises(ConfigError):
            desk_config(taps=("conv4", "conv9"))

    def test_taps_must_shrink(self):
        with pytest.raises(ConfigError):
            desk_config(taps=("conv5", "conv4"))

    def test_too_small_input(self):
        with pytest.raises(ConfigError):
            desk_config(input_hw=4)


class TestBuild:
    @pytest.mark.parametrize("cfg", [desk_config(), tiny_config(), desk_config(use_batchnorm=False)])
    def test_parameter_count_formula(self, cfg):
        assert learnable_size(build_backbone(cfg, np.random.default_rng(0))) == parameter_count(cfg)

    def test_desk_count_by_hand(self):
        widths, c_in, total = (8, 16, 32, 32, 32), 1, 0
        for w in widths:
            total += 9 * c_in * w + 2 * w
            c_in = w
        assert parameter_count(desk_config()) == total + 512 * 64 + 64

    def test_full_scale_global_feature(self, rng):
        cfg = full_scale_config()
        params = build_backbone(cfg, np.random.default_rng(0))
        assert flat_dim(cfg) == 512 * 2 * 2
        out = backbone_forward(rng.uniform(size=(1, 54, 54)), ad.constants(params), params, cfg)
        assert out.G.shape == (512,)
        assert out.L1.shape == (512, 27, 27) and out.L2.shape == (512, 14, 14)

    def test_seeded_build_is_bit_identical(self):
        a = build_backbone(desk_config(), np.random.default_rng(5))
        b = build_backbone(desk_config(), np.random.default_rng(5))
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


class TestForward:
    @pytest.fixture
    def net(self):
        cfg = desk_config()
        return cfg, build_backbone(cfg, np.random.default_rng(0))

    def test_shapes(self, net, rng):
        cfg, params = net
        out = backbone_forward(rng.uniform(size=(2, 1, 54, 54)), ad.constants(params), params, cfg)
        assert out.L1.shape == (2, 32, 14, 14) and out.L2.shape == (2, 32, 7, 7) and out.G.shape == (2, 64)
        assert out.strides == (4, 8)

    def test_unbatched(self, net, rng):
        cfg, params = net
        img = rng.uniform(size=(1, 54, 54))
        a = backbone_forward(img, ad.constants(params), params, cfg)
        b = backbone_forward(img[None], ad.constants(params), params, cfg)
        assert np.array_equal(a.G.data, b.G.data[0])

    def test_zero_image_is_finite(self, net):
        cfg, params = net
        out = backbone_forward(np.zeros((1, 1, 54, 54)), ad.constants(params), params, cfg)
        assert np.all(np.isfinite(out.G.data))
        np.testing.assert_allclose(out.G.data[0], params["fc/b"])

    def test_eval_is_deterministic(self, net, rng):
        cfg, params = net
        img = rng.uniform(size=(2, 1, 54, 54))
        a = backbone_forward(img, ad.constants(params), params, cfg)
        b = backbone_forward(img, ad.constants(params), params, cfg)
        assert np.array_equal(a.L1.data, b.L1.data) and np.array_equal(a.G.data, b.G.data)

    def test_train_updates_buffers(self, net, rng):
        cfg, params = net
        before = params["conv1/bn_mean"].copy()
        backbone_forward(rng.uniform(size=(2, 1, 54, 54)), ad.constants(params), params, cfg, True, rng)
        assert not np.array_equal(before, params["conv1/bn_mean"])
        assert (params["conv3/bn_var"] >= 0).all()

    def test_train_needs_rng(self, net):
        cfg, params = net
        with pytest.raises(ValueError):
            backbone_forward(np.zeros((1, 1, 54, 54)), ad.constants(params), params, cfg, train=True)

    def test_wrong_input_shape(self, net):
        cfg, params = net
        with pytest.raises(ad.ShapeError):
            backbone_forward(np.zeros((1, 1, 32, 32)), ad.constants(params), params, cfg)

    def test_dropout_kept_fraction(self):
        out = ad.dropout(np.ones(100_000), 0.4, np.random.default_rng(9), train=True).data
        assert 0.59 <= (out > 0).mean() <= 0.61


class TestBatchnormExamples:
    def test_standardized_fixed_point(self, rng):
        x = rng.standard_normal((64, 3))
        x = (x - x.mean(0)) / x.std(0)
        out = ad.batchnorm(x, np.ones(3), np.zeros(3), {"mean": np.zeros(3), "var": np.ones(3)}, True).data
        # eps keeps the output a factor 1/sqrt(1 + 1e-5) off the identity
        np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), atol=1e-12)
        assert np.abs(out - x).max() <= 5e-6 * np.abs(x).max()

    def test_constant_channel_gives_shift(self):
        x = np.full((5, 2, 2, 2), 3.0)
        out = ad.batchnorm(x, np.ones(2), np.array([0.5, -1.0]), {"mean": np.zeros(2), "var": np.ones(2)}, True)
        np.testing.assert_allclose(out.data[:, 0], 0.5)
        np.testing.assert_allclose(out.data[:, 1], -1.0)

    def test_gradcheck(self, rng):
        from condattn.gradcheck import check_gradients

        running = {"mean": np.zeros(3), "var": np.ones(3)}
        res = check_gradients(
            "bn", lambda p: ad.batchnorm(p["x"], p["g"], p["b"], running, True),
            {"x": rng.standard_normal((6, 3)), "g": rng.uniform(0.5, 2, 3), "b": rng.standard_normal(3)}, rng,
        )
        assert res.max_rel_error <= 1e-5
