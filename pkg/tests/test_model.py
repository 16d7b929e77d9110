import numpy as np
import pytest

from scf.losses import FeatureBatch, LossConfig, cross_entropy, steg_cl
from scf.model import (HIGH_PASS, CheckpointFormatError, ModelConfig, backward, dumps_checkpoint, forward,
                       high_pass, init_params, loads_checkpoint)
from scf.numkit import finite_diff_grad, make_rng, rel_err
from scf.rss import select_positives

MICRO = ModelConfig(image_size=8, channels=(2, 2), feature_dim=4, trainable_preprocessing=True)


def micro_setup(seed=0, B=6):
    rng = make_rng(seed)
    params = init_params(MICRO, rng)
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.uniform(-0.1, 0.1, params[k].shape)
    x = rng.random((B, 8, 8))
    y = np.tile([0, 1], B // 2)
    return params, x, y, select_positives(y, rng)


def full_loss(params, x, y, pairs, lam=1.0):
    z, logits, trace = forward(params, MICRO, x)
    ce = cross_entropy(logits, y)
    sc = steg_cl(FeatureBatch(z, y), pairs, LossConfig(tau=0.5))
    return ce.value + lam * sc.value / sc.term_count, ce.grad, lam * sc.grad / sc.term_count, trace


class TestInit:
    def test_deterministic(self):
        a = init_params(ModelConfig(), make_rng(3))
        b = init_params(ModelConfig(), make_rng(3))
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_seeds_differ(self):
        a = init_params(ModelConfig(), make_rng(3))
        b = init_params(ModelConfig(), make_rng(4))
        assert not np.array_equal(a["conv0.W"], b["conv0.W"])

    def test_high_pass_stencil(self):
        p = init_params(ModelConfig(), make_rng(0))
        np.testing.assert_array_equal(p["hp"], HIGH_PASS)
        assert np.all(HIGH_PASS.sum(axis=1) == 0)

    def test_shapes(self):
        cfg = ModelConfig()
        p = init_params(cfg, make_rng(0))
        assert list(p) == list(cfg.param_shapes())
        assert all(p[k].shape == s for k, s in cfg.param_shapes().items())


class TestForward:
    def test_constant_images_same_features(self):
        cfg = ModelConfig()
        p = init_params(cfg, make_rng(1))
        x = np.stack([np.full((16, 16), 0.2), np.full((16, 16), 0.9)])
        r, _ = high_pass(x[:, None], p["hp"])
        assert np.max(np.abs(r)) <= 1e-15
        z, _, _ = forward(p, cfg, x)
        np.testing.assert_allclose(z[0], z[1], rtol=0, atol=1e-12)
        # only the bias path survives a zero residual
        np.testing.assert_allclose(z[0], forward(p, cfg, np.zeros((1, 16, 16)))[0][0], rtol=0, atol=1e-12)

    def test_shapes(self):
        cfg = ModelConfig()
        z, logits, _ = forward(init_params(cfg, make_rng(0)), cfg, np.zeros((5, 16, 16)))
        assert z.shape == (5, 32) and logits.shape == (5, 2)

    def test_channel_axis_accepted(self):
        cfg = ModelConfig()
        p = init_params(cfg, make_rng(0))
        x = make_rng(1).random((3, 16, 16))
        np.testing.assert_array_equal(forward(p, cfg, x)[0], forward(p, cfg, x[:, None])[0])

    def test_wrong_size(self):
        cfg = ModelConfig()
        with pytest.raises(ValueError):
            forward(init_params(cfg, make_rng(0)), cfg, np.zeros((2, 8, 8)))

    def test_dc_invariance(self):
        cfg = ModelConfig()
        p = init_params(cfg, make_rng(2))
        x = make_rng(3).random((4, 16, 16)) * 0.8 + 0.1
        z0 = forward(p, cfg, x)[0]
        for c in (-0.1, 0.05, 0.1):
            assert np.max(np.abs(forward(p, cfg, x + c)[0] - z0)) <= 1e-10

    def test_deterministic(self):
        cfg = ModelConfig()
        p = init_params(cfg, make_rng(2))
        x = make_rng(3).random((4, 16, 16))
        assert np.array_equal(forward(p, cfg, x)[0], forward(p, cfg, x)[0])


class TestBackward:
    def test_full_model_finite_differences(self):
        params, x, y, pairs = micro_setup()
        _, dl, dz, trace = full_loss(params, x, y, pairs)
        grads = backward(params, trace, dz, dl)
        for name in params:
            def f(W, name=name):
                q = dict(params)
                q[name] = W
                return full_loss(q, x, y, pairs)[0]
            fd = finite_diff_grad(f, params[name])
            assert rel_err(grads[name], fd) <= 1e-5, name

    def test_zero_upstream(self):
        params, x, y, pairs = micro_setup()
        _, _, _, trace = full_loss(params, x, y, pairs)
        grads = backward(params, trace, np.zeros((6, 4)), np.zeros((6, 2)))
        assert all(not np.any(g) for g in grads.values())
        grads = backward(params, trace, None, None)
        assert all(not np.any(g) for g in grads.values())

    def test_additivity(self):
        params, x, y, pairs = micro_setup(seed=5)
        _, dl, dz, trace = full_loss(params, x, y, pairs)
        both = backward(params, trace, dz, dl)
        only_z = backward(params, trace, dz, None)
        only_l = backward(params, trace, None, dl)
        for k in both:
            np.testing.assert_allclose(both[k], only_z[k] + only_l[k], rtol=1e-12, atol=1e-15)

    def test_ce_only_equals_none_dz(self):
        params, x, y, pairs = micro_setup(seed=6)
        _, dl, _, trace = full_loss(params, x, y, pairs)
        a = backward(params, trace, None, dl)
        b = backward(params, trace, np.zeros((6, 4)), dl)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_mismatched_trace(self):
        params, x, y, pairs = micro_setup()
        _, _, _, trace = full_loss(params, x, y, pairs)
        with pytest.raises(ValueError):
            backward(params, trace, np.zeros((5, 4)), None)


class TestCheckpoint:
    def test_round_trip(self):
        cfg = ModelConfig(channels=(4, 6), feature_dim=8, trainable_preprocessing=True)
        p = init_params(cfg, make_rng(1))
        buf = dumps_checkpoint(cfg, p)
        cfg2, p2 = loads_checkpoint(buf)
        assert cfg2 == cfg
        assert all(np.array_equal(p[k], p2[k]) for k in p)
        assert dumps_checkpoint(cfg2, p2) == buf
        assert buf[:4] == b"SCFC" and buf[4] == 1

    @pytest.mark.parametrize("mutate,field", [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + b"\x02" + b[5:], "version"),
        (lambda b: b[:-10], "checksum"),
        (lambda b: b[:40] + bytes([b[40] ^ 1]) + b[41:], "checksum"),
    ])
    def test_corruption(self, mutate, field):
        cfg = ModelConfig()
        buf = dumps_checkpoint(cfg, init_params(cfg, make_rng(0)))
        with pytest.raises(CheckpointFormatError) as err:
            loads_checkpoint(mutate(buf))
        assert err.value.field == field


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"image_size": 4}, {"feature_dim": 1}, {"kernel_size": 5},
                                        {"channels": ()}, {"image_size": 10}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)
