"""Tests for the neural pipeline stages and the full forward pass."""

import logging
import math

import numpy as np
import pytest

from platoonkit import autodiff as ad
from platoonkit import network as net


def _tiny_config(**over):
    base = dict(d_model=4, n_state=2, conv_kernel=4, ve_hidden=4,
                attn_layers=1, attn_heads=2, history_len=4, horizon=2,
                param_window=1)
    base.update(over)
    return net.ModelConfig(**base)


def _window_batch(cfg, rng, batch=2, n_veh=3):
    hist = np.empty((batch, n_veh, cfg.history_len, 3))
    hist[..., 0] = rng.uniform(8.0, 15.0, hist.shape[:-1])
    hist[..., 1] = rng.uniform(10.0, 30.0, hist.shape[:-1])
    hist[..., 2] = rng.uniform(-1.0, 1.0, hist.shape[:-1])
    lead = rng.uniform(8.0, 15.0, (batch, cfg.horizon))
    return hist, lead


class TestConfig:
    def test_defaults_are_consistent(self):
        cfg = net.ModelConfig()
        assert cfg.d_model == 64 and cfg.n_state == 8
        assert cfg.history_len == 21 and cfg.horizon == 20
        assert cfg.n_param_steps == 4 and cfg.d_inner == 128

    def test_horizon_must_divide(self):
        with pytest.raises(ValueError, match="multiple"):
            net.ModelConfig(horizon=20, param_window=3)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError, match="heads"):
            net.ModelConfig(d_model=10, attn_heads=4)

    def test_positive_fields(self):
        with pytest.raises(ValueError, match="n_state"):
            net.ModelConfig(n_state=0)


class TestInit:
    def test_deterministic_and_quantized(self):
        cfg = _tiny_config()
        p1 = net.init_params(cfg, seed=3)
        p2 = net.init_params(cfg, seed=3)
        for k in p1.weights:
            a = p1.weights[k].data
            np.testing.assert_array_equal(a, p2.weights[k].data)
            np.testing.assert_array_equal(a, a.astype(np.float32).astype(np.float64))

    def test_seed_changes_draws(self):
        cfg = _tiny_config()
        p1 = net.init_params(cfg, seed=0)
        p2 = net.init_params(cfg, seed=1)
        assert not np.array_equal(p1.weights["embed.w"].data,
                                  p2.weights["embed.w"].data)

    def test_structured_initial_values(self):
        cfg = _tiny_config()
        p = net.init_params(cfg, seed=0)
        want = np.tile(np.log(np.arange(1.0, cfg.n_state + 1.0)), (cfg.d_inner, 1))
        np.testing.assert_allclose(p.weights["tfl.a_log"].data,
                                   want.astype(np.float32), rtol=0, atol=1e-7)
        np.testing.assert_array_equal(p.weights["tfl.d"].data, np.ones(cfg.d_inner))
        # softplus of the dt bias must land in the documented band
        dt0 = np.logaddexp(0.0, p.weights["tfl.dt_proj.b"].data)
        assert (dt0 > 0.9e-3).all() and (dt0 < 1.1e-1).all()

    def test_count_parameters(self):
        cfg = _tiny_config()
        p = net.init_params(cfg)
        assert net.count_parameters(p) == sum(
            t.data.size for t in p.weights.values())


class TestSinusoidalEncoding:
    def test_first_row_and_shape(self):
        enc = net.sinusoidal_encoding(5, 8)
        assert enc.shape == (5, 8)
        np.testing.assert_allclose(enc[0], [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-15)
        assert enc[1, 0] == pytest.approx(math.sin(1.0), abs=1e-15)
        assert enc[1, 1] == pytest.approx(math.cos(1.0), abs=1e-15)

    def test_cache_returns_readonly(self):
        enc = net.sinusoidal_encoding(3, 4)
        assert enc is net.sinusoidal_encoding(3, 4)
        assert not enc.flags.writeable


class TestSelectiveScan:
    def test_hand_computed_two_steps(self):
        # A=-1, delta=ln2 everywhere: decay exp(-ln2)=0.5, inject ln2*u.
        ln2 = math.log(2.0)
        u = np.ones((2, 1))
        delta = np.full((2, 1), ln2)
        a_mat = np.array([[-1.0]])
        b_seq = np.ones((2, 1))
        c_seq = np.ones((2, 1))
        d_gain = np.zeros(1)
        y = net.selective_scan(u, delta, a_mat, b_seq, c_seq, d_gain).data
        assert y[0, 0] == pytest.approx(ln2, abs=1e-12)
        assert y[1, 0] == pytest.approx(1.5 * ln2, abs=1e-12)

    def test_zero_delta_passes_through_d(self):
        rng = np.random.default_rng(0)
        u = rng.normal(size=(1, 2, 5, 3))
        delta = np.zeros_like(u)
        a_mat = rng.normal(size=(3, 4))
        b_seq = rng.normal(size=(1, 2, 5, 4))
        c_seq = rng.normal(size=(1, 2, 5, 4))
        d_gain = rng.normal(size=3)
        y = net.selective_scan(u, delta, a_mat, b_seq, c_seq, d_gain).data
        np.testing.assert_allclose(y, d_gain * u, rtol=0, atol=1e-15)


class TestTemporalBlock:
    def test_causal_in_time(self):
        cfg = _tiny_config(history_len=6)
        p = net.init_params(cfg, seed=1)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 2, 6, cfg.d_model))
        x2 = x.copy()
        x2[..., -1, :] += 1.0
        y1 = net.tfl_forward(p.weights, cfg, x).data
        y2 = net.tfl_forward(p.weights, cfg, x2).data
        np.testing.assert_array_equal(y1[..., :-1, :], y2[..., :-1, :])
        assert not np.array_equal(y1[..., -1, :], y2[..., -1, :])

    def test_vehicles_are_independent(self):
        cfg = _tiny_config()
        p = net.init_params(cfg, seed=1)
        rng = np.random.default_rng(3)
        row = rng.normal(size=(1, 1, cfg.history_len, cfg.d_model))
        x = np.tile(row, (1, 3, 1, 1))
        y = net.tfl_forward(p.weights, cfg, x).data
        np.testing.assert_array_equal(y[0, 0], y[0, 1])
        np.testing.assert_array_equal(y[0, 0], y[0, 2])


class TestVariationalHead:
    def test_mean_latent_when_no_noise(self):
        cfg = _tiny_config()
        p = net.init_params(cfg, seed=0)
        x = np.random.default_rng(1).normal(size=(2, 3, cfg.d_model))
        z, mu, logvar = net.ful_forward(p.weights, x)
        np.testing.assert_array_equal(z.data, mu.data)
        assert logvar.shape == (2, 3, cfg.d_model)

    def test_noise_shifts_by_sigma(self):
        cfg = _tiny_config()
        p = net.init_params(cfg, seed=0)
        x = np.random.default_rng(1).normal(size=(1, 2, cfg.d_model))
        eps = np.random.default_rng(2).normal(size=(1, 2, cfg.d_model))
        z, mu, logvar = net.ful_forward(p.weights, x, noise=eps)
        want = mu.data + np.exp(0.5 * logvar.data) * eps
        np.testing.assert_allclose(z.data, want, rtol=0, atol=1e-15)


class TestPlatoonAttention:
    def test_leaderward_causality(self):
        cfg = _tiny_config()
        p = net.init_params(cfg, seed=4)
        rng = np.random.default_rng(5)
        z = rng.normal(size=(1, 4, cfg.d_model))
        z2 = z.copy()
        z2[0, 2] += 1.0
        y1 = net.pfl_forward(p.weights, cfg, ad.as_tensor(z)).data
        y2 = net.pfl_forward(p.weights, cfg, ad.as_tensor(z2)).data
        np.testing.assert_array_equal(y1[0, :2], y2[0, :2])
        assert not np.array_equal(y1[0, 2], y2[0, 2])

    def test_single_vehicle_runs(self):
        cfg = _tiny_config()
        p = net.init_params(cfg, seed=4)
        z = np.random.default_rng(6).normal(size=(2, 1, cfg.d_model))
        before = ad.degenerate_softmax_rows()
        y = net.pfl_forward(p.weights, cfg, ad.as_tensor(z))
        assert y.shape == (2, 1, cfg.d_model)
        assert ad.degenerate_softmax_rows() == before
        assert np.isfinite(y.data).all()


class TestModelForward:
    def test_shapes_and_sign_pattern(self):
        cfg = _tiny_config()
        p = net.init_params(cfg, seed=0)
        hist, lead = _window_batch(cfg, np.random.default_rng(7))
        out = net.model_forward(p, cfg, hist, lead)
        B, N, S = 2, 3, cfg.n_param_steps
        assert out.theta.shape == (B, N, S, 3)
        assert out.result.v.shape == (B, N, cfg.horizon)
        assert out.mu.shape == (B, N, cfg.d_model)
        th = out.theta.data
        assert (th[..., 0] < 0).all() and (th[..., 1] > 0).all() and (th[..., 2] > 0).all()

    def test_eval_is_deterministic(self):
        cfg = _tiny_config()
        p = net.init_params(cfg, seed=0)
        hist, lead = _window_batch(cfg, np.random.default_rng(8))
        a = net.model_forward(p, cfg, hist, lead)
        b = net.model_forward(p, cfg, hist, lead)
        np.testing.assert_array_equal(a.theta.data, b.theta.data)
        np.testing.assert_array_equal(a.result.s.data, b.result.s.data)

    def test_noise_moves_theta_but_not_mu(self):
        cfg = _tiny_config()
        p = net.init_params(cfg, seed=0)
        hist, lead = _window_batch(cfg, np.random.default_rng(9), batch=1)
        eps = np.random.default_rng(10).normal(size=(1, 3, cfg.d_model))
        a = net.model_forward(p, cfg, hist, lead)
        b = net.model_forward(p, cfg, hist, lead, noise=eps)
        np.testing.assert_array_equal(a.mu.data, b.mu.data)
        assert not np.array_equal(a.theta.data, b.theta.data)

    def test_ablations_run_and_differ(self):
        rng = np.random.default_rng(11)
        full_cfg = _tiny_config()
        hist, lead = _window_batch(full_cfg, rng)
        outs = {}
        for name, over in (("full", {}), ("no_tfl", {"disable_tfl": True}),
                           ("no_pfl", {"disable_pfl": True})):
            cfg = _tiny_config(**over)
            p = net.init_params(cfg, seed=0)
            outs[name] = net.model_forward(p, cfg, hist, lead).theta.data
        assert not np.array_equal(outs["full"], outs["no_tfl"])
        assert not np.array_equal(outs["full"], outs["no_pfl"])

    def test_shape_guards(self):
        cfg = _tiny_config()
        p = net.init_params(cfg, seed=0)
        hist, lead = _window_batch(cfg, np.random.default_rng(12))
        with pytest.raises(ad.ShapeMismatch, match="history"):
            net.model_forward(p, cfg, hist[..., :2], lead)
        with pytest.raises(ad.ShapeMismatch, match="lead_future"):
            net.model_forward(p, cfg, hist, lead[:, :-1])
        with pytest.raises(ad.ShapeMismatch, match="history length"):
            net.model_forward(p, cfg, hist[:, :, :-1, :], lead)

    def test_expected_state_uses_raw_history(self):
        cfg = _tiny_config()
        p = net.init_params(cfg, seed=0)
        hist, lead = _window_batch(cfg, np.random.default_rng(13), batch=1)
        out = net.model_forward(p, cfg, hist, lead)
        np.testing.assert_allclose(out.xstar.v_star.data, hist[..., 0].mean(axis=-1),
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(out.xstar.s_star.data, hist[..., 1].mean(axis=-1),
                                   rtol=0, atol=1e-12)


class TestNormalization:
    def test_fit_matches_numpy(self):
        cfg = _tiny_config()
        rng = np.random.default_rng(14)

        class W:
            def __init__(self, h):
                self.history = h

        wins = [W(rng.normal(5.0, 2.0, size=(3, cfg.history_len, 3)))
                for _ in range(4)]
        mean, std = net.fit_normalization(wins)
        flat = np.concatenate([w.history.reshape(-1, 3) for w in wins])
        np.testing.assert_allclose(mean, flat.mean(axis=0), rtol=1e-6)
        np.testing.assert_allclose(std, flat.std(axis=0), rtol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            net.fit_normalization([])

    def test_magnitude_warning(self, caplog):
        cfg = _tiny_config()
        p = net.init_params(cfg, seed=0)
        hist, lead = _window_batch(cfg, np.random.default_rng(15), batch=1)
        p.norm_std = np.full(3, 1e-6)   # absurd stats force huge values
        with caplog.at_level(logging.WARNING, logger="platoonkit.network"):
            net.model_forward(p, cfg, hist, lead)
        assert any("normalization" in r.message for r in caplog.records)


class TestGradients:
    def test_full_model_gradcheck(self):
        err, count = net.gradcheck_model(_tiny_config(), seed=0)
        assert count > 500
        assert err < 1e-4
