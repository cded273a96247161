"""Tests for losses, weight balancing, Adam, checkpoints, and the train loop."""

import io
import json
import math
import os
from types import SimpleNamespace

import numpy as np
import pytest

from platoonkit import autodiff as ad
from platoonkit import data
from platoonkit import network as net
from platoonkit import training as tr


def _tiny_config(**over):
    base = dict(d_model=4, n_state=2, conv_kernel=4, ve_hidden=4,
                attn_layers=1, attn_heads=2, history_len=6, horizon=4,
                param_window=2)
    base.update(over)
    return net.ModelConfig(**base)


def _windows(cfg, n_platoons=3, seed=5):
    records = data.generate_synthetic_platoons(
        n_platoons, n_followers=2, duration_s=10.0, seed=seed)
    wins = []
    for rec in records:
        wins.extend(data.extract_windows(rec, cfg.history_len, cfg.horizon,
                                         stride=4))
    return wins


class TestLosses:
    def test_prediction_unit_error(self):
        v = ad.as_tensor(np.ones((2, 3, 4)))
        s = ad.as_tensor(np.full((2, 3, 4), 5.0))
        targets = np.stack([np.zeros((2, 3, 4)), np.full((2, 3, 4), 4.0)], axis=-1)
        l_v, l_s = tr.prediction_losses(SimpleNamespace(v=v, s=s), targets)
        assert l_v.data == pytest.approx(1.0, abs=1e-15)
        assert l_s.data == pytest.approx(1.0, abs=1e-15)

    def test_kl_fixtures(self):
        zero = np.zeros((2, 5))
        assert tr.kl_loss(zero, zero).data == pytest.approx(0.0, abs=1e-15)
        assert tr.kl_loss(np.ones((2, 5)), zero).data == pytest.approx(0.5, abs=1e-15)
        want = (math.e - 2.0) / 2.0
        assert tr.kl_loss(zero, np.ones((2, 5))).data == pytest.approx(want, abs=1e-12)

    def test_kl_gradient(self):
        rng = np.random.default_rng(0)
        mu = rng.normal(size=(3, 4))
        logvar = rng.normal(size=(3, 4))
        err = ad.finite_diff_check(lambda m, lv: tr.kl_loss(m, lv), [mu, logvar])
        assert err < 1e-6


class TestDwa:
    def test_bootstrap_uniform(self):
        assert np.array_equal(tr.dwa_weights([]), [1.0, 1.0])
        assert np.array_equal(tr.dwa_weights([(1.0, 2.0)]), [1.0, 1.0])

    def test_ratio_fixture(self):
        w = tr.dwa_weights([(1.0, 1.0), (1.0, 2.0)])
        assert w[0] == pytest.approx(0.755, abs=1e-3)
        assert w[1] == pytest.approx(1.245, abs=1e-3)
        assert w.sum() == pytest.approx(2.0, abs=1e-12)

    def test_equal_ratios_stay_uniform(self):
        w = tr.dwa_weights([(2.0, 4.0), (1.0, 2.0)])
        np.testing.assert_allclose(w, [1.0, 1.0], atol=1e-12)

    def test_vanishing_denominator_guard(self):
        w = tr.dwa_weights([(0.0, 1.0), (1.0, 2.0)])
        np.testing.assert_array_equal(w, [1.0, 1.0])


class TestAdam:
    def test_first_step_bit_exact(self):
        w = ad.param(np.array(0.0))
        opt = tr.Adam({"w": w}, lr=0.1)
        w.grad = np.array(3.0)
        opt.step()
        # m-hat = g, v-hat = g^2 -> step = lr * g / (|g| + eps), then f32 snap
        exact = -0.1 * (3.0 / (3.0 + 1e-8))
        assert w.data == np.float64(np.float32(exact))
        assert w.grad is None

    def test_skip_params_without_grad(self):
        w = ad.param(np.array([1.0, 2.0]))
        opt = tr.Adam({"w": w}, lr=0.1)
        opt.step()
        np.testing.assert_array_equal(w.data, [1.0, 2.0])

    def test_weights_stay_float32_representable(self):
        rng = np.random.default_rng(1)
        w = ad.param(net._q32(rng.normal(size=(4, 3))))
        opt = tr.Adam({"w": w}, lr=1e-2)
        for _ in range(5):
            w.grad = rng.normal(size=(4, 3))
            opt.step()
            np.testing.assert_array_equal(
                w.data, w.data.astype(np.float32).astype(np.float64))

    def test_snapshot_restore_round_trip(self):
        rng = np.random.default_rng(2)
        w = ad.param(net._q32(rng.normal(size=3)))
        opt = tr.Adam({"w": w}, lr=1e-2)
        w.grad = rng.normal(size=3)
        opt.step()
        snap = opt.snapshot()
        w.grad = rng.normal(size=3)
        opt.step()
        opt.restore(snap)
        np.testing.assert_array_equal(w.data, snap["w"]["w"])
        assert opt.t == snap["t"]

    def test_bad_lr(self):
        with pytest.raises(ValueError, match="learning rate"):
            tr.Adam({}, lr=0.0)


class TestCheckpoints:
    def test_round_trip_is_bit_exact(self, tmp_path):
        cfg = _tiny_config()
        params = net.init_params(cfg, seed=7)
        params.norm_mean = net._q32(np.array([10.0, 20.0, 0.1]))
        params.norm_std = net._q32(np.array([2.0, 5.0, 0.5]))
        hist = np.random.default_rng(0).uniform(5, 25, size=(1, 2, cfg.history_len, 3))
        lead = np.random.default_rng(1).uniform(5, 15, size=(1, cfg.horizon))
        before = net.model_forward(params, cfg, hist, lead).theta.data
        path = str(tmp_path / "ckpt")
        tr.save_checkpoint(path, params, cfg)
        loaded, cfg2 = tr.load_checkpoint(path)
        assert cfg2 == cfg
        np.testing.assert_array_equal(loaded.norm_mean, params.norm_mean)
        after = net.model_forward(loaded, cfg2, hist, lead).theta.data
        np.testing.assert_array_equal(before, after)

    def test_manifest_is_complete(self, tmp_path):
        cfg = _tiny_config()
        params = net.init_params(cfg, seed=0)
        path = str(tmp_path / "ckpt")
        tr.save_checkpoint(path, params, cfg)
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
        names = [e["name"] for e in manifest["weights"]]
        assert names == list(params.weights)
        total = sum(e["size"] for e in manifest["weights"])
        assert total == manifest["total_values"]
        assert os.path.getsize(os.path.join(path, "weights.bin")) == 4 * total

    def test_truncated_payload_rejected(self, tmp_path):
        cfg = _tiny_config()
        params = net.init_params(cfg, seed=0)
        path = str(tmp_path / "ckpt")
        tr.save_checkpoint(path, params, cfg)
        blob = os.path.join(path, "weights.bin")
        with open(blob, "r+b") as f:
            f.truncate(os.path.getsize(blob) - 8)
        with pytest.raises(tr.CheckpointError, match="holds"):
            tr.load_checkpoint(path)

    def test_unknown_format_rejected(self, tmp_path):
        cfg = _tiny_config()
        params = net.init_params(cfg, seed=0)
        path = str(tmp_path / "ckpt")
        tr.save_checkpoint(path, params, cfg)
        mpath = os.path.join(path, "manifest.json")
        with open(mpath) as f:
            manifest = json.load(f)
        manifest["format"] = 99
        with open(mpath, "w") as f:
            json.dump(manifest, f)
        with pytest.raises(tr.CheckpointError, match="format"):
            tr.load_checkpoint(path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(tr.CheckpointError, match="manifest"):
            tr.load_checkpoint(str(tmp_path / "nope"))


class TestBatching:
    def test_groups_never_mix_vehicle_counts(self):
        def win(n):
            return SimpleNamespace(history=np.zeros((n, 6, 3)),
                                   lead_future=np.zeros(4),
                                   targets=np.zeros((n, 4, 2)))
        wins = [win(2), win(3), win(2), win(3), win(2)]
        batches = tr.make_batches(wins, batch_size=2)
        counts = sorted(b[0].shape[:2] for b in batches)
        assert counts == [(1, 2), (2, 2), (2, 3)]

    def test_shuffle_is_deterministic(self):
        def win(tag):
            h = np.full((2, 6, 3), float(tag))
            return SimpleNamespace(history=h, lead_future=np.zeros(4),
                                   targets=np.zeros((2, 4, 2)))
        wins = [win(i) for i in range(7)]
        a = tr.make_batches(wins, 3, np.random.default_rng(0))
        b = tr.make_batches(wins, 3, np.random.default_rng(0))
        for (ha, _, _), (hb, _, _) in zip(a, b):
            np.testing.assert_array_equal(ha, hb)

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            tr.make_batches([], 0)


class TestTrainLoop:
    def test_runs_and_logs_deterministically(self, tmp_path):
        cfg = _tiny_config()
        wins = _windows(cfg)
        assert len(wins) >= 8
        split = max(2, len(wins) // 5)
        val, train_w = wins[:split], wins[split:]
        results = []
        logs = []
        for _ in range(2):
            params = net.init_params(cfg, seed=1)
            params.norm_mean, params.norm_std = net.fit_normalization(train_w)
            stream = io.StringIO()
            res = tr.train(params, cfg, train_w, val,
                           tr.TrainConfig(epochs=3, batch_size=8, lr=1e-3, seed=9),
                           checkpoint_dir=str(tmp_path / "ckpt"), log_stream=stream)
            results.append(res)
            logs.append(stream.getvalue())
        assert logs[0] == logs[1]
        assert results[0].status == "completed"
        assert len(results[0].history) == 3
        lines = [json.loads(ln) for ln in logs[0].splitlines()]
        assert [ln["epoch"] for ln in lines] == [0, 1, 2]
        assert all(math.isfinite(ln["val_loss"]) for ln in lines)
        # best checkpoint reloads and matches the recorded best epoch
        loaded, cfg2 = tr.load_checkpoint(str(tmp_path / "ckpt"))
        assert cfg2 == cfg
        assert results[0].best_epoch >= 0
        assert results[0].best_val <= lines[0]["val_loss"]

    def test_loss_decreases_on_small_problem(self):
        cfg = _tiny_config()
        wins = _windows(cfg)[:2]
        params = net.init_params(cfg, seed=2)
        params.norm_mean, params.norm_std = net.fit_normalization(wins)
        res = tr.train(params, cfg, wins, wins,
                       tr.TrainConfig(epochs=40, batch_size=2, lr=5e-3, seed=0))
        assert res.status == "completed"
        assert res.best_val < 0.9 * res.history[0]["val_loss"]

    def test_non_finite_loss_aborts_and_restores(self):
        cfg = _tiny_config()
        wins = _windows(cfg)[:4]
        params = net.init_params(cfg, seed=3)
        params.norm_mean, params.norm_std = net.fit_normalization(wins)
        before = {k: t.data.copy() for k, t in params.weights.items()}
        res = tr.train(params, cfg, wins, wins,
                       tr.TrainConfig(epochs=5, batch_size=1, lr=1e30, seed=0))
        assert res.status == "aborted_non_finite"
        assert len(res.history) < 5
        for k, t in params.weights.items():
            np.testing.assert_array_equal(t.data, before[k])

    def test_empty_window_lists_rejected(self):
        cfg = _tiny_config()
        params = net.init_params(cfg, seed=0)
        with pytest.raises(ValueError, match="training"):
            tr.train(params, cfg, [], [SimpleNamespace()], tr.TrainConfig())
