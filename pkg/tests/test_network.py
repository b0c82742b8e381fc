"""Prediction network: forward oracles, gradient checks, training behavior."""

import numpy as np
import pytest

from aapm.network import (
    COLD_ASSET,
    Adam,
    Dataset,
    Network,
    NetworkConfig,
    TrainingDiverged,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    train,
)


def small_config(**kw):
    base = dict(
        d_model=4,
        d_emb=3,
        n_factors=2,
        n_assets=3,
        n_hidden_layers=1,
        dropout_rate=0.0,
        learning_rate=1e-3,
        batch_size=8,
        epochs=3,
        seed=0,
    )
    base.update(kw)
    return NetworkConfig(**base)


def random_batch(cfg, n, seed=0, cold=False):
    rng = np.random.default_rng(seed)
    S = rng.normal(size=(n, cfg.d_emb))
    V = rng.normal(size=(n, cfg.n_factors)) if cfg.use_factors else None
    A = rng.integers(0, cfg.n_assets, size=n)
    if cold:
        A[0] = COLD_ASSET
    y = rng.normal(scale=0.5, size=n)
    return Dataset(S, V, A, y)


def batch_loss(net, batch):
    pred, _ = net.forward_batch(batch.S, batch.V, batch.A, mode="train")
    return float(np.mean((pred - batch.y) ** 2))


def kink_distance(net, batch):
    """Smallest |pre-activation| in the forward pass.

    Central differences are only valid away from ReLU kinks; a sample whose
    pre-activation sits within the FD step of zero changes branch under
    perturbation and must be resampled.
    """
    _, cache = net.forward_batch(batch.S, batch.V, batch.A, mode="train")
    dist = min(np.min(np.abs(cache["Z_s"])), np.min(np.abs(cache["Z_i"])))
    if "Erows" in cache:
        dist = min(dist, np.min(np.abs(cache["Erows"])))
    for lc in cache["layers"]:
        dist = min(dist, np.min(np.abs(lc["U"])))
    return dist


def safe_random_batch(cfg, n, seed, min_kink=1e-3):
    """Batch (and net) whose forward pass stays clear of ReLU kinks."""
    while True:
        net = Network(cfg)
        batch = random_batch(cfg, n, seed=seed)
        if kink_distance(net, batch) > min_kink:
            return net, batch
        seed += 1000


def finite_difference_check(net, batch, step=1e-5, floor=1e-3):
    """Max relative error between analytic and central-difference gradients."""
    _, grads = net.loss_and_grads(batch, mode="train")
    worst = 0.0
    for name, arr in net.params.items():
        flat = arr.ravel()
        g = grads[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = batch_loss(net, batch)
            flat[i] = orig - step
            down = batch_loss(net, batch)
            flat[i] = orig
            fd = (up - down) / (2 * step)
            rel = abs(g[i] - fd) / max(abs(g[i]), abs(fd), floor)
            worst = max(worst, rel)
    return worst


class TestForward:
    def test_all_zero_params_predict_zero(self):
        cfg = small_config()
        net = Network(cfg)
        for k in net.params:
            net.params[k] = np.zeros_like(net.params[k])
        batch = random_batch(cfg, 5)
        assert np.array_equal(net.predict(batch.S, batch.V, batch.A), np.zeros(5))

    def test_hand_computed_linear_functional(self):
        # no hidden layers, identity downsampling, zero asset embedding:
        # output = W_out @ relu(s), hand-computable
        cfg = small_config(
            d_model=2, d_emb=2, n_factors=0, use_factors=False, n_hidden_layers=0, n_assets=2
        )
        net = Network(cfg)
        net.params["W_S"] = np.eye(2)
        net.params["b_S"] = np.zeros(2)
        net.params["E"] = np.zeros((3, 2))
        net.params["W_inp"] = np.hstack([np.eye(2), np.zeros((2, 2))])
        net.params["b_inp"] = np.zeros(2)
        net.params["W_out"] = np.array([[1.0, 2.0]])
        net.params["b_out"] = np.zeros(1)
        assert net.forward(np.array([0.5, -0.3]), None, 0) == pytest.approx(0.5)
        assert net.forward(np.array([1.0, 2.0]), None, 1) == pytest.approx(5.0)

    def test_eval_mode_deterministic(self):
        cfg = small_config(dropout_rate=0.2, n_hidden_layers=2)
        net = Network(cfg)
        batch = random_batch(cfg, 6)
        p1 = net.predict(batch.S, batch.V, batch.A)
        p2 = net.predict(batch.S, batch.V, batch.A)
        assert np.array_equal(p1, p2)

    def test_batched_equals_looped(self):
        cfg = small_config(n_hidden_layers=2)
        net = Network(cfg)
        batch = random_batch(cfg, 9)
        batched = net.predict(batch.S, batch.V, batch.A)
        looped = np.array(
            [net.forward(batch.S[i], batch.V[i], int(batch.A[i])) for i in range(9)]
        )
        assert np.allclose(batched, looped, atol=1e-12, rtol=1e-12)

    def test_cold_asset_row_used_for_unknown(self):
        cfg = small_config()
        net = Network(cfg)
        batch = random_batch(cfg, 3, cold=True)
        out = net.predict(batch.S, batch.V, batch.A)
        assert np.all(np.isfinite(out))

    def test_out_of_range_asset_rejected(self):
        cfg = small_config()
        net = Network(cfg)
        batch = random_batch(cfg, 3)
        bad = batch.A.copy()
        bad[0] = cfg.n_assets + 7
        with pytest.raises(ValueError):
            net.predict(batch.S, batch.V, bad)

    def test_non_finite_input_rejected(self):
        cfg = small_config()
        net = Network(cfg)
        batch = random_batch(cfg, 3)
        S = batch.S.copy()
        S[0, 0] = np.nan
        with pytest.raises(ValueError):
            net.predict(S, batch.V, batch.A)


class TestLossAndGrads:
    def test_perfect_fit_zero_loss_stationary_output_layer(self):
        cfg = small_config(n_hidden_layers=0)
        net = Network(cfg)
        batch = random_batch(cfg, 6)
        pred = net.predict(batch.S, batch.V, batch.A)
        fitted = Dataset(batch.S, batch.V, batch.A, pred)
        mse, grads = net.loss_and_grads(fitted, mode="train")
        assert mse == pytest.approx(0.0, abs=1e-24)
        for g in grads.values():
            assert np.allclose(g, 0.0, atol=1e-12)

    def test_single_sample_linear_toy_gradient(self):
        # positive scalar path: pred = w_out * s + b_out, so
        # dW_out = 2(pred-y)*s and db_out = 2(pred-y)
        cfg = small_config(
            d_model=1, d_emb=1, n_factors=0, use_factors=False,
            use_asset_emb=False, n_hidden_layers=0, n_assets=1,
        )
        net = Network(cfg)
        net.params["W_S"] = np.array([[1.0]])
        net.params["W_inp"] = np.array([[1.0]])
        net.params["W_out"] = np.array([[0.8]])
        net.params["b_out"] = np.array([0.1])
        s, y = 0.7, 0.3
        batch = Dataset(np.array([[s]]), None, np.array([0]), np.array([y]))
        pred = net.forward(np.array([s]), None, 0)
        mse, grads = net.loss_and_grads(batch, mode="train")
        assert mse == pytest.approx((pred - y) ** 2)
        assert grads["W_out"][0, 0] == pytest.approx(2 * (pred - y) * s)
        assert grads["b_out"][0] == pytest.approx(2 * (pred - y))

    def test_gradients_match_finite_differences(self):
        cfg = small_config(n_hidden_layers=2, batchnorm=True, d_model=5)
        net, batch = safe_random_batch(cfg, 7, seed=3)
        assert finite_difference_check(net, batch) < 1e-4

    def test_gradients_without_batchnorm_or_asset_emb(self):
        cfg = small_config(n_hidden_layers=1, batchnorm=False, use_asset_emb=False)
        net, batch = safe_random_batch(cfg, 5, seed=4)
        assert finite_difference_check(net, batch) < 1e-4

    def test_permutation_invariance(self):
        cfg = small_config(n_hidden_layers=2)
        net = Network(cfg)
        batch = random_batch(cfg, 10, seed=5)
        rng = np.random.default_rng(0)
        perm = rng.permutation(10)
        shuffled = batch.take(perm)
        mse1, g1 = net.loss_and_grads(batch, mode="train")
        mse2, g2 = net.loss_and_grads(shuffled, mode="train")
        assert mse1 == pytest.approx(mse2, abs=1e-15)
        for k in g1:
            assert np.allclose(g1[k], g2[k], atol=1e-12)

    def test_asset_embedding_rows_isolated(self):
        cfg = small_config(n_assets=5)
        net = Network(cfg)
        batch = random_batch(cfg, 6, seed=6)
        batch.A[:] = 2  # only asset 2 in the batch
        before = net.params["E"].copy()
        _, grads = net.loss_and_grads(batch, mode="train")
        other_rows = [r for r in range(cfg.n_assets + 1) if r != 2]
        assert np.allclose(grads["E"][other_rows], 0.0)
        opt = Adam(net.params, lr=1e-2)
        opt.step(net.params, grads)
        assert np.array_equal(net.params["E"][other_rows], before[other_rows])

    def test_non_finite_loss_raises(self):
        cfg = small_config(n_hidden_layers=0)
        net = Network(cfg)
        net.params["W_out"] *= np.inf
        batch = random_batch(cfg, 4)
        with pytest.raises(TrainingDiverged):
            net.loss_and_grads(batch, mode="train")


class TestBatchNorm:
    def test_normalized_activations(self):
        cfg = small_config(n_hidden_layers=1, d_model=6)
        net = Network(cfg)
        batch = random_batch(cfg, 64, seed=7)
        _, cache = net.forward_batch(batch.S, batch.V, batch.A, mode="train")
        xhat = cache["layers"][0]["xhat"]
        assert np.allclose(xhat.mean(axis=0), 0.0, atol=1e-6)
        assert np.allclose(xhat.var(axis=0), 1.0, atol=1e-6)

    def test_residual_identity_with_zero_hidden_weights(self):
        cfg_deep = small_config(n_hidden_layers=3, batchnorm=False)
        cfg_flat = small_config(n_hidden_layers=0, batchnorm=False)
        deep, flat = Network(cfg_deep), Network(cfg_flat)
        for k in range(3):
            deep.params[f"W_h{k}"] = np.zeros_like(deep.params[f"W_h{k}"])
            deep.params[f"b_h{k}"] = np.zeros_like(deep.params[f"b_h{k}"])
        for name in ("W_S", "b_S", "E", "W_inp", "b_inp", "W_out", "b_out"):
            flat.params[name] = deep.params[name].copy()
        batch = random_batch(cfg_deep, 7, seed=8)
        assert np.allclose(
            deep.predict(batch.S, batch.V, batch.A),
            flat.predict(batch.S, batch.V, batch.A),
            atol=1e-12,
        )

    def test_running_stats_update_only_when_asked(self):
        cfg = small_config(n_hidden_layers=1)
        net = Network(cfg)
        batch = random_batch(cfg, 16)
        before = net.buffers["run_mean0"].copy()
        net.forward_batch(batch.S, batch.V, batch.A, mode="train", update_stats=False)
        assert np.array_equal(net.buffers["run_mean0"], before)
        net.forward_batch(batch.S, batch.V, batch.A, mode="train", update_stats=True)
        assert not np.array_equal(net.buffers["run_mean0"], before)


def linear_factor_data(n, n_factors, seed, noise=0.01):
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(n, n_factors))
    coef = rng.normal(size=n_factors)
    y = V @ coef + noise * rng.normal(size=n)
    return V, y, coef


class TestPretrain:
    def make(self, **kw):
        base = dict(
            d_model=8,
            d_emb=4,
            n_factors=3,
            n_assets=1,
            n_hidden_layers=1,
            learning_rate=2e-2,
            batch_size=32,
            epochs=250,
        )
        base.update(kw)
        cfg = small_config(**base)
        return cfg, Network(cfg)

    def test_learns_linear_map_vs_ols_oracle(self):
        cfg, net = self.make(
            n_hidden_layers=0, batchnorm=False, learning_rate=5e-3, epochs=400, batch_size=64
        )
        V, y, _ = linear_factor_data(400, 3, seed=9)
        data = Dataset(np.zeros((400, cfg.d_emb)), V, np.zeros(400, dtype=int), y)
        pretrain(net, data, placeholder=np.zeros(cfg.d_emb))
        net_mse = net.eval_mse(data)
        X = np.column_stack([np.ones(400), V])
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        ols_mse = float(np.mean((y - X @ beta) ** 2))
        assert net_mse < float(np.var(y))
        assert net_mse < 1.5 * ols_mse  # reaches the best linear fit

    def test_zero_epochs_is_noop(self):
        cfg, net = self.make()
        V, y, _ = linear_factor_data(50, 3, seed=10)
        data = Dataset(np.zeros((50, cfg.d_emb)), V, np.zeros(50, dtype=int), y)
        before = net.snapshot()
        pretrain(net, data, placeholder=np.zeros(cfg.d_emb), epochs=0)
        after = net.snapshot()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_zero_placeholder_kills_text_column_gradients(self):
        cfg, net = self.make()
        V, y, _ = linear_factor_data(64, 3, seed=11)
        S = np.zeros((64, cfg.d_emb))
        batch = Dataset(S, V, np.zeros(64, dtype=int), y)
        _, grads = net.loss_and_grads(batch, mode="train")
        assert np.array_equal(grads["W_S"][:, : cfg.d_emb], np.zeros((cfg.d_model, cfg.d_emb)))
        assert not np.allclose(grads["W_S"][:, cfg.d_emb :], 0.0)

    def test_empty_range_noop_with_warning(self, caplog):
        cfg, net = self.make()
        empty = Dataset(np.zeros((0, cfg.d_emb)), np.zeros((0, 3)), np.zeros(0, dtype=int), np.zeros(0))
        before = net.snapshot()
        history = pretrain(net, empty, placeholder=np.zeros(cfg.d_emb))
        assert history == []
        after = net.snapshot()
        assert all(np.array_equal(before[k], after[k]) for k in before)


class TestTrain:
    def setup_data(self, cfg, n=300, seed=12):
        rng = np.random.default_rng(seed)
        S = rng.normal(size=(n, cfg.d_emb))
        V = rng.normal(size=(n, cfg.n_factors))
        A = rng.integers(0, cfg.n_assets, size=n)
        y = 0.5 * S[:, 0] + 0.3 * V[:, 0] + 0.01 * rng.normal(size=n)
        data = Dataset(S, V, A, y)
        cut = int(0.8 * n)
        idx = np.arange(n)
        return data.take(idx[:cut]), data.take(idx[cut:])

    def test_seeded_determinism_bitwise(self):
        cfg = small_config(epochs=4, batch_size=32)
        tr, va = self.setup_data(cfg)
        net1, net2 = Network(cfg), Network(cfg)
        _, h1 = train(net1, tr, va)
        _, h2 = train(net2, tr, va)
        assert h1 == h2
        for k in net1.params:
            assert np.array_equal(net1.params[k], net2.params[k])

    def test_zero_learning_rate_flat_history(self):
        cfg = small_config(epochs=4, learning_rate=0.0, batchnorm=False)
        tr, va = self.setup_data(cfg)
        net = Network(cfg)
        before = net.snapshot()
        _, history = train(net, tr, va)
        train_curve = np.array([row["train_mse"] for row in history])
        val_curve = np.array([row["val_mse"] for row in history])
        # flat up to float association noise from per-epoch batch regrouping
        assert np.allclose(train_curve, train_curve[0], rtol=1e-12)
        assert np.array_equal(val_curve, np.full_like(val_curve, val_curve[0]))
        after = net.snapshot()
        assert all(np.array_equal(before[k], after[k]) for k in net.params)

    def test_best_validation_epoch_selected(self):
        cfg = small_config(epochs=6, batch_size=32)
        tr, va = self.setup_data(cfg)
        net = Network(cfg)
        _, history = train(net, tr, va)
        best = min(row["val_mse"] for row in history)
        assert net.eval_mse(va) == pytest.approx(best, rel=1e-12)

    def test_training_reduces_loss(self):
        cfg = small_config(epochs=20, batch_size=32, learning_rate=5e-3)
        tr, va = self.setup_data(cfg)
        net = Network(cfg)
        start = net.eval_mse(va)
        train(net, tr, va)
        assert net.eval_mse(va) < start


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = small_config(n_hidden_layers=2)
        net = Network(cfg)
        batch = random_batch(cfg, 5)
        save_checkpoint(net, tmp_path / "ck", epoch=3, metrics={"val": 0.5})
        loaded = load_checkpoint(tmp_path / "ck")
        assert loaded.cfg == cfg
        p1 = net.predict(batch.S, batch.V, batch.A)
        p2 = loaded.predict(batch.S, batch.V, batch.A)
        assert np.allclose(p1, p2, atol=1e-5)  # float32 storage

    def test_saved_twice_identical_bytes(self, tmp_path):
        cfg = small_config()
        net = Network(cfg)
        save_checkpoint(net, tmp_path / "a")
        save_checkpoint(net, tmp_path / "b")
        assert (tmp_path / "a" / "params.bin").read_bytes() == (tmp_path / "b" / "params.bin").read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()
