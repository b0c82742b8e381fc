"""Hybrid return-prediction network with in-repo backpropagation.

Architecture: the daily text-state vector and the asset's factor vector
are concatenated, downsampled through an affine layer + ReLU, joined with
a ReLU'd learned per-asset embedding, passed through an input projection
and a stack of residual hidden blocks (affine -> batch norm -> ReLU ->
dropout -> add), and read out by a final affine layer to one scalar: the
predicted next-day excess return.

Everything is plain numpy with analytic gradients; training is Adam on
the mean-squared error. Gradients are exact for the forward graph and are
verified against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

__all__ = [
    "NetworkConfig",
    "Dataset",
    "Network",
    "Adam",
    "TrainingDiverged",
    "train",
    "pretrain",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

COLD_ASSET = -1  # sentinel permno index for out-of-universe assets


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries a diagnostic summary."""


@dataclass(frozen=True)
class NetworkConfig:
    d_model: int
    d_emb: int
    n_factors: int
    n_assets: int
    n_hidden_layers: int = 1
    dropout_rate: float = 0.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    use_factors: bool = True
    use_asset_emb: bool = True
    batchnorm: bool = True
    bn_eps: float = 1e-8
    bn_momentum: float = 0.1

    def __post_init__(self) -> None:
        if min(self.d_model, self.d_emb, self.n_assets) < 1:
            raise ValueError("d_model, d_emb and n_assets must be positive")
        if self.n_factors < 0 or self.n_hidden_layers < 0:
            raise ValueError("n_factors and n_hidden_layers must be >= 0")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.use_factors and self.n_factors == 0:
            raise ValueError("use_factors requires n_factors >= 1")

    @property
    def d_in(self) -> int:
        return self.d_emb + (self.n_factors if self.use_factors else 0)

    @property
    def d_joined(self) -> int:
        return self.d_model * (2 if self.use_asset_emb else 1)


@dataclass
class Dataset:
    """Aligned training arrays: one row per (day, asset) sample."""

    S: np.ndarray  # (n, d_emb) daily text-state vectors
    V: np.ndarray | None  # (n, n_factors) or None when factors unused
    A: np.ndarray  # (n,) asset row indices
    y: np.ndarray  # (n,) next-day excess returns

    def __post_init__(self) -> None:
        n = len(self.y)
        if self.S.shape[0] != n or self.A.shape[0] != n:
            raise ValueError("dataset arrays must share their first dimension")
        if self.V is not None and self.V.shape[0] != n:
            raise ValueError("dataset arrays must share their first dimension")

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            self.S[idx],
            None if self.V is None else self.V[idx],
            self.A[idx],
            self.y[idx],
        )


def _he_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_in = shape[1]
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Network:
    """Parameter container plus forward/backward passes."""

    def __init__(self, cfg: NetworkConfig) -> None:
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        p: dict[str, np.ndarray] = {}
        p["W_S"] = _he_uniform(rng, (cfg.d_model, cfg.d_in))
        p["b_S"] = np.zeros(cfg.d_model)
        # one extra row serves unknown permnos at inference time
        p["E"] = rng.normal(0.0, 0.01, size=(cfg.n_assets + 1, cfg.d_model))
        p["W_inp"] = _he_uniform(rng, (cfg.d_model, cfg.d_joined))
        p["b_inp"] = np.zeros(cfg.d_model)
        for k in range(cfg.n_hidden_layers):
            p[f"W_h{k}"] = _he_uniform(rng, (cfg.d_model, cfg.d_model))
            p[f"b_h{k}"] = np.zeros(cfg.d_model)
            p[f"gamma{k}"] = np.ones(cfg.d_model)
            p[f"beta{k}"] = np.zeros(cfg.d_model)
        p["W_out"] = _he_uniform(rng, (1, cfg.d_model))
        p["b_out"] = np.zeros(1)
        self.params = p
        self.buffers: dict[str, np.ndarray] = {}
        for k in range(cfg.n_hidden_layers):
            self.buffers[f"run_mean{k}"] = np.zeros(cfg.d_model)
            self.buffers[f"run_var{k}"] = np.ones(cfg.d_model)

    # -- state management -------------------------------------------------

    def snapshot(self) -> dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.params.items()}
        state.update({k: v.copy() for k, v in self.buffers.items()})
        return state

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k] = state[k].copy()
        for k in self.buffers:
            self.buffers[k] = state[k].copy()

    def _asset_rows(self, A: np.ndarray) -> np.ndarray:
        rows = np.asarray(A, dtype=np.int64).copy()
        bad = (rows < 0) | (rows > self.cfg.n_assets)
        if np.any(rows == COLD_ASSET) or np.any(bad & (rows != COLD_ASSET)):
            unknown = bad & (rows != COLD_ASSET)
            if unknown.any():
                raise ValueError(f"asset index out of range: {rows[unknown][:5]}")
        rows[rows == COLD_ASSET] = self.cfg.n_assets
        return rows

    # -- forward ----------------------------------------------------------

    def forward_batch(
        self,
        S: np.ndarray,
        V: np.ndarray | None,
        A: np.ndarray,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        update_stats: bool = False,
    ) -> tuple[np.ndarray, dict]:
        """Predict for a batch; returns (predictions, cache for backward)."""
        cfg = self.cfg
        p = self.params
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        train_mode = mode == "train"
        S = np.asarray(S, dtype=np.float64)
        if S.ndim != 2 or S.shape[1] != cfg.d_emb:
            raise ValueError(f"S must be (B, {cfg.d_emb}), got {S.shape}")
        if not np.all(np.isfinite(S)):
            raise ValueError("non-finite values in text-state input")
        if cfg.use_factors:
            if V is None:
                raise ValueError("configuration uses factors but V is None")
            V = np.asarray(V, dtype=np.float64)
            if not np.all(np.isfinite(V)):
                raise ValueError("non-finite values in factor input")
            X_in = np.concatenate([S, V], axis=1)
        else:
            X_in = S
        rows = self._asset_rows(A)

        cache: dict = {"X_in": X_in, "rows": rows, "mode": mode}
        Z_s = X_in @ p["W_S"].T + p["b_S"]
        H1 = np.maximum(Z_s, 0.0)
        cache["Z_s"] = Z_s
        if cfg.use_asset_emb:
            Erows = p["E"][rows]
            EA = np.maximum(Erows, 0.0)
            P = np.concatenate([H1, EA], axis=1)
            cache["Erows"] = Erows
        else:
            P = H1
        cache["P"] = P
        Z_i = P @ p["W_inp"].T + p["b_inp"]
        X = np.maximum(Z_i, 0.0)
        cache["Z_i"] = Z_i

        layers = []
        B = X.shape[0]
        for k in range(cfg.n_hidden_layers):
            X_prev = X
            Z = X_prev @ p[f"W_h{k}"].T + p[f"b_h{k}"]
            lc: dict = {"X_prev": X_prev, "Z": Z}
            if cfg.batchnorm:
                if train_mode:
                    mu = Z.mean(axis=0)
                    var = Z.var(axis=0)
                    if update_stats:
                        m = cfg.bn_momentum
                        self.buffers[f"run_mean{k}"] = (1 - m) * self.buffers[f"run_mean{k}"] + m * mu
                        self.buffers[f"run_var{k}"] = (1 - m) * self.buffers[f"run_var{k}"] + m * var
                else:
                    mu = self.buffers[f"run_mean{k}"]
                    var = self.buffers[f"run_var{k}"]
                std = np.sqrt(var + cfg.bn_eps)
                xhat = (Z - mu) / std
                U = p[f"gamma{k}"] * xhat + p[f"beta{k}"]
                lc.update(std=std, xhat=xhat)
            else:
                U = Z
            R = np.maximum(U, 0.0)
            lc["U"] = U
            if train_mode and cfg.dropout_rate > 0.0:
                if rng is None:
                    raise ValueError("dropout in train mode requires an rng")
                keep = 1.0 - cfg.dropout_rate
                mask = (rng.random(R.shape) < keep) / keep
                D = R * mask
                lc["mask"] = mask
            else:
                D = R
            X = X_prev + D
            layers.append(lc)
        cache["layers"] = layers
        cache["X_last"] = X
        pred = (X @ p["W_out"].T + p["b_out"]).ravel()
        return pred, cache

    def forward(
        self,
        s: np.ndarray,
        v: np.ndarray | None,
        asset_row: int,
        mode: str = "eval",
    ) -> float:
        """Single-sample prediction (batch of one)."""
        S = np.asarray(s, dtype=np.float64)[None, :]
        V = None if v is None else np.asarray(v, dtype=np.float64)[None, :]
        pred, _ = self.forward_batch(S, V, np.array([asset_row]), mode=mode)
        return float(pred[0])

    # -- loss and gradients -----------------------------------------------

    def loss_and_grads(
        self,
        batch: Dataset,
        mode: str = "train",
        rng: np.random.Generator | None = None,
        update_stats: bool = False,
    ) -> tuple[float, dict[str, np.ndarray]]:
        """Batch MSE and exact gradients for every trainable tensor."""
        if len(batch) == 0:
            raise ValueError("batch must be non-empty")
        cfg = self.cfg
        p = self.params
        pred, cache = self.forward_batch(
            batch.S, batch.V, batch.A, mode=mode, rng=rng, update_stats=update_stats
        )
        err = pred - batch.y
        mse = float(np.mean(err**2))
        if not np.isfinite(mse):
            raise TrainingDiverged(
                f"non-finite loss (pred range [{np.nanmin(pred)}, {np.nanmax(pred)}])"
            )
        B = len(batch)
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        dpred = (2.0 / B) * err  # (B,)

        X_last = cache["X_last"]
        grads["W_out"] = dpred[None, :] @ X_last
        grads["b_out"] = np.array([dpred.sum()])
        dX = dpred[:, None] * p["W_out"]  # (B, d_model)

        train_mode = cache["mode"] == "train"
        for k in range(cfg.n_hidden_layers - 1, -1, -1):
            lc = cache["layers"][k]
            dD = dX
            dR = dD * lc["mask"] if "mask" in lc else dD
            dU = dR * (lc["U"] > 0)
            if cfg.batchnorm:
                xhat, std = lc["xhat"], lc["std"]
                grads[f"gamma{k}"] = (dU * xhat).sum(axis=0)
                grads[f"beta{k}"] = dU.sum(axis=0)
                dxhat = dU * p[f"gamma{k}"]
                if train_mode:
                    dZ = (
                        dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)
                    ) / std
                else:
                    dZ = dxhat / std
            else:
                dZ = dU
            grads[f"W_h{k}"] = dZ.T @ lc["X_prev"]
            grads[f"b_h{k}"] = dZ.sum(axis=0)
            dX = dX + dZ @ p[f"W_h{k}"]  # identity path + branch

        dZ_i = dX * (cache["Z_i"] > 0)
        grads["W_inp"] = dZ_i.T @ cache["P"]
        grads["b_inp"] = dZ_i.sum(axis=0)
        dP = dZ_i @ p["W_inp"]
        d_model = cfg.d_model
        dH1 = dP[:, :d_model]
        if cfg.use_asset_emb:
            dEA = dP[:, d_model:]
            dErows = dEA * (cache["Erows"] > 0)
            np.add.at(grads["E"], cache["rows"], dErows)
        dZ_s = dH1 * (cache["Z_s"] > 0)
        grads["W_S"] = dZ_s.T @ cache["X_in"]
        grads["b_S"] = dZ_s.sum(axis=0)
        return mse, grads

    def predict(self, S: np.ndarray, V: np.ndarray | None, A: np.ndarray) -> np.ndarray:
        pred, _ = self.forward_batch(S, V, A, mode="eval")
        return pred

    def eval_mse(self, data: Dataset, chunk: int = 4096) -> float:
        """Deterministic eval-mode MSE over a dataset."""
        if len(data) == 0:
            raise ValueError("dataset must be non-empty")
        se = 0.0
        for lo in range(0, len(data), chunk):
            idx = np.arange(lo, min(lo + chunk, len(data)))
            part = data.take(idx)
            pred = self.predict(part.S, part.V, part.A)
            se += float(np.sum((pred - part.y) ** 2))
        return se / len(data)


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1**self.t
        correct2 = 1.0 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g**2
            mhat = self.m[k] / correct1
            vhat = self.v[k] / correct2
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(
    net: Network,
    train_data: Dataset,
    val_data: Dataset | None,
    epochs: int | None = None,
    seed: int | None = None,
) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Seeded mini-batch Adam; returns (best state, per-epoch history).

    Model selection keeps the epoch with the lowest validation MSE (the
    final epoch when no validation set is given). Divergence stops
    training early and keeps the last good state. The network is left
    holding the selected parameters.
    """
    cfg = net.cfg
    epochs = cfg.epochs if epochs is None else epochs
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    opt = Adam(net.params, lr=cfg.learning_rate)
    history: list[dict] = []
    best_state = net.snapshot()
    best_val = np.inf
    n = len(train_data)
    if n == 0:
        raise ValueError("empty training set")
    for epoch in range(epochs):
        order = rng.permutation(n)
        sq_err_total = 0.0
        try:
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                batch = train_data.take(idx)
                mse, grads = net.loss_and_grads(
                    batch, mode="train", rng=rng, update_stats=True
                )
                sq_err_total += mse * len(batch)
                opt.step(net.params, grads)
        except TrainingDiverged as err:
            log.error("training diverged at epoch %d: %s; keeping last good state", epoch, err)
            break
        row = {"epoch": epoch, "train_mse": sq_err_total / n}
        if val_data is not None:
            val_mse = net.eval_mse(val_data)
            row["val_mse"] = val_mse
            if val_mse < best_val:
                best_val = val_mse
                best_state = net.snapshot()
        history.append(row)
    if val_data is None or not history:
        best_state = net.snapshot()
    net.restore(best_state)
    return best_state, history


def pretrain(
    net: Network,
    factor_data: Dataset,
    placeholder: np.ndarray,
    epochs: int | None = None,
    seed: int | None = None,
) -> list[dict]:
    """Warm-start on factor history with the text state pinned to a placeholder.

    All parameters (including asset embeddings) update; optimizer state is
    not reused afterwards. An empty range is a warned no-op, as is a
    configuration without factors (there would be nothing to learn from).
    """
    cfg = net.cfg
    if len(factor_data) == 0:
        log.warning("empty pretraining range: skipping pretrain")
        return []
    if not cfg.use_factors:
        log.warning("pretraining without factor inputs would be all-placeholder: skipping")
        return []
    placeholder = np.asarray(placeholder, dtype=np.float64)
    if placeholder.shape != (cfg.d_emb,):
        raise ValueError(f"placeholder must have shape ({cfg.d_emb},)")
    S = np.tile(placeholder, (len(factor_data), 1))
    data = Dataset(S, factor_data.V, factor_data.A, factor_data.y)
    seed = cfg.seed if seed is None else seed
    rng_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(2,)).generate_state(1)[0])
    epochs = cfg.epochs if epochs is None else epochs
    if epochs == 0:
        return []
    _, history = train(net, data, None, epochs=epochs, seed=rng_seed)
    return history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    net: Network,
    directory: str | Path,
    epoch: int = 0,
    metrics: dict | None = None,
) -> None:
    """Write manifest.json + params.bin (ordered float32 little-endian tensors)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    blobs = []
    offset = 0
    for name, arr in list(net.params.items()) + list(net.buffers.items()):
        data = arr.astype("<f4").tobytes(order="C")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "config": asdict(net.cfg),
        "seed": net.cfg.seed,
        "epoch": epoch,
        "metrics": metrics or {},
        "dtype": "float32",
        "byte_order": "little",
        "tensors": tensors,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (directory / "params.bin").write_bytes(b"".join(blobs))


def load_checkpoint(directory: str | Path) -> Network:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = NetworkConfig(**manifest["config"])
    net = Network(cfg)
    raw = (directory / "params.bin").read_bytes()
    for spec in manifest["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            raw, dtype="<f4", count=count, offset=spec["offset"]
        ).reshape(shape).astype(np.float64)
        if spec["name"] in net.params:
            net.params[spec["name"]] = arr
        else:
            net.buffers[spec["name"]] = arr
    return net
