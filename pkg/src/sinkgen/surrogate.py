"""Residual-MLP regressors for pressure drop and surface temperature.

Inputs are 48-d design vectors passed through a per-feature monotone
piecewise-linear quantile map onto [0, 1]; targets are z-scored during
training and destandardized at predict time. Two fixed architectures are
provided: a 256-wide net for temperature and a 512-wide net with dropout
for pressure, each a stem Linear+ReLU, four residual blocks of
Linear+ReLU(+Dropout)+BatchNorm joined by identity skips, and a scalar
head. Gradients of the scalar outputs with respect to raw design vectors
chain through the quantile map's diagonal Jacobian, which is what the
guided sampler consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .autodiff import (
    AdamW,
    CheckpointError,
    NonFiniteError,
    Tape,
    Tensor,
    read_checkpoint,
    write_checkpoint,
)
from .geometry import DESIGN_DIM

SLOPE_FLOOR = 1e-6
TARGET_STD_FLOOR = 1e-12


class ConstantFeatureError(ValueError):
    """A feature column has fewer than two distinct values."""


class SurrogateDivergenceError(FloatingPointError):
    """Training hit a non-finite loss."""


class QuantileMap:
    """Per-feature empirical-CDF map onto [0, 1].

    Knots are evenly spaced quantiles of the fitted column; application is
    monotone piecewise-linear interpolation, constant beyond the knot range.
    Stored segment slopes (floored at SLOPE_FLOOR) provide an everywhere-
    defined diagonal subgradient; outside the range the floor value is used.
    """

    def __init__(self, values: list, grids: list):
        self.values = values
        self.grids = grids
        self.slopes = []
        for v, g in zip(values, grids):
            s = np.diff(g) / np.diff(v)
            self.slopes.append(np.maximum(s, SLOPE_FLOOR))

    @property
    def n_features(self) -> int:
        return len(self.values)

    @classmethod
    def fit(cls, designs: np.ndarray, n_knots: int = 1000) -> "QuantileMap":
        designs = np.atleast_2d(np.asarray(designs, dtype=float))
        if n_knots < 2:
            raise ValueError("n_knots must be at least 2")
        grid = np.linspace(0.0, 1.0, n_knots)
        values, grids = [], []
        for f in range(designs.shape[1]):
            col = designs[:, f]
            knots = np.quantile(col, grid)
            # collapse exact ties, keeping the highest grid position so the
            # map stays strictly increasing in the stored knot values
            uniq, rev_first = np.unique(knots[::-1], return_index=True)
            if uniq.size < 2:
                raise ConstantFeatureError(f"feature {f} is constant")
            values.append(uniq)
            grids.append(grid[knots.size - 1 - rev_first])
        return cls(values, grids)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = np.atleast_2d(x)
        out = np.empty_like(flat)
        for f in range(flat.shape[1]):
            out[:, f] = np.interp(flat[:, f], self.values[f], self.grids[f])
        return out.reshape(x.shape)

    def jacobian_diag(self, x: np.ndarray) -> np.ndarray:
        """Active-segment slope per coordinate (floored, batch-friendly)."""
        x = np.asarray(x, dtype=float)
        flat = np.atleast_2d(x)
        out = np.full(flat.shape, SLOPE_FLOOR)
        for f in range(flat.shape[1]):
            v = self.values[f]
            seg = np.searchsorted(v, flat[:, f], side="right") - 1
            inside = (seg >= 0) & (seg < v.size - 1)
            out[inside, f] = self.slopes[f][seg[inside]]
        return out.reshape(x.shape)


@dataclass(frozen=True)
class SurrogateConfig:
    """One regressor's architecture and optimizer settings."""

    in_dim: int = DESIGN_DIM
    hidden: int = 256
    blocks: int = 4
    dropout: float = 0.0
    lr: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 256
    epochs: int = 300
    n_knots: int = 1000
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0


def temperature_config(**overrides) -> SurrogateConfig:
    return SurrogateConfig(hidden=256, dropout=0.0, lr=5e-4, batch_size=256, **overrides)


def pressure_config(**overrides) -> SurrogateConfig:
    return SurrogateConfig(hidden=512, dropout=0.1, lr=1e-4, batch_size=512, **overrides)


@dataclass
class RegressionMetrics:
    r2: float
    rmse: float
    n_test: int
    residual_bin_edges: np.ndarray
    residual_counts: np.ndarray


@dataclass
class SurrogateModel:
    cfg: SurrogateConfig
    params: dict
    buffers: dict
    qmap: QuantileMap
    target_mean: float
    target_std: float
    metrics: RegressionMetrics | None = None


def init_params(cfg: SurrogateConfig, rng: np.random.Generator):
    """He-initialized weights plus BatchNorm parameters and buffers."""
    params = {}
    buffers = {}

    def lin(name, n_in, n_out):
        w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
        params[f"{name}.w"] = Tensor(w, requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True)

    lin("stem", cfg.in_dim, cfg.hidden)
    for i in range(cfg.blocks):
        lin(f"block{i}.lin", cfg.hidden, cfg.hidden)
        params[f"block{i}.bn.g"] = Tensor(np.ones(cfg.hidden), requires_grad=True)
        params[f"block{i}.bn.b"] = Tensor(np.zeros(cfg.hidden), requires_grad=True)
        buffers[f"block{i}.bn.mean"] = np.zeros(cfg.hidden)
        buffers[f"block{i}.bn.var"] = np.ones(cfg.hidden)
    lin("head", cfg.hidden, 1)
    return params, buffers


def forward(tape: Tape, params: dict, buffers: dict, cfg: SurrogateConfig,
            x: np.ndarray, training: bool = False, rng=None):
    """Batch forward pass; x is the quantile-mapped input, shape (B, in_dim)."""
    h = tape.linear(Tensor(x), params["stem.w"], params["stem.b"])
    h = tape.relu(h)
    for i in range(cfg.blocks):
        y = tape.linear(h, params[f"block{i}.lin.w"], params[f"block{i}.lin.b"])
        y = tape.relu(y)
        if cfg.dropout > 0.0:
            y = tape.dropout(y, cfg.dropout, training=training, rng=rng)
        y = tape.batch_norm(
            y,
            params[f"block{i}.bn.g"],
            params[f"block{i}.bn.b"],
            buffers[f"block{i}.bn.mean"],
            buffers[f"block{i}.bn.var"],
            training=training,
        )
        h = tape.add(h, y)
    return tape.linear(h, params["head.w"], params["head.b"])


def _clone_state(params, buffers):
    p = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}
    b = {k: v.copy() for k, v in buffers.items()}
    return p, b


def train_surrogate(designs: np.ndarray, targets: np.ndarray,
                    cfg: SurrogateConfig, stream_index: int,
                    progress=None) -> SurrogateModel:
    """Fit one regressor; returns the best-validation snapshot with test metrics.

    The split, initialization, batching, and dropout all derive from a single
    seed-keyed stream, so identical inputs reproduce identical models.
    """
    designs = np.asarray(designs, dtype=float)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if not np.all(np.isfinite(targets)):
        raise ValueError("targets must be finite")
    n = designs.shape[0]
    rng = rng_mod.stream(cfg.seed, stream_index)

    perm = rng.permutation(n)
    n_test = int(round(cfg.test_fraction * n))
    n_val = int(round(cfg.val_fraction * n))
    test_idx = perm[:n_test]
    val_idx = perm[n_test:n_test + n_val]
    train_idx = perm[n_test + n_val:]

    qmap = QuantileMap.fit(designs[train_idx], cfg.n_knots)
    x_all = qmap.apply(designs)
    t_mean = float(np.mean(targets[train_idx]))
    t_std = float(max(np.std(targets[train_idx]), TARGET_STD_FLOOR))
    z_all = (targets - t_mean) / t_std

    params, buffers = init_params(cfg, rng)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    x_train, z_train = x_all[train_idx], z_all[train_idx]
    x_val, z_val = x_all[val_idx], z_all[val_idx]
    best = (np.inf, *_clone_state(params, buffers))
    steps_per_epoch = max(1, len(train_idx) // cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_idx))
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            tape = Tape(recording=True)
            out = forward(tape, params, buffers, cfg, x_train[idx],
                          training=True, rng=rng)
            loss = tape.mse(out, z_train[idx].reshape(-1, 1))
            if not np.isfinite(float(loss.data)):
                raise SurrogateDivergenceError(
                    f"non-finite loss at epoch {epoch} step {s}")
            tape.backward(loss)
            opt.step()
            opt.zero_grad()
        if len(val_idx):
            tape = Tape(recording=False)
            val_out = forward(tape, params, buffers, cfg, x_val, training=False)
            val_mse = float(np.mean((val_out.data[:, 0] - z_val) ** 2))
            if val_mse < best[0]:
                best = (val_mse, *_clone_state(params, buffers))
            if progress is not None:
                progress(epoch, val_mse)
    if np.isfinite(best[0]):
        _, params, buffers = best

    model = SurrogateModel(cfg=cfg, params=params, buffers=buffers, qmap=qmap,
                           target_mean=t_mean, target_std=t_std)
    if n_test:
        pred = predict(model, designs[test_idx])
        model.metrics = compute_metrics(targets[test_idx], pred)
    return model


def compute_metrics(actual: np.ndarray, predicted: np.ndarray,
                    n_bins: int = 30) -> RegressionMetrics:
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    resid = predicted - actual
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((actual - actual.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0.0 else 0.0
    counts, edges = np.histogram(resid, bins=n_bins)
    return RegressionMetrics(
        r2=r2,
        rmse=float(np.sqrt(np.mean(resid ** 2))),
        n_test=actual.size,
        residual_bin_edges=edges,
        residual_counts=counts,
    )


def predict(model: SurrogateModel, designs: np.ndarray) -> np.ndarray:
    """Eval-mode predictions in original target units.

    Accepts one design (48,) giving a scalar, or a batch (n, 48) giving (n,).
    """
    designs = np.asarray(designs, dtype=float)
    single = designs.ndim == 1
    x = model.qmap.apply(np.atleast_2d(designs))
    tape = Tape(recording=False)
    out = forward(tape, model.params, model.buffers, model.cfg, x, training=False)
    pred = out.data[:, 0] * model.target_std + model.target_mean
    return float(pred[0]) if single else pred


def input_gradient(model: SurrogateModel, designs: np.ndarray) -> np.ndarray:
    """Gradient of the destandardized scalar output w.r.t. raw designs.

    Chains the net's input gradient with the target scale and the quantile
    map's diagonal Jacobian. Batch rows are independent (eval-mode forward),
    so a batch call equals stacked single-design calls.
    """
    designs = np.asarray(designs, dtype=float)
    single = designs.ndim == 1
    raw = np.atleast_2d(designs)
    x = model.qmap.apply(raw)
    xt = Tensor(x, requires_grad=True)
    tape = Tape(recording=True)
    h = tape.linear(xt, model.params["stem.w"], model.params["stem.b"])
    h = tape.relu(h)
    for i in range(model.cfg.blocks):
        y = tape.linear(h, model.params[f"block{i}.lin.w"], model.params[f"block{i}.lin.b"])
        y = tape.relu(y)
        y = tape.batch_norm(
            y,
            model.params[f"block{i}.bn.g"],
            model.params[f"block{i}.bn.b"],
            model.buffers[f"block{i}.bn.mean"],
            model.buffers[f"block{i}.bn.var"],
            training=False,
        )
        h = tape.add(h, y)
    out = tape.linear(h, model.params["head.w"], model.params["head.b"])
    total = tape.total(out)
    tape.backward(total)
    grad = xt.grad * model.target_std * model.qmap.jacobian_diag(raw)
    return grad[0] if single else grad


_META_KEYS = ("in_dim", "hidden", "blocks", "dropout", "lr", "weight_decay",
              "batch_size", "epochs", "n_knots", "val_fraction",
              "test_fraction", "seed")


def save_surrogate(path, model: SurrogateModel) -> None:
    arrays = {}
    for k, v in model.params.items():
        arrays[f"param.{k}"] = v.data
    for k, v in model.buffers.items():
        arrays[f"buf.{k}"] = v
    for f in range(model.qmap.n_features):
        arrays[f"qmap.{f}.values"] = model.qmap.values[f]
        arrays[f"qmap.{f}.grid"] = model.qmap.grids[f]
    arrays["target.stats"] = np.array([model.target_mean, model.target_std])
    arrays["meta"] = np.array([float(getattr(model.cfg, k)) for k in _META_KEYS])
    write_checkpoint(path, "surrogate", arrays)


def load_surrogate(path) -> SurrogateModel:
    kind, arrays = read_checkpoint(path)
    if kind != "surrogate":
        raise CheckpointError(f"expected a surrogate checkpoint, found {kind!r}")
    meta = arrays.pop("meta")
    fields = dict(zip(_META_KEYS, meta))
    for k in ("in_dim", "hidden", "blocks", "batch_size", "epochs", "n_knots", "seed"):
        fields[k] = int(fields[k])
    cfg = SurrogateConfig(**fields)
    t_mean, t_std = arrays.pop("target.stats")
    params, buffers = {}, {}
    values, grids = {}, {}
    for k, v in arrays.items():
        if k.startswith("param."):
            params[k[len("param."):]] = Tensor(v, requires_grad=True)
        elif k.startswith("buf."):
            buffers[k[len("buf."):]] = v
        elif k.startswith("qmap."):
            _, idx, which = k.split(".")
            (values if which == "values" else grids)[int(idx)] = v
        else:
            raise CheckpointError(f"unexpected array {k!r}")
    n_feat = len(values)
    qmap = QuantileMap([values[i] for i in range(n_feat)],
                       [grids[i] for i in range(n_feat)])
    return SurrogateModel(cfg=cfg, params=params, buffers=buffers, qmap=qmap,
                          target_mean=float(t_mean), target_std=float(t_std))


def write_metrics_json(path, metrics: RegressionMetrics) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"r2": metrics.r2, "rmse": metrics.rmse,
                   "n_test": metrics.n_test}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_residual_histogram_csv(path, metrics: RegressionMetrics) -> None:
    rows = np.column_stack([
        metrics.residual_bin_edges[:-1],
        metrics.residual_bin_edges[1:],
        metrics.residual_counts,
    ])
    np.savetxt(path, rows, fmt="%.17g", delimiter=",",
               header="bin_lo,bin_hi,count", comments="", newline="\n")
