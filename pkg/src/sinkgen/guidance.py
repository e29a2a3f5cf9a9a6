"""Regression-guided reverse diffusion.

Before each denoising step the current latent batch is nudged down the
gradient of a guidance loss

    L = lambda_p * p_pred + lambda_t * max(|T_pred - t_fixed| - delta_t, 0)^2

evaluated by the two frozen surrogate regressors on the destandardized
latents. The hinge term is exactly zero inside the temperature tolerance
band, so guidance there reduces to pure pressure descent. A zero step
scale bypasses the perturbation entirely, which keeps eta = 0 runs
bitwise identical to unguided sampling under the same streams.

Also provides the feasibility report over generated designs and the
kernel-density tables used for distribution plots.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffusion, oracle, surrogate
from .geometry import DESIGN_DIM, FeatureStats, destandardize

logger = logging.getLogger(__name__)

REL_TOL = 0.05


@dataclass(frozen=True)
class GuidanceConfig:
    """Step scale, loss weights, and temperature target for guided sampling."""

    t_fixed: float
    eta: float = 0.01
    lambda_p: float = 0.4
    lambda_t: float = 0.4
    delta_t: float = 5.0
    n_samples: int = 500

    def __post_init__(self):
        if self.eta < 0.0:
            raise ValueError("eta must be non-negative")
        if self.lambda_p < 0.0 or self.lambda_t < 0.0:
            raise ValueError("loss weights must be non-negative")
        if self.delta_t < 0.0:
            raise ValueError("delta_t must be non-negative")


def guidance_loss(p_pred, t_pred, cfg: GuidanceConfig):
    """Elementwise loss; scalars in, scalar out; arrays broadcast."""
    p_pred = np.asarray(p_pred, dtype=float)
    t_pred = np.asarray(t_pred, dtype=float)
    excess = np.maximum(np.abs(t_pred - cfg.t_fixed) - cfg.delta_t, 0.0)
    out = cfg.lambda_p * p_pred + cfg.lambda_t * excess ** 2
    return float(out) if out.ndim == 0 else out


def hinge_derivative(t_pred, cfg: GuidanceConfig):
    """d/dT of the temperature term: zero inside the band, linear outside."""
    t_pred = np.asarray(t_pred, dtype=float)
    resid = t_pred - cfg.t_fixed
    excess = np.maximum(np.abs(resid) - cfg.delta_t, 0.0)
    return 2.0 * cfg.lambda_t * excess * np.sign(resid)


def guidance_gradient(x_std: np.ndarray,
                      p_model: surrogate.SurrogateModel,
                      t_model: surrogate.SurrogateModel,
                      stats: FeatureStats,
                      cfg: GuidanceConfig) -> np.ndarray:
    """Gradient of L w.r.t. the standardized latent rows (n, 48).

    Chain: standardized latent -> destandardize -> quantile map -> nets ->
    loss. Rows are independent; eta plays no part here (it scales the update).
    """
    x_std = np.atleast_2d(np.asarray(x_std, dtype=float))
    raw = destandardize(x_std, stats)
    grad = np.zeros_like(raw)
    if cfg.lambda_p != 0.0:
        grad += cfg.lambda_p * surrogate.input_gradient(p_model, raw)
    if cfg.lambda_t != 0.0:
        t_pred = surrogate.predict(t_model, raw)
        dt = hinge_derivative(t_pred, cfg)
        if np.any(dt != 0.0):
            grad += dt[:, None] * surrogate.input_gradient(t_model, raw)
    # d(raw)/d(standardized) is the diagonal feature scale
    grad *= stats.std
    return grad


def make_guidance_hook(p_model, t_model, stats, cfg: GuidanceConfig):
    """Sampling hook: x -> x - eta * grad, skipping non-finite gradient rows.

    Returns None when eta is 0 so the sampler runs the untouched unguided
    path (bitwise equivalence).
    """
    if cfg.eta == 0.0:
        return None

    def hook(x: np.ndarray, t: int) -> np.ndarray:
        g = guidance_gradient(x[:, 0, :], p_model, t_model, stats, cfg)
        bad = ~np.all(np.isfinite(g), axis=1)
        if np.any(bad):
            logger.warning(
                "non-finite guidance gradient at t=%d for %d/%d chains; "
                "perturbation skipped for those chains", t, int(bad.sum()), g.shape[0])
            g[bad] = 0.0
        return x - cfg.eta * g[:, None, :]

    return hook


def guided_reverse_step(x, t, model: diffusion.DiffusionModel,
                        p_model, t_model, cfg: GuidanceConfig, z):
    """One guided update for a latent batch (n, 1, length)."""
    hook = make_guidance_hook(p_model, t_model, model.stats, cfg)
    if hook is not None:
        x = hook(x, t)
    t_arr = np.full(x.shape[0], t, dtype=int)
    eps_hat = diffusion.unet_forward(
        diffusion.Tape(recording=False), model.params, model.cfg, x, t_arr).data
    return diffusion.reverse_step(x, t, eps_hat, z, model.schedule)


@dataclass
class GuidedSampleReport:
    """Per-design predictions, oracle labels, and the feasibility summary."""

    config: GuidanceConfig
    designs: np.ndarray
    p_pred: np.ndarray
    t_pred: np.ndarray
    dp_oracle: np.ndarray
    t_oracle: np.ndarray
    valid: np.ndarray
    feasible: np.ndarray
    master_seed: int

    @property
    def feasibility_rate(self) -> float:
        return float(np.mean(self.feasible)) if self.feasible.size else 0.0

    @property
    def elite_index(self):
        """Index of the minimum-oracle-pressure feasible design, or None."""
        if not np.any(self.feasible):
            return None
        dp = np.where(self.feasible, self.dp_oracle, np.inf)
        return int(np.argmin(dp))

    def elite_record(self):
        i = self.elite_index
        if i is None:
            return None
        return {
            "design": self.designs[i].tolist(),
            "dp_pa": float(self.dp_oracle[i]),
            "temp_k": float(self.t_oracle[i]),
            "p_pred": float(self.p_pred[i]),
            "t_pred": float(self.t_pred[i]),
        }


def assess_designs(designs: np.ndarray,
                   p_model, t_model,
                   oracle_cfg: oracle.OracleConfig,
                   cfg: GuidanceConfig,
                   master_seed: int = -1) -> GuidedSampleReport:
    """Label designs with surrogates and oracle and apply the feasibility rule.

    Feasible means: geometry valid, both surrogate predictions within 5%
    relative of the oracle, and oracle temperature within the cap plus
    tolerance.
    """
    designs = np.asarray(designs, dtype=float).reshape(-1, DESIGN_DIM)
    n = designs.shape[0]
    if n == 0:
        empty = np.zeros(0)
        return GuidedSampleReport(cfg, designs, empty, empty, empty, empty,
                                  np.zeros(0, bool), np.zeros(0, bool), master_seed)
    p_pred = surrogate.predict(p_model, designs)
    t_pred = surrogate.predict(t_model, designs)
    valid, dp_o, t_o = oracle.evaluate_many(designs, oracle_cfg)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel_p = np.abs(p_pred - dp_o) / np.abs(dp_o)
        rel_t = np.abs(t_pred - t_o) / np.abs(t_o)
        feasible = (
            valid
            & (rel_p <= REL_TOL)
            & (rel_t <= REL_TOL)
            & (t_o <= cfg.t_fixed + cfg.delta_t)
        )
    return GuidedSampleReport(cfg, designs, p_pred, t_pred, dp_o, t_o,
                              valid, feasible, master_seed)


def generate_guided(model: diffusion.DiffusionModel,
                    p_model, t_model,
                    oracle_cfg: oracle.OracleConfig,
                    cfg: GuidanceConfig,
                    master_seed: int,
                    progress=None) -> GuidedSampleReport:
    """Run n_samples guided chains and report feasibility statistics."""
    hook = make_guidance_hook(p_model, t_model, model.stats, cfg)
    designs = diffusion.sample(model, cfg.n_samples, master_seed,
                               guidance=hook, progress=progress)
    return assess_designs(designs, p_model, t_model, oracle_cfg, cfg, master_seed)


@dataclass
class DensityTable:
    """KDE (or histogram fallback) support points and densities."""

    kind: str
    x: np.ndarray
    density: np.ndarray
    bandwidth: float


def silverman_bandwidth(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    n = values.size
    iqr = float(np.percentile(values, 75) - np.percentile(values, 25))
    spread = min(float(np.std(values)), iqr / 1.34) if iqr > 0 else float(np.std(values))
    return 0.9 * spread * n ** (-0.2)


def density_report(values: np.ndarray, n_grid: int = 256) -> DensityTable:
    """Gaussian-kernel density on a uniform grid spanning min-3bw..max+3bw.

    Degenerate all-equal input falls back to a single-bin histogram table.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size < 2:
        raise ValueError("need at least two values")
    bw = silverman_bandwidth(values)
    if bw <= 0.0:
        lo, hi = values.min() - 0.5, values.max() + 0.5
        counts, edges = np.histogram(values, bins=1, range=(lo, hi))
        centers = 0.5 * (edges[:-1] + edges[1:])
        dens = counts / (values.size * (edges[1] - edges[0]))
        return DensityTable("histogram", centers, dens, 0.0)
    grid = np.linspace(values.min() - 3.0 * bw, values.max() + 3.0 * bw, n_grid)
    z = (grid[:, None] - values[None, :]) / bw
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (values.size * bw * np.sqrt(2.0 * np.pi))
    return DensityTable("kde", grid, dens, bw)


def density_mode(table: DensityTable) -> float:
    """Mode estimate: grid argmax refined by a local parabola fit."""
    i = int(np.argmax(table.density))
    if i == 0 or i == table.x.size - 1 or table.kind != "kde":
        return float(table.x[i])
    y0, y1, y2 = table.density[i - 1], table.density[i], table.density[i + 1]
    denom = y0 - 2.0 * y1 + y2
    if denom == 0.0:
        return float(table.x[i])
    shift = 0.5 * (y0 - y2) / denom
    step = table.x[1] - table.x[0]
    return float(table.x[i] + shift * step)


def write_density_csv(path, table: DensityTable) -> None:
    rows = np.column_stack([table.x, table.density])
    np.savetxt(path, rows, fmt="%.17g", delimiter=",",
               header="value,density", comments="", newline="\n")


REPORT_CSV_HEADER = (
    [f"d_{i}" for i in range(DESIGN_DIM)]
    + ["p_pred", "t_pred", "dp_oracle", "t_oracle", "valid", "feasible"]
)


def write_report_csv(path, report: GuidedSampleReport) -> None:
    table = np.column_stack([
        report.designs,
        report.p_pred,
        report.t_pred,
        report.dp_oracle,
        report.t_oracle,
        report.valid.astype(float),
        report.feasible.astype(float),
    ])
    np.savetxt(path, table, fmt="%.17g", delimiter=",",
               header=",".join(REPORT_CSV_HEADER), comments="", newline="\n")


def write_report_json(path, report: GuidedSampleReport) -> None:
    payload = {
        "config": {
            "t_fixed": report.config.t_fixed,
            "eta": report.config.eta,
            "lambda_p": report.config.lambda_p,
            "lambda_t": report.config.lambda_t,
            "delta_t": report.config.delta_t,
            "n_samples": report.config.n_samples,
        },
        "master_seed": report.master_seed,
        "n_designs": int(report.designs.shape[0]),
        "n_valid": int(np.sum(report.valid)),
        "feasibility_rate": report.feasibility_rate,
        "elite": report.elite_record(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
