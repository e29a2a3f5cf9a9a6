"""Evolution-strategy baseline over the 28-d generation parameters.

Standard CMA-ES (weighted recombination, cumulative step-size adaptation,
rank-1 plus rank-mu covariance update) minimizing oracle pressure drop with
a quadratic temperature-cap penalty. The search runs in box-normalized
[0, 1] coordinates; candidates are clamped to the box for evaluation and a
quadratic out-of-bounds penalty keeps the distribution inside.

Invalid geometries get a large finite fitness (10x the worst fitness seen
so far) so every generation has a total ranking.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import oracle, rng
from .geometry import GeometryError, ParameterVector, build_design

EIGEN_FLOOR = 1e-14
BOUND_PENALTY_WEIGHT = 1e4
INVALID_FITNESS_FLOOR = 1e3
DEFAULT_RHO = 10.0


def default_population(dim: int) -> int:
    return 4 + int(np.floor(3.0 * np.log(dim)))


@dataclass
class CmaState:
    """Distribution parameters plus the strategy constants they evolve under."""

    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int
    lam: int
    weights: np.ndarray
    mu_eff: float
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    c_mu: float
    chi_n: float
    # eigendecomposition of cov, refreshed after every tell
    eig_vals: np.ndarray = field(default=None)
    eig_vecs: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.eig_vals is None:
            self._refresh_eigen()

    def _refresh_eigen(self):
        c = 0.5 * (self.cov + self.cov.T)
        vals, vecs = np.linalg.eigh(c)
        if np.any(vals < EIGEN_FLOOR):
            vals = np.maximum(vals, EIGEN_FLOOR)
            c = (vecs * vals) @ vecs.T
        self.cov = c
        self.eig_vals = vals
        self.eig_vecs = vecs

    @property
    def condition_number(self) -> float:
        return float(self.eig_vals.max() / self.eig_vals.min())


def init_state(dim: int, mean: np.ndarray, sigma: float, lam: int = None) -> CmaState:
    if lam is None:
        lam = default_population(dim)
    mu = lam // 2
    raw = np.log((lam + 1.0) / 2.0) - np.log(np.arange(1, mu + 1))
    weights = raw / raw.sum()
    mu_eff = 1.0 / np.sum(weights ** 2)
    c_sigma = (mu_eff + 2.0) / (dim + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, np.sqrt((mu_eff - 1.0) / (dim + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / dim) / (dim + 4.0 + 2.0 * mu_eff / dim)
    c_1 = 2.0 / ((dim + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c_1,
               2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((dim + 2.0) ** 2 + mu_eff))
    chi_n = np.sqrt(dim) * (1.0 - 1.0 / (4.0 * dim) + 1.0 / (21.0 * dim ** 2))
    return CmaState(
        mean=np.asarray(mean, dtype=float).copy(),
        sigma=float(sigma),
        cov=np.eye(dim),
        p_sigma=np.zeros(dim),
        p_c=np.zeros(dim),
        generation=0,
        lam=lam,
        weights=weights,
        mu_eff=float(mu_eff),
        c_sigma=float(c_sigma),
        d_sigma=float(d_sigma),
        c_c=float(c_c),
        c_1=float(c_1),
        c_mu=float(c_mu),
        chi_n=float(chi_n),
    )


def ask(state: CmaState, generator: np.random.Generator) -> np.ndarray:
    """Sample lam candidates (lam, dim) from the current distribution."""
    dim = state.mean.size
    z = generator.standard_normal((state.lam, dim))
    y = (z * np.sqrt(state.eig_vals)) @ state.eig_vecs.T
    return state.mean[None, :] + state.sigma * y


def tell(state: CmaState, candidates: np.ndarray, fitness: np.ndarray) -> CmaState:
    """Rank candidates and apply the standard distribution updates in place.

    A generation with all-equal fitness carries no ranking information, so
    everything except the generation counter is left untouched.
    """
    fitness = np.asarray(fitness, dtype=float)
    if not np.all(np.isfinite(fitness)):
        raise ValueError("fitness values must be finite")
    state.generation += 1
    if fitness.max() == fitness.min():
        return state

    dim = state.mean.size
    mu = state.weights.size
    order = np.argsort(fitness, kind="stable")[:mu]
    y = (candidates[order] - state.mean[None, :]) / state.sigma
    y_w = state.weights @ y

    inv_sqrt = state.eig_vecs @ ((state.eig_vecs / np.sqrt(state.eig_vals)).T)
    state.mean = state.mean + state.sigma * y_w
    state.p_sigma = ((1.0 - state.c_sigma) * state.p_sigma
                     + np.sqrt(state.c_sigma * (2.0 - state.c_sigma) * state.mu_eff)
                     * (inv_sqrt @ y_w))
    norm_ps = np.linalg.norm(state.p_sigma)
    denom = np.sqrt(1.0 - (1.0 - state.c_sigma) ** (2.0 * state.generation))
    h_sigma = float(norm_ps / denom < (1.4 + 2.0 / (dim + 1.0)) * state.chi_n)
    state.p_c = ((1.0 - state.c_c) * state.p_c
                 + h_sigma * np.sqrt(state.c_c * (2.0 - state.c_c) * state.mu_eff) * y_w)
    rank_mu = (y * state.weights[:, None]).T @ y
    delta = (1.0 - h_sigma) * state.c_c * (2.0 - state.c_c)
    state.cov = ((1.0 - state.c_1 - state.c_mu) * state.cov
                 + state.c_1 * (np.outer(state.p_c, state.p_c) + delta * state.cov)
                 + state.c_mu * rank_mu)
    state.sigma *= float(np.exp((state.c_sigma / state.d_sigma)
                                * (norm_ps / state.chi_n - 1.0)))
    state._refresh_eigen()
    return state


@dataclass
class TraceRow:
    generation: int
    best_fitness: float
    sigma: float
    condition_number: float


def write_trace_csv(path, trace) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["generation", "best_fitness", "sigma", "condition_number"])
        for row in trace:
            writer.writerow([row.generation, f"{row.best_fitness:.17g}",
                             f"{row.sigma:.17g}", f"{row.condition_number:.17g}"])


@dataclass
class MinimizeResult:
    best_x: np.ndarray
    best_fitness: float
    evals: int
    trace: list


def minimize(fn, lo, hi, budget: int, seed: int,
             sigma0_fraction: float = 0.3, lam: int = None,
             target: float = None) -> MinimizeResult:
    """Minimize fn over the box [lo, hi] within an evaluation budget.

    fn maps a physical-coordinate vector to a scalar. Search happens in
    box-normalized coordinates; out-of-box samples are clamped before
    evaluation and charged a quadratic penalty. Stops early when fitness
    reaches target (if given).
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ValueError("bounds must satisfy lo < hi elementwise")
    dim = lo.size
    state = init_state(dim, mean=np.full(dim, 0.5),
                       sigma=sigma0_fraction * 0.5, lam=lam)
    generator = rng.stream(seed, rng.CMA)
    span = hi - lo

    best_x = None
    best_f = np.inf
    evals = 0
    trace = []
    while evals + state.lam <= budget:
        raw = ask(state, generator)
        clipped = np.clip(raw, 0.0, 1.0)
        bound_pen = BOUND_PENALTY_WEIGHT * np.sum((raw - clipped) ** 2, axis=1)
        fitness = np.empty(state.lam)
        for i in range(state.lam):
            fitness[i] = fn(lo + clipped[i] * span) + bound_pen[i]
            evals += 1
            if fitness[i] < best_f:
                best_f = float(fitness[i])
                best_x = lo + clipped[i] * span
        tell(state, raw, fitness)
        trace.append(TraceRow(state.generation, best_f, state.sigma,
                              state.condition_number))
        if target is not None and best_f < target:
            break
    return MinimizeResult(best_x, best_f, evals, trace)


# ---- oracle objective ----


def penalized_fitness(dp: float, temp: float, t_fixed: float,
                      rho: float = DEFAULT_RHO) -> float:
    """Pressure drop plus a quadratic penalty above the temperature cap."""
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    return float(dp + rho * max(0.0, temp - t_fixed) ** 2)


@dataclass
class CmaRunResult:
    """Elite record, budget accounting, and the per-generation trace."""

    t_fixed: float
    seed: int
    evals: int
    best_fitness: float
    trace: list
    elite_params: np.ndarray = None
    elite_design: np.ndarray = None
    elite_dp: float = None
    elite_temp: float = None

    def elite_record(self):
        if self.elite_design is None:
            return None
        return {
            "params": self.elite_params.tolist(),
            "design": self.elite_design.tolist(),
            "dp_pa": float(self.elite_dp),
            "temp_k": float(self.elite_temp),
        }


def write_elite_json(path, result: CmaRunResult) -> None:
    payload = {
        "t_fixed": result.t_fixed,
        "seed": result.seed,
        "evals": result.evals,
        "best_fitness": result.best_fitness,
        "elite": result.elite_record(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run(t_fixed: float, eval_budget: int, seed: int,
        bounds: oracle.ParameterBounds = None,
        config: oracle.OracleConfig = None,
        rho: float = DEFAULT_RHO,
        delta_t: float = 5.0,
        lam: int = None,
        progress=None) -> CmaRunResult:
    """Optimize the oracle objective under a temperature cap.

    Every candidate, valid or not, costs one oracle evaluation against the
    budget. The elite is the lowest-pressure design among those that are
    geometrically valid and within delta_t of the cap.
    """
    bounds = bounds or oracle.ParameterBounds()
    config = config or oracle.OracleConfig()
    lo, hi = bounds.as_arrays()
    dim = lo.size
    if lam is None:
        lam = default_population(dim)
    if eval_budget < lam:
        raise ValueError("budget must cover at least one generation")

    state = init_state(dim, mean=np.full(dim, 0.5), sigma=0.3 * 0.5, lam=lam)
    generator = rng.stream(seed, rng.CMA)
    span = hi - lo

    best_fitness = np.inf
    worst_fitness = INVALID_FITNESS_FLOOR
    result = CmaRunResult(t_fixed=t_fixed, seed=seed, evals=0,
                          best_fitness=np.inf, trace=[])
    elite_dp = np.inf

    while result.evals + lam <= eval_budget:
        raw = ask(state, generator)
        clipped = np.clip(raw, 0.0, 1.0)
        bound_pen = BOUND_PENALTY_WEIGHT * np.sum((raw - clipped) ** 2, axis=1)
        fitness = np.empty(lam)
        invalid = []
        for i in range(lam):
            x_phys = lo + clipped[i] * span
            params = ParameterVector.from_flat(x_phys)
            result.evals += 1
            try:
                design = build_design(params, r_max=bounds.r_max, r_mid=bounds.r_mid)
                dp, temp = oracle.evaluate(design, config)
            except GeometryError:
                invalid.append(i)
                fitness[i] = np.nan
                continue
            fitness[i] = penalized_fitness(dp, temp, t_fixed, rho) + bound_pen[i]
            worst_fitness = max(worst_fitness, fitness[i])
            if temp <= t_fixed + delta_t and dp < elite_dp:
                elite_dp = dp
                result.elite_params = x_phys
                result.elite_design = design
                result.elite_dp = dp
                result.elite_temp = temp
        for i in invalid:
            # strictly dominated by every evaluated design this run
            fitness[i] = 10.0 * worst_fitness + bound_pen[i]
        best_fitness = min(best_fitness, float(fitness.min()))
        tell(state, raw, fitness)
        result.trace.append(TraceRow(state.generation, best_fitness,
                                     state.sigma, state.condition_number))
        if progress is not None:
            progress(result.evals, eval_budget, best_fitness)
    result.best_fitness = best_fitness
    return result


# ---- benchmark objectives ----


def sphere(x: np.ndarray) -> float:
    return float(np.sum(np.asarray(x) ** 2))


def make_rotated_ellipsoid(dim: int, condition: float, seed: int = 0):
    """Quadratic bowl with the given Hessian condition number, rotated."""
    generator = np.random.default_rng(seed)
    q, _ = np.linalg.qr(generator.standard_normal((dim, dim)))
    scales = condition ** (np.arange(dim) / (dim - 1.0))

    def fn(x):
        z = q @ np.asarray(x, dtype=float)
        return float(np.sum(scales * z * z))

    return fn
