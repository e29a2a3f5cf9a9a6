"""Synthetic flow-and-heat labels for fin layouts.

Maps a valid two-fin design to a (pressure drop, mean surface temperature)
pair through an Ergun-style blockage law and a convective cooling balance.
The two outputs pull in opposite directions: growing the fins raises the
blockage fraction (more pressure drop) while adding wetted perimeter (more
cooling), which is the trade-off the downstream optimizers exercise.

Also hosts the uniform parameter sampler and rejection-sampled dataset
builder used to produce labeled training corpora.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .geometry import (
    DEFAULT_R_MID,
    DESIGN_DIM,
    N_FINS,
    N_VERTICES,
    PARAM_DIM,
    Domain,
    GeometryError,
    InvalidGeometryError,
    ParameterVector,
    build_design,
    flow_features,
    validate,
)

# inlet temperature, kelvin
T_IN_DEFAULT = 298.15


class OracleError(RuntimeError):
    """Dataset generation failed (rejection rate too high)."""


@dataclass(frozen=True)
class OracleConfig:
    """Coefficients of the analytic flow model.

    ``dp = k_p * phi^2 / (1 - phi)^3 * (1 + c_s * S)`` with blockage
    fraction ``phi`` and dimensionless perimeter ``S = P_wet / span_y``;
    ``temp = t_in + q / (h0 * P_wet * (1 + c_v * phi))``.
    """

    t_in: float = T_IN_DEFAULT
    q: float = 210.0
    k_p: float = 50.0
    c_s: float = 0.5
    h0: float = 100.0
    c_v: float = 2.0
    domain: Domain = field(default_factory=Domain)

    def __post_init__(self):
        for name in ("q", "k_p", "c_s", "h0", "c_v"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ParameterBounds:
    """Uniform sampling box for the 28 generator parameters.

    Per-fin x windows are disjoint so the fins sit one behind the other in
    the flow direction; shift windows keep vertices at least ``r_max`` away
    from the box walls. The radius and angle windows are deliberately
    narrow: they keep sampled fins well clear of the degenerate-radius
    floor and of vertex-reordering angles, and they bound the spread of
    achievable blockage so that label variance stays in a range the
    regressors resolve well.
    """

    r_max: float = 1.0e-3
    r_mid: float = DEFAULT_R_MID
    delta_r: tuple = (0.6, 1.0)
    delta_theta: tuple = (-0.5, 0.5)
    eta_curv: tuple = (0.0, 1.0)
    x_shift: tuple = ((0.010, 0.020), (0.030, 0.040))
    y_shift: tuple = ((2.0e-3, 3.0e-3), (2.0e-3, 3.0e-3))

    def as_arrays(self):
        """Flat (lo, hi) vectors in ``ParameterVector.to_flat`` order."""
        lo = np.empty(PARAM_DIM)
        hi = np.empty(PARAM_DIM)
        for i in range(N_FINS):
            lo[i], hi[i] = self.x_shift[i]
            lo[N_FINS + i], hi[N_FINS + i] = self.y_shift[i]
        trip_lo = [self.delta_r[0], self.delta_theta[0], self.eta_curv[0]]
        trip_hi = [self.delta_r[1], self.delta_theta[1], self.eta_curv[1]]
        base = 2 * N_FINS
        n_trip = N_FINS * N_VERTICES
        lo[base:] = np.tile(trip_lo, n_trip)
        hi[base:] = np.tile(trip_hi, n_trip)
        return lo, hi


@dataclass
class DatasetRecord:
    """One labeled row; labels are None exactly when the design is invalid."""

    params: np.ndarray
    design: np.ndarray
    dp: float | None
    temp: float | None
    valid: bool


@dataclass
class Dataset:
    """Column-wise valid-rows-only corpus plus generation statistics."""

    params: np.ndarray
    designs: np.ndarray
    dp: np.ndarray
    temp: np.ndarray
    rejection_rate: float
    seed: int

    def __len__(self) -> int:
        return self.designs.shape[0]


def evaluate_features(blockage: float, wetted_perimeter: float, config: OracleConfig):
    """Labels from precomputed shape descriptors."""
    phi = blockage
    s = wetted_perimeter / config.domain.span_y
    dp = config.k_p * phi * phi / (1.0 - phi) ** 3 * (1.0 + config.c_s * s)
    temp = config.t_in + config.q / (config.h0 * wetted_perimeter * (1.0 + config.c_v * phi))
    return float(dp), float(temp)


def evaluate(design: np.ndarray, config: OracleConfig | None = None):
    """(pressure drop, temperature) for one valid design.

    Raises InvalidGeometryError when the design fails validation.
    """
    config = config or OracleConfig()
    report = validate(design, config.domain)
    if not report.is_valid:
        raise InvalidGeometryError(f"invalid design: {report.reasons}")
    phi, p_wet = flow_features(design, config.domain)
    return evaluate_features(phi, p_wet, config)


def evaluate_many(designs: np.ndarray, config: OracleConfig | None = None):
    """Batch labels with a validity mask; invalid rows get NaN labels."""
    config = config or OracleConfig()
    designs = np.atleast_2d(np.asarray(designs, dtype=float))
    n = designs.shape[0]
    valid = np.zeros(n, dtype=bool)
    dp = np.full(n, np.nan)
    temp = np.full(n, np.nan)
    for i in range(n):
        report = validate(designs[i], config.domain)
        if not report.is_valid:
            continue
        phi, p_wet = flow_features(designs[i], config.domain)
        valid[i] = True
        dp[i], temp[i] = evaluate_features(phi, p_wet, config)
    return valid, dp, temp


def make_record(params: np.ndarray, config: OracleConfig | None = None,
                bounds: ParameterBounds | None = None) -> DatasetRecord:
    """Build, validate, and (when valid) label one parameter vector."""
    config = config or OracleConfig()
    bounds = bounds or ParameterBounds()
    pv = ParameterVector.from_flat(params)
    try:
        design = build_design(pv, bounds.r_max, bounds.r_mid)
    except GeometryError:
        return DatasetRecord(np.asarray(params, dtype=float), np.full(DESIGN_DIM, np.nan),
                             None, None, False)
    report = validate(design, config.domain)
    if not report.is_valid:
        return DatasetRecord(pv.to_flat(), design, None, None, False)
    phi, p_wet = flow_features(design, config.domain)
    dp, temp = evaluate_features(phi, p_wet, config)
    return DatasetRecord(pv.to_flat(), design, dp, temp, True)


def sample_parameter_vector(rng: np.random.Generator,
                            bounds: ParameterBounds | None = None) -> ParameterVector:
    """One uniform i.i.d. draw of all 28 components within the bounds box."""
    bounds = bounds or ParameterBounds()
    lo, hi = bounds.as_arrays()
    return ParameterVector.from_flat(rng.uniform(lo, hi))


def generate_dataset(n: int, seed: int,
                     bounds: ParameterBounds | None = None,
                     config: OracleConfig | None = None,
                     progress=None) -> Dataset:
    """Rejection-sample n valid designs and label them.

    Aborts with bounds diagnostics once the running rejection rate exceeds
    95% (checked after 200 proposals).
    """
    if n <= 0:
        raise ValueError("n must be positive")
    bounds = bounds or ParameterBounds()
    config = config or OracleConfig()
    rng = rng_mod.stream(seed, rng_mod.DATA)

    params_rows = []
    design_rows = []
    dp_rows = []
    temp_rows = []
    total = 0
    rejected = 0
    reasons: dict = {}
    while len(design_rows) < n:
        total += 1
        pv = sample_parameter_vector(rng, bounds)
        try:
            design = build_design(pv, bounds.r_max, bounds.r_mid)
        except GeometryError:
            rejected += 1
            reasons["degenerate_radius"] = reasons.get("degenerate_radius", 0) + 1
            continue
        report = validate(design, config.domain)
        if not report.is_valid:
            rejected += 1
            for reason in report.reasons:
                reasons[reason] = reasons.get(reason, 0) + 1
        else:
            phi, p_wet = flow_features(design, config.domain)
            dp, temp = evaluate_features(phi, p_wet, config)
            params_rows.append(pv.to_flat())
            design_rows.append(design)
            dp_rows.append(dp)
            temp_rows.append(temp)
            if progress is not None and len(design_rows) % 500 == 0:
                progress(len(design_rows), n)
        if total >= 200 and rejected / total > 0.95:
            raise OracleError(
                f"rejection rate {rejected / total:.1%} after {total} proposals "
                f"(reasons: {reasons}); loosen bounds: {bounds}"
            )
    return Dataset(
        params=np.array(params_rows),
        designs=np.array(design_rows),
        dp=np.array(dp_rows),
        temp=np.array(temp_rows),
        rejection_rate=rejected / total,
        seed=seed,
    )


DATASET_HEADER = (
    [f"X_{i}" for i in range(PARAM_DIM)]
    + [f"d_{i}" for i in range(DESIGN_DIM)]
    + ["dp_pa", "temp_k"]
)


def write_dataset_csv(path, dataset: Dataset) -> None:
    table = np.column_stack([
        dataset.params,
        dataset.designs,
        dataset.dp,
        dataset.temp,
    ])
    np.savetxt(path, table, fmt="%.17g", delimiter=",",
               header=",".join(DATASET_HEADER), comments="", newline="\n")


def read_dataset_csv(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header != DATASET_HEADER:
            raise OracleError(f"unexpected dataset header in {path}")
        table = np.loadtxt(fh, delimiter=",", dtype=float, ndmin=2)
    p = PARAM_DIM
    d = DESIGN_DIM
    return Dataset(
        params=table[:, :p],
        designs=table[:, p:p + d],
        dp=table[:, p + d],
        temp=table[:, p + d + 1],
        rejection_rate=float("nan"),
        seed=-1,
    )
