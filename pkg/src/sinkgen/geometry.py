"""Closed composite-Bezier fin contours and the 48-d control-point codec.

A layout holds two fins. Each fin is born as four primary vertices on a
perturbed polar grid, grows tangent-blended cubic Bezier segments between
consecutive vertices, and flattens to twelve control points (shared segment
endpoints are stored once). The canonical design vector is
``[x_fin1(12), y_fin1(12), x_fin2(12), y_fin2(12)]``, 48 floats, SI meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_FINS = 2
N_VERTICES = 4
POINTS_PER_FIN = 3 * N_VERTICES
PARAM_DIM = 2 * N_FINS + 3 * N_VERTICES * N_FINS
DESIGN_DIM = 2 * N_FINS * POINTS_PER_FIN

R_FLOOR_FRACTION = 0.05
SIGMA_FLOOR = 1e-8
DEFAULT_R_MID = 0.5
CHARACTERISTIC_LENGTH = 0.010

SELF_INTERSECTION = "self_intersection"
FIN_OVERLAP = "fin_overlap"
OUT_OF_BOUNDS = "out_of_bounds"


class GeometryError(ValueError):
    """Base class for contour construction and validity failures."""


class DegenerateRadiusError(GeometryError):
    """A primary vertex fell inside the radial floor around the fin center."""


class InvalidGeometryError(GeometryError):
    """Operation requires a valid layout but the design failed validation."""


@dataclass(frozen=True)
class Domain:
    """Axis-aligned flow box; x is streamwise, y is cross-stream."""

    x_min: float = 0.0
    x_max: float = 5.0 * CHARACTERISTIC_LENGTH
    y_min: float = 0.0
    y_max: float = 0.5 * CHARACTERISTIC_LENGTH

    @property
    def span_x(self) -> float:
        return self.x_max - self.x_min

    @property
    def span_y(self) -> float:
        return self.y_max - self.y_min


@dataclass
class ParameterVector:
    """Generator parameters for a two-fin layout (28 floats).

    Flat order: fin center x-shifts, fin center y-shifts, then per fin and
    per vertex the triplet (delta_r, delta_theta, eta_curv).
    """

    x_shift: np.ndarray
    y_shift: np.ndarray
    delta_r: np.ndarray
    delta_theta: np.ndarray
    eta_curv: np.ndarray

    def __post_init__(self):
        self.x_shift = np.asarray(self.x_shift, dtype=float).reshape(N_FINS)
        self.y_shift = np.asarray(self.y_shift, dtype=float).reshape(N_FINS)
        self.delta_r = np.asarray(self.delta_r, dtype=float).reshape(N_FINS, N_VERTICES)
        self.delta_theta = np.asarray(self.delta_theta, dtype=float).reshape(N_FINS, N_VERTICES)
        self.eta_curv = np.asarray(self.eta_curv, dtype=float).reshape(N_FINS, N_VERTICES)

    def to_flat(self) -> np.ndarray:
        triplets = np.stack([self.delta_r, self.delta_theta, self.eta_curv], axis=-1)
        return np.concatenate([self.x_shift, self.y_shift, triplets.reshape(-1)])

    @classmethod
    def from_flat(cls, flat: np.ndarray) -> "ParameterVector":
        flat = np.asarray(flat, dtype=float).reshape(PARAM_DIM)
        triplets = flat[2 * N_FINS:].reshape(N_FINS, N_VERTICES, 3)
        return cls(
            x_shift=flat[0:N_FINS],
            y_shift=flat[N_FINS:2 * N_FINS],
            delta_r=triplets[:, :, 0],
            delta_theta=triplets[:, :, 1],
            eta_curv=triplets[:, :, 2],
        )


@dataclass(frozen=True)
class BezierSegment:
    """One cubic segment; endpoints are shared with the neighbouring segments."""

    p0: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray

    def control_array(self) -> np.ndarray:
        return np.stack([self.p0, self.p1, self.p2, self.p3])


@dataclass(frozen=True)
class FinContour:
    """Closed loop of four cubic segments."""

    segments: tuple

    def control_points(self) -> np.ndarray:
        """Twelve stored points: (p0, p1, p2) per segment; p3 is the next p0."""
        pts = []
        for seg in self.segments:
            pts.extend([seg.p0, seg.p1, seg.p2])
        return np.stack(pts)


@dataclass
class ValidityReport:
    reasons: list = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.reasons


@dataclass
class ShapeFeatures:
    blockage: float
    wetted_perimeter: float
    fin_areas: np.ndarray
    min_gap: float

    @property
    def total_area(self) -> float:
        return float(np.sum(self.fin_areas))


@dataclass
class FeatureStats:
    """Per-coordinate mean and (floored) standard deviation of a design corpus."""

    mean: np.ndarray
    std: np.ndarray


def fit_feature_stats(designs: np.ndarray, sigma_floor: float = SIGMA_FLOOR) -> FeatureStats:
    designs = np.asarray(designs, dtype=float)
    mean = designs.mean(axis=0)
    std = np.maximum(designs.std(axis=0), sigma_floor)
    return FeatureStats(mean=mean, std=std)


def standardize(designs: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return (np.asarray(designs, dtype=float) - stats.mean) / stats.std


def destandardize(z: np.ndarray, stats: FeatureStats) -> np.ndarray:
    return np.asarray(z, dtype=float) * stats.std + stats.mean


def primary_vertices(
    delta_r: np.ndarray,
    delta_theta: np.ndarray,
    x_shift: float,
    y_shift: float,
    r_max: float,
    r_floor_fraction: float = R_FLOOR_FRACTION,
) -> np.ndarray:
    """Perturbed polar grid around the shifted fin center.

    theta_i = i*2pi/m + delta_theta_i*pi/m, r_i = |delta_r_i|*r_max. Radii
    under ``r_floor_fraction*r_max`` collapse toward the center and are
    rejected rather than clipped.
    """
    delta_r = np.asarray(delta_r, dtype=float)
    delta_theta = np.asarray(delta_theta, dtype=float)
    m = delta_r.shape[0]
    r = np.abs(delta_r) * r_max
    if np.any(r < r_floor_fraction * r_max):
        bad = np.nonzero(r < r_floor_fraction * r_max)[0]
        raise DegenerateRadiusError(
            f"vertex radii {r[bad]} under floor {r_floor_fraction * r_max:g}"
        )
    theta = np.arange(m) * (2.0 * np.pi / m) + delta_theta * (np.pi / m)
    return np.stack([x_shift + r * np.cos(theta), y_shift + r * np.sin(theta)], axis=1)


def vertex_tangents(vertices: np.ndarray, eta_curv: np.ndarray) -> np.ndarray:
    """Tangent angle at each vertex as a unit-vector blend of adjacent edges.

    Edge i runs from vertex i to vertex i+1 (cyclic). The tangent at vertex i
    mixes its outgoing edge direction with weight w_i = 0.5*(1 + eta_i) and
    the incoming direction with 1 - w_i, then takes atan2 of the blend.
    """
    vertices = np.asarray(vertices, dtype=float)
    eta_curv = np.asarray(eta_curv, dtype=float)
    m = vertices.shape[0]
    edges = vertices[(np.arange(m) + 1) % m] - vertices
    norms = np.linalg.norm(edges, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise GeometryError("coincident consecutive vertices")
    units = edges / norms
    w = 0.5 * (1.0 + eta_curv)
    blend = w[:, None] * units + (1.0 - w)[:, None] * units[np.arange(m) - 1]
    # anti-parallel edges at w = 0.5 can cancel; fall back to the outgoing edge
    tiny = np.linalg.norm(blend, axis=1) < 1e-12
    blend[tiny] = units[tiny]
    return np.arctan2(blend[:, 1], blend[:, 0])


def build_contour(
    vertices: np.ndarray,
    tangents: np.ndarray,
    r_mid: float = DEFAULT_R_MID,
) -> FinContour:
    """Cubic segments between consecutive vertices with tangent-aligned handles.

    Handle length is 0.707*r_mid*d for chord length d, measured along the
    shared tangent at each endpoint, so neighbouring segments meet with a
    continuous direction.
    """
    vertices = np.asarray(vertices, dtype=float)
    tangents = np.asarray(tangents, dtype=float)
    m = vertices.shape[0]
    segs = []
    for i in range(m):
        j = (i + 1) % m
        p0 = vertices[i]
        p3 = vertices[j]
        d = float(np.linalg.norm(p3 - p0))
        handle = 0.707 * r_mid * d
        p1 = p0 + handle * np.array([np.cos(tangents[i]), np.sin(tangents[i])])
        p2 = p3 - handle * np.array([np.cos(tangents[j]), np.sin(tangents[j])])
        segs.append(BezierSegment(p0=p0, p1=p1, p2=p2, p3=p3))
    return FinContour(segments=tuple(segs))


def build_fin(
    params: ParameterVector,
    fin: int,
    r_max: float,
    r_mid: float = DEFAULT_R_MID,
    r_floor_fraction: float = R_FLOOR_FRACTION,
) -> FinContour:
    verts = primary_vertices(
        params.delta_r[fin],
        params.delta_theta[fin],
        params.x_shift[fin],
        params.y_shift[fin],
        r_max,
        r_floor_fraction,
    )
    tangents = vertex_tangents(verts, params.eta_curv[fin])
    return build_contour(verts, tangents, r_mid)


def build_design(
    params: ParameterVector,
    r_max: float,
    r_mid: float = DEFAULT_R_MID,
    r_floor_fraction: float = R_FLOOR_FRACTION,
) -> np.ndarray:
    fins = [build_fin(params, i, r_max, r_mid, r_floor_fraction) for i in range(N_FINS)]
    return to_design_vector(fins)


def bezier_eval(segment: BezierSegment, t) -> np.ndarray:
    """Bernstein-form evaluation; t outside [0, 1] is rejected."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("bezier parameter outside [0, 1]")
    u = 1.0 - t
    coeff = np.stack([u ** 3, 3.0 * u ** 2 * t, 3.0 * u * t ** 2, t ** 3], axis=-1)
    return coeff @ segment.control_array()


def to_design_vector(fins) -> np.ndarray:
    if len(fins) != N_FINS:
        raise ValueError(f"expected {N_FINS} fins, got {len(fins)}")
    parts = []
    for fin in fins:
        pts = fin.control_points()
        parts.extend([pts[:, 0], pts[:, 1]])
    return np.concatenate(parts)


def from_design_vector(design: np.ndarray):
    design = np.asarray(design, dtype=float).reshape(DESIGN_DIM)
    fins = []
    for f in range(N_FINS):
        base = 2 * POINTS_PER_FIN * f
        xs = design[base:base + POINTS_PER_FIN]
        ys = design[base + POINTS_PER_FIN:base + 2 * POINTS_PER_FIN]
        pts = np.stack([xs, ys], axis=1)
        segs = []
        for i in range(N_VERTICES):
            p0 = pts[3 * i]
            p1 = pts[3 * i + 1]
            p2 = pts[3 * i + 2]
            p3 = pts[(3 * i + 3) % POINTS_PER_FIN]
            segs.append(BezierSegment(p0=p0, p1=p1, p2=p2, p3=p3))
        fins.append(FinContour(segments=tuple(segs)))
    return fins


def discretize(contour: FinContour, samples_per_segment: int = 64) -> np.ndarray:
    """Closed polyline; each segment contributes samples at t in [0, 1)."""
    t = np.arange(samples_per_segment) / samples_per_segment
    chunks = [bezier_eval(seg, t) for seg in contour.segments]
    return np.concatenate(chunks, axis=0)


def _closed_edges(poly: np.ndarray) -> tuple:
    a = poly
    b = np.roll(poly, -1, axis=0)
    return a, b


def _proper_crossing_matrix(a0, a1, b0, b1) -> np.ndarray:
    """Strict segment crossing test for all pairs; touching endpoints do not count.

    Row i, column j tests segment (a0[i], a1[i]) against (b0[j], b1[j]) by
    requiring each segment's endpoints to fall on strictly opposite sides of
    the other's supporting line.
    """
    ea = a1 - a0
    eb = b1 - b0
    # rx = b0 - a0 broadcast over the pair grid, one matrix per coordinate
    rx = b0[None, :, 0] - a0[:, None, 0]
    ry = b0[None, :, 1] - a0[:, None, 1]
    d1 = eb[None, :, 0] * ry - eb[None, :, 1] * rx
    d3 = ea[:, None, 0] * ry - ea[:, None, 1] * rx
    rx += eb[None, :, 0]
    ry += eb[None, :, 1]
    d4 = ea[:, None, 0] * ry - ea[:, None, 1] * rx
    rx -= eb[None, :, 0]
    ry -= eb[None, :, 1]
    rx -= ea[:, None, 0]
    ry -= ea[:, None, 1]
    d2 = eb[None, :, 0] * ry - eb[None, :, 1] * rx
    d1 *= d2
    d3 *= d4
    return (d1 < 0.0) & (d3 < 0.0)


def _edge_chunks(poly: np.ndarray, chunks: int = N_VERTICES):
    """Edge endpoints split into contiguous blocks with per-block bboxes."""
    a0, a1 = _closed_edges(poly)
    n = poly.shape[0]
    if n % chunks:
        chunks = 1
    size = n // chunks
    r0 = a0.reshape(chunks, size, 2)
    r1 = a1.reshape(chunks, size, 2)
    lo = np.minimum(r0.min(axis=1), r1.min(axis=1))
    hi = np.maximum(r0.max(axis=1), r1.max(axis=1))
    return r0, r1, lo, hi


def _boxes_overlap(lo_a, hi_a, lo_b, hi_b) -> bool:
    return not (
        lo_a[0] > hi_b[0] or lo_b[0] > hi_a[0]
        or lo_a[1] > hi_b[1] or lo_b[1] > hi_a[1]
    )


def _self_intersects(poly: np.ndarray) -> bool:
    r0, r1, lo, hi = _edge_chunks(poly)
    chunks = r0.shape[0]
    for i in range(chunks):
        for j in range(i, chunks):
            if not _boxes_overlap(lo[i], hi[i], lo[j], hi[j]):
                continue
            hits = _proper_crossing_matrix(r0[i], r1[i], r0[j], r1[j])
            if i == j:
                # adjacent edges only touch, which the strict test ignores
                hits = np.triu(hits, k=1)
            if np.any(hits):
                return True
    return False


def _point_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd crossing number; boundary points are unspecified (measure zero)."""
    x = points[:, 0][:, None]
    y = points[:, 1][:, None]
    p0, p1 = _closed_edges(poly)
    y0 = p0[None, :, 1]
    y1 = p1[None, :, 1]
    x0 = p0[None, :, 0]
    x1 = p1[None, :, 0]
    straddles = (y0 <= y) != (y1 <= y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    crossings = straddles & (x_cross > x)
    return (np.sum(crossings, axis=1) % 2).astype(bool)


def _polylines_cross(pa: np.ndarray, pb: np.ndarray) -> bool:
    ra0, ra1, loa, hia = _edge_chunks(pa)
    rb0, rb1, lob, hib = _edge_chunks(pb)
    for i in range(ra0.shape[0]):
        for j in range(rb0.shape[0]):
            if not _boxes_overlap(loa[i], hia[i], lob[j], hib[j]):
                continue
            if np.any(_proper_crossing_matrix(ra0[i], ra1[i], rb0[j], rb1[j])):
                return True
    return False


def validate(
    design: np.ndarray,
    domain: Domain,
    samples_per_segment: int = 64,
) -> ValidityReport:
    """Polyline-based validity: per-fin self-intersection, fin-fin overlap,
    and containment in the flow box. Reasons accumulate; empty means valid."""
    fins = from_design_vector(design)
    polys = [discretize(fin, samples_per_segment) for fin in fins]
    report = ValidityReport()
    if any(_self_intersects(p) for p in polys):
        report.reasons.append(SELF_INTERSECTION)
    overlap = _polylines_cross(polys[0], polys[1])
    if not overlap:
        # disjoint boundaries can still nest or coincide; probe each way with
        # the first sample and the sample mean (the mean of a radial contour
        # is interior, so exact coincidence cannot dodge both probes)
        probes_a = np.vstack([polys[0][:1], polys[0].mean(axis=0, keepdims=True)])
        probes_b = np.vstack([polys[1][:1], polys[1].mean(axis=0, keepdims=True)])
        overlap = bool(
            np.any(_point_in_polygon(probes_b, polys[0]))
            or np.any(_point_in_polygon(probes_a, polys[1]))
        )
    if overlap:
        report.reasons.append(FIN_OVERLAP)
    allpts = np.concatenate(polys, axis=0)
    inside = (
        (allpts[:, 0] >= domain.x_min)
        & (allpts[:, 0] <= domain.x_max)
        & (allpts[:, 1] >= domain.y_min)
        & (allpts[:, 1] <= domain.y_max)
    )
    if not np.all(inside):
        report.reasons.append(OUT_OF_BOUNDS)
    return report


def _min_gap(pa: np.ndarray, pb: np.ndarray) -> float:
    def point_to_edges_sq(points, poly):
        e0, e1 = _closed_edges(poly)
        d = e1 - e0
        denom = np.maximum(np.sum(d * d, axis=1), 1e-300)
        diff = points[:, None, :] - e0[None, :, :]
        t = np.clip(np.einsum("pej,ej->pe", diff, d) / denom, 0.0, 1.0)
        # residual after projection onto the clamped edge parameter
        diff -= t[:, :, None] * d[None, :, :]
        return np.min(np.einsum("pej,pej->pe", diff, diff))

    return float(np.sqrt(min(point_to_edges_sq(pa, pb), point_to_edges_sq(pb, pa))))


def _shoelace_area(poly: np.ndarray) -> float:
    a, b = _closed_edges(poly)
    return float(0.5 * abs(np.sum(a[:, 0] * b[:, 1] - b[:, 0] * a[:, 1])))


def shape_features(
    design: np.ndarray,
    domain: Domain,
    samples_per_segment: int = 64,
    check: bool = True,
) -> ShapeFeatures:
    """Scalar descriptors of a valid layout used by the synthetic flow model.

    Blockage is the cross-stream fraction of the box obstructed by the union
    of the fins' y-extents; the wetted perimeter sums both closed polyline
    lengths; areas are per-fin shoelace areas; min_gap is the closest
    approach between the two boundaries.
    """
    if check:
        report = validate(design, domain, samples_per_segment)
        if not report.is_valid:
            raise InvalidGeometryError(f"invalid design: {report.reasons}")
    fins = from_design_vector(design)
    polys = [discretize(fin, samples_per_segment) for fin in fins]
    blockage, perimeter = _blockage_and_perimeter(polys, domain)
    areas = np.array([_shoelace_area(p) for p in polys])
    gap = _min_gap(polys[0], polys[1])
    return ShapeFeatures(
        blockage=float(blockage),
        wetted_perimeter=perimeter,
        fin_areas=areas,
        min_gap=gap,
    )


def _blockage_and_perimeter(polys, domain: Domain) -> tuple:
    intervals = []
    perimeter = 0.0
    for p in polys:
        lo = max(float(np.min(p[:, 1])), domain.y_min)
        hi = min(float(np.max(p[:, 1])), domain.y_max)
        if hi > lo:
            intervals.append((lo, hi))
        a, b = _closed_edges(p)
        perimeter += float(np.sum(np.linalg.norm(b - a, axis=1)))
    intervals.sort()
    covered = 0.0
    cursor = None
    for lo, hi in intervals:
        if cursor is None or lo > cursor:
            covered += hi - lo
            cursor = hi
        elif hi > cursor:
            covered += hi - cursor
            cursor = hi
    return covered / domain.span_y, perimeter


def flow_features(
    design: np.ndarray,
    domain: Domain,
    samples_per_segment: int = 64,
) -> tuple:
    """(blockage, wetted perimeter) only, skipping the gap and area work.

    Same discretization and definitions as ``shape_features``; callers must
    have validated the design already.
    """
    fins = from_design_vector(design)
    polys = [discretize(fin, samples_per_segment) for fin in fins]
    return _blockage_and_perimeter(polys, domain)


def write_design_csv(path, designs: np.ndarray) -> None:
    designs = np.atleast_2d(np.asarray(designs, dtype=float))
    header = ",".join(f"d_{i}" for i in range(DESIGN_DIM))
    np.savetxt(path, designs, fmt="%.17g", delimiter=",", header=header, comments="")


def read_design_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=float)
    return np.atleast_2d(data).reshape(-1, DESIGN_DIM)


def write_contour_csv(path, designs: np.ndarray, samples_per_segment: int = 64) -> None:
    """Long-format polyline export: design, fin, segment, t, x, y."""
    designs = np.atleast_2d(np.asarray(designs, dtype=float))
    t = np.arange(samples_per_segment) / samples_per_segment
    rows = []
    for d_idx, design in enumerate(designs):
        for f_idx, fin in enumerate(from_design_vector(design)):
            for s_idx, seg in enumerate(fin.segments):
                pts = bezier_eval(seg, t)
                for tv, (x, y) in zip(t, pts):
                    rows.append((d_idx, f_idx, s_idx, tv, x, y))
    arr = np.array(rows, dtype=float)
    np.savetxt(
        path,
        arr,
        fmt=["%d", "%d", "%d", "%.8f", "%.17g", "%.17g"],
        delimiter=",",
        header="design,fin,segment,t,x,y",
        comments="",
    )
