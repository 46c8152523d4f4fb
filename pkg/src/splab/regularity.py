"""Verification program for potentials of surface measures.

Every check produces a :class:`Check` record (name, claim, pass flag, measured
value, bound, tolerance); a :class:`Report` serializes them to canonical JSON.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .geometry import (
    CurveDiscretization,
    Density,
    PlanarCurve,
    ball_measure,
    counterexample_ball_measure,
    counterexample_lower_bound,
    signed_distance_batch,
)
from .grid_solver import Field, Grid, discrete_laplacian
from .potential import ExtrapolationError, PotentialSolution, one_sided_gradients

NECESSITY_CONSTANT = 8.0 * math.pi  # 2^(2n-1) times the unit-ball volume, n = 2


def _blowup_probes() -> np.ndarray:
    k = np.arange(16)
    rings = []
    for j, s in enumerate((0.25, 0.5, 0.75, 1.0)):
        a = 2.0 * math.pi * (k + 0.5 + 0.25 * j) / 16.0
        rings.append(np.column_stack([s * np.cos(a), s * np.sin(a)]))
    return np.vstack(rings)


BLOWUP_PROBES = _blowup_probes()
_GL32_X, _GL32_W = np.polynomial.legendre.leggauss(32)


@dataclass
class Check:
    name: str
    paper_ref: str
    passed: bool
    measured: float
    bound: float
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "paper_ref": self.paper_ref,
            "pass": bool(self.passed),
            "measured": _json_float(self.measured),
            "bound": _json_float(self.bound),
            "tolerance": _json_float(self.tolerance),
        }


def _json_float(x):
    x = float(x)
    return x if math.isfinite(x) else repr(x)


@dataclass
class Report:
    config: dict
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        return check

    def extend(self, checks: Sequence[Check]) -> None:
        self.checks.extend(checks)

    def to_json(self) -> str:
        body = {"config": self.config, "checks": [c.to_dict() for c in self.checks]}
        return json.dumps(body, sort_keys=True, indent=2) + "\n"

    def failures(self) -> list[dict]:
        return [c.to_dict() for c in self.checks if not c.passed]


def check_le(name, claim, measured, bound, tol=0.0) -> Check:
    return Check(name, claim, bool(measured <= bound * (1.0 + tol) + 1e-300), float(measured), float(bound), tol)


def check_close(name, claim, measured, target, rel_tol, scale=None) -> Check:
    s = abs(target) if scale is None else scale
    err = abs(measured - target) / max(s, 1e-300)
    return Check(name, claim, bool(err <= rel_tol), float(measured), float(target), rel_tol)


# ---------------------------------------------------------------------------
# Mean-value recovery of theta and blow-up
# ---------------------------------------------------------------------------


@dataclass
class ThetaEstimate:
    theta: np.ndarray
    radii: np.ndarray
    samples: np.ndarray
    order: float
    monotone: bool


def _circle_crossings(curve: PlanarCurve, x0: np.ndarray, r: float, n: int = 4096) -> np.ndarray:
    """Angles at which the circle ``|y - x0| = r`` meets the curve."""
    t0, t1 = curve.t_range
    t = np.linspace(t0, t1, n + 1)
    if curve.singular and t0 in curve.singular:
        t[0] = t0 + 1e-12
    f = np.hypot(*(curve(t) - x0).T) - r
    angles = []
    for k in np.flatnonzero(np.sign(f[:-1]) * np.sign(f[1:]) < 0):
        tc = optimize.brentq(lambda s: float(np.hypot(*(curve(s)[0] - x0)) - r), t[k], t[k + 1], xtol=1e-15)
        p = curve(tc)[0] - x0
        angles.append(math.atan2(p[1], p[0]))
    return np.sort(np.mod(np.asarray(angles), 2.0 * math.pi))


def ball_average_gradient(sol: PotentialSolution, x0, r: float) -> np.ndarray:
    """Mean of the gradient over ``B_r(x0)``, as a boundary integral of the value.

    The circle is split at its crossings with the curve so each Gauss arc sees a
    smooth integrand.
    """
    x0 = np.asarray(x0, dtype=float)
    cuts = _circle_crossings(sol.disc.curve, x0, r) if sol.disc.curve is not None else np.array([])
    if cuts.size == 0:
        cuts = np.array([0.0])
    edges = np.concatenate([cuts, [cuts[0] + 2.0 * math.pi]])
    phis, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        half = 0.5 * (b - a)
        phis.append(0.5 * (a + b) + half * _GL32_X)
        ws.append(half * _GL32_W)
    phi = np.concatenate(phis)
    w = np.concatenate(ws)
    e = np.column_stack([np.cos(phi), np.sin(phi)])
    u = sol.value(x0 + r * e)
    return (w * u) @ e / (math.pi * r)


def estimate_theta(sol: PotentialSolution, x0, radii: Optional[Sequence[float]] = None) -> ThetaEstimate:
    """Limit of ball averages of the gradient at ``x0``, two Richardson stages over halved radii."""
    radii = np.asarray(radii if radii is not None else 0.1 * 0.5 ** np.arange(5), dtype=float)
    if np.any(np.diff(radii) >= 0):
        raise ValueError("radii must be strictly decreasing")
    samples = np.array([ball_average_gradient(sol, x0, r) for r in radii])
    ratio = radii[1:] / radii[:-1]
    if np.allclose(ratio, 0.5):
        r1 = 2.0 * samples[1:] - samples[:-1]
        r2 = (4.0 * r1[1:] - r1[:-1]) / 3.0 if len(r1) > 1 else r1
        theta = r2[-1]
    else:
        theta = samples[-1]
    diffs = np.linalg.norm(np.diff(samples, axis=0), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        orders = np.log2(diffs[:-1] / diffs[1:])
    order = float(orders[-1]) if orders.size and np.isfinite(orders[-1]) else float("nan")
    monotone = bool(np.all(np.diff(diffs) <= 1e-14)) if diffs.size > 1 else True
    return ThetaEstimate(theta=theta, radii=radii, samples=samples, order=order, monotone=monotone)


@dataclass
class BlowupReport:
    x0: np.ndarray
    radii: np.ndarray
    theta: np.ndarray
    q0: float
    nu: np.ndarray
    residuals: np.ndarray

    @property
    def decay_ratios(self) -> np.ndarray:
        return self.residuals[1:] / self.residuals[:-1]


def blowup_profile(points: np.ndarray, theta, q0: float, nu) -> np.ndarray:
    return points @ np.asarray(theta) - 0.5 * q0 * np.abs(points @ np.asarray(nu))


def blowup_residual(
    sol: PotentialSolution,
    i: int,
    theta,
    radii: Sequence[float],
    probes: np.ndarray = BLOWUP_PROBES,
) -> BlowupReport:
    """Sup over probes of ``|u_r - profile|`` with ``u_r(x) = (u(x0 + r x) - u(x0)) / r``."""
    disc = sol.disc
    radii = np.asarray(radii, dtype=float)
    if np.any(np.diff(radii) >= 0):
        raise ValueError("radii must be strictly decreasing")
    x0 = disc.nodes[i]
    nu = disc.normals[i]
    q0 = float(sol.q.at(x0[None], np.array([i]))[0])
    u0 = sol.trace_value(float(disc.params[i]))
    prof = blowup_profile(probes, theta, q0, nu)
    res = []
    for r in radii:
        ur = (sol.value(x0 + r * probes) - u0) / r
        res.append(float(np.max(np.abs(ur - prof))))
    return BlowupReport(x0, radii, np.asarray(theta, dtype=float), q0, nu, np.asarray(res))


# ---------------------------------------------------------------------------
# One-sided traces
# ---------------------------------------------------------------------------


@dataclass
class TraceReport:
    index: int
    inner: np.ndarray
    outer: np.ndarray
    theta: np.ndarray
    q0: float
    nu: np.ndarray

    @property
    def inner_formula(self) -> np.ndarray:
        return self.theta + 0.5 * self.q0 * self.nu

    @property
    def outer_formula(self) -> np.ndarray:
        return self.theta - 0.5 * self.q0 * self.nu

    def relative_errors(self) -> dict:
        scale = max(abs(self.q0), float(np.linalg.norm(self.theta)), 1e-300)
        tau = np.array([-self.nu[1], self.nu[0]])
        return {
            "inner": float(np.linalg.norm(self.inner - self.inner_formula)) / scale,
            "outer": float(np.linalg.norm(self.outer - self.outer_formula)) / scale,
            "average": float(np.linalg.norm(0.5 * (self.inner + self.outer) - self.theta)) / scale,
            "normal_jump": abs(float((self.inner - self.outer) @ self.nu) - self.q0) / max(abs(self.q0), 1e-300),
            "tangential": abs(float((self.inner - self.outer) @ tau)) / scale,
        }


def traces(sol: PotentialSolution, i: int, theta=None) -> TraceReport:
    """Inner and outer limits of the gradient at node ``i``; ``theta`` defaults to their mean."""
    disc = sol.disc
    x0, nu = disc.nodes[i], disc.normals[i]
    outer, inner, *_ = one_sided_gradients(sol, x0, nu)
    q0 = float(sol.q.at(x0[None], np.array([i]))[0])
    th = 0.5 * (inner + outer) if theta is None else np.asarray(theta, dtype=float)
    return TraceReport(i, inner, outer, th, q0, nu)


# ---------------------------------------------------------------------------
# Norm estimates and inequality chains
# ---------------------------------------------------------------------------


def _probe_points_disk(m_r: int = 24, m_phi: int = 48) -> np.ndarray:
    r = (np.arange(m_r) + 0.5) / m_r
    phi = 2.0 * math.pi * (np.arange(m_phi) + 0.25) / m_phi
    R, P = np.meshgrid(r, phi)
    return np.column_stack([(R * np.cos(P)).ravel(), (R * np.sin(P)).ravel()])


@dataclass
class EstimateReport:
    theta_sup: float
    grad_sup: float
    q_sup: float
    u_sup: float
    lipschitz_norm: float
    nodes: np.ndarray
    failed_nodes: list[int]

    def as_dict(self) -> dict:
        d = asdict(self)
        d["nodes"] = [int(k) for k in self.nodes]
        return d


def estimate_norms(sol: PotentialSolution, samples: int = 16) -> EstimateReport:
    """Sup norms of theta, grad u, Q and u on a fixed probe set.

    The gradient sup is taken over one-sided traces at ``samples`` nodes and over
    a polar probe set; nodes whose extrapolation fails are skipped and listed.
    """
    disc = sol.disc
    nodes = np.arange(0, disc.n, max(1, disc.n // samples))[:samples]
    thetas, grads, vals, failed = [], [], [], []
    for i in nodes:
        try:
            tr = traces(sol, int(i))
        except ExtrapolationError:
            failed.append(int(i))
            continue
        thetas.append(np.linalg.norm(tr.theta))
        grads += [np.linalg.norm(tr.inner), np.linalg.norm(tr.outer)]
        vals.append(abs(sol.trace_value(float(disc.params[i]))))
    probes = _probe_points_disk()
    if sol.domain == "free-space":
        probes = probes * 2.0
    d = np.min(np.hypot(*(probes[:, None, :] - disc.nodes[None]).transpose(2, 0, 1)), axis=1)
    probes = probes[d > 3.0 * disc.max_spacing]
    g = sol.gradient(probes)
    v = sol.value(probes)
    grad_sup = max(max(grads, default=0.0), float(np.max(np.hypot(g[:, 0], g[:, 1]))))
    u_sup = max(max(vals, default=0.0), float(np.max(np.abs(v))))
    return EstimateReport(
        theta_sup=float(max(thetas, default=0.0)),
        grad_sup=float(grad_sup),
        q_sup=float(sol.q.sup_norm),
        u_sup=float(u_sup),
        lipschitz_norm=float(u_sup + grad_sup),
        nodes=nodes,
        failed_nodes=failed,
    )


def check_necessity(
    sol: PotentialSolution,
    est: Optional[EstimateReport] = None,
    radii: Sequence[float] = tuple(2.0 ** -np.arange(1, 9)),
    centers: Optional[np.ndarray] = None,
) -> list[Check]:
    """``||Q||_inf <= 8 pi ||u||_{C^{0,1}}`` and ``mu(B_r(x)) <= 8 pi ||u||_{C^{0,1}} r``."""
    disc, q = sol.disc, sol.q
    est = est or estimate_norms(sol)
    lip = est.lipschitz_norm
    checks = [
        check_le("density sup bound", "density is bounded by the Lipschitz norm", est.q_sup, NECESSITY_CONSTANT * lip)
    ]
    if centers is None:
        centers = np.vstack([disc.nodes[:: max(1, disc.n // 16)], [[0.0, 0.0], [0.3, -0.2]]])
    worst, witness = -math.inf, None
    for x in centers:
        for r in radii:
            mu = ball_measure(disc, x, r, q)
            quotient = mu / (NECESSITY_CONSTANT * lip * r) if lip > 0 else (0.0 if mu == 0 else math.inf)
            if quotient > worst:
                worst, witness = quotient, (x, r)
    c = check_le("ball measure bound", "surface measure of balls grows at most linearly", worst, 1.0)
    checks.append(c)
    if not c.passed and witness is not None:
        c.name += f" (witness x={witness[0].tolist()}, r={witness[1]})"
    return checks


@dataclass
class ChainResult:
    checks: list[Check]
    constants: list[dict]


def check_apriori_chain(
    reports: Sequence[EstimateReport], stability: float = 0.2, tol: float = 0.02
) -> ChainResult:
    """Inequality chain between theta, grad u, Q and u over a configuration family.

    Checks ``||theta|| <= ||grad u||`` on every member and records the measured
    constants ``C = (||grad u|| - ||theta|| - ||Q||/2) / ||u||`` and
    ``C_theta = ||theta|| / ||Q||``; both must agree across the family within
    ``stability`` (relative, with an absolute floor of 0.05).
    """
    checks, constants = [], []
    for k, rep in enumerate(reports):
        checks.append(
            check_le(f"theta below gradient [{k}]", "trace mean bounded by gradient sup", rep.theta_sup, rep.grad_sup, tol)
        )
        c_u = (rep.grad_sup - rep.theta_sup - 0.5 * rep.q_sup) / rep.u_sup if rep.u_sup > 0 else 0.0
        c_theta = rep.theta_sup / rep.q_sup if rep.q_sup > 0 else 0.0
        upper = rep.theta_sup + 0.5 * rep.q_sup + max(c_u, 0.0) * rep.u_sup
        checks.append(
            check_le(f"gradient upper chain [{k}]", "gradient sup bounded by trace mean, density and sup", rep.grad_sup, upper, tol)
        )
        constants.append({"C_u": float(c_u), "C_theta": float(c_theta)})
    for key in ("C_u", "C_theta"):
        vals = np.array([c[key] for c in constants])
        ref = vals[0]
        spread = float(np.max(np.abs(vals - ref))) if vals.size else 0.0
        allowed = stability * max(abs(ref), 0.05)
        checks.append(
            Check(f"{key} stability", "a priori constant depends only on the configuration class", spread <= allowed, spread, allowed, stability)
        )
    return ChainResult(checks, constants)


# ---------------------------------------------------------------------------
# Distance-function comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonResult:
    w: Field
    lap_w: Field
    lap_v: Field
    tube: np.ndarray
    max_lap_w: float
    max_lap_v: float


def comparison_residual(
    curve: PlanarCurve,
    q_func,
    grid: Grid,
    v: Optional[Field] = None,
    sol: Optional[PotentialSolution] = None,
    epsilon: float = 0.1,
) -> ComparisonResult:
    """Discrete Laplacian of ``w = v + Q|d|/2`` inside the tube ``|d| < epsilon``.

    ``Q`` is extended constantly along normals (``Q(pi(x))``).  ``v`` is taken
    from ``sol`` at the grid nodes unless a grid field is passed.
    """
    if epsilon < 8.0 * grid.h:
        raise ValueError(f"tube half-width {epsilon} is below 8 grid cells ({8 * grid.h})")
    pts = grid.points()
    d_all = np.full(len(pts), np.inf)
    m_box = np.abs(np.hypot(pts[:, 0], pts[:, 1])) < 1.0 + 1e-12 if grid.kind == "disk" else np.ones(len(pts), bool)
    d, t = signed_distance_batch(curve, pts[m_box])
    d_all[m_box] = d
    dist = d_all.reshape(grid.shape)
    tube_plus = np.abs(dist) < epsilon + 2 * grid.h
    qv = np.zeros(len(pts))
    qv[m_box] = q_func(curve(t))
    qf = qv.reshape(grid.shape)
    if v is None:
        if sol is None:
            raise ValueError("pass either a grid field or a potential evaluator")
        vals = np.zeros(len(pts))
        sel = tube_plus.ravel()
        vals[sel] = sol.value(pts[sel])
        v = Field(grid, vals.reshape(grid.shape))
    w = Field(grid, np.where(tube_plus, v.values + 0.5 * qf * np.abs(np.where(np.isfinite(dist), dist, 0.0)), 0.0))
    tube = (np.abs(dist) < epsilon) & grid.interior
    lap_w = discrete_laplacian(w)
    lap_v = discrete_laplacian(Field(grid, np.where(tube_plus, v.values, 0.0)))
    return ComparisonResult(
        w=w,
        lap_w=lap_w,
        lap_v=lap_v,
        tube=tube,
        max_lap_w=float(np.max(np.abs(lap_w.values[tube]))),
        max_lap_v=float(np.max(np.abs(lap_v.values[tube]))),
    )


# ---------------------------------------------------------------------------
# Discrete seminorms
# ---------------------------------------------------------------------------

STENCIL_RADIUS = 8


def _pair_quotients(f: Field, alpha: float, mask: Optional[np.ndarray], radius: int):
    v = f.values
    m = f.grid.valid if mask is None else mask
    ny, nx = v.shape
    best = 0.0
    for dj in range(0, radius + 1):
        for di in range(-radius, radius + 1):
            if dj == 0 and di <= 0:
                continue
            ra, rb = slice(0, ny - dj), slice(dj, ny)
            ca, cb = slice(max(0, -di), nx - max(0, di)), slice(max(0, di), nx - max(0, -di))
            a, b = v[ra, ca], v[rb, cb]
            ma, mb = m[ra, ca], m[rb, cb]
            both = ma & mb
            if not both.any():
                continue
            dist = f.grid.h * math.hypot(di, dj)
            best = max(best, float(np.max(np.abs(a - b)[both])) / dist**alpha)
    return best


def holder_seminorm(f: Field, alpha: float, mask=None, radius: int = STENCIL_RADIUS) -> float:
    """``max |u(x) - u(y)| / |x - y|^alpha`` over valid node pairs at offsets up to ``radius`` cells."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"exponent must lie in (0, 1], got {alpha}")
    return _pair_quotients(f, alpha, mask, radius)


def lipschitz_seminorm(f: Field, mask=None, radius: int = STENCIL_RADIUS) -> float:
    return _pair_quotients(f, 1.0, mask, radius)


def second_difference_max(f: Field, mask=None) -> float:
    """``max |u(x + h e) - 2 u(x) + u(x - h e)| / h^2`` over axis directions and masked nodes."""
    v = f.values
    valid = f.grid.valid
    m = f.grid.interior if mask is None else (mask & f.grid.interior)
    best = 0.0
    core = m[1:-1, 1:-1]
    for sl_p, sl_m, ok in (
        ((slice(2, None), slice(1, -1)), (slice(None, -2), slice(1, -1)), valid[2:, 1:-1] & valid[:-2, 1:-1]),
        ((slice(1, -1), slice(2, None)), (slice(1, -1), slice(None, -2)), valid[1:-1, 2:] & valid[1:-1, :-2]),
    ):
        d2 = np.abs(v[sl_p] - 2.0 * v[1:-1, 1:-1] + v[sl_m]) / f.grid.h**2
        sel = core & ok
        if sel.any():
            best = max(best, float(np.max(d2[sel])))
    return best


def gradient_magnitude_max(grad: np.ndarray, mask: np.ndarray) -> float:
    return float(np.max(np.hypot(grad[..., 0], grad[..., 1])[mask])) if mask.any() else 0.0


# ---------------------------------------------------------------------------
# Counterexample
# ---------------------------------------------------------------------------


@dataclass
class DivergenceTable:
    alpha: float
    radii: np.ndarray
    measure: np.ndarray
    bound: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return self.measure / self.radii

    @property
    def bound_ratio(self) -> np.ndarray:
        return self.bound / self.radii

    def rows(self) -> list[tuple[float, float, float]]:
        return [(float(r), float(a), float(b)) for r, a, b in zip(self.radii, self.ratio, self.bound_ratio)]


def counterexample_divergence(alpha_prime: float, radii: Sequence[float]) -> tuple[DivergenceTable, list[Check]]:
    """Measured ``mu(B_r(0)) / r`` against the closed-form lower bound along decreasing radii."""
    radii = np.asarray(radii, dtype=float)
    if np.any(radii <= 0) or np.any(np.diff(radii) >= 0):
        raise ValueError("radii must be positive and strictly decreasing")
    mu = np.array([counterexample_ball_measure(alpha_prime, r) for r in radii])
    lb = np.array([counterexample_lower_bound(alpha_prime, r) for r in radii])
    table = DivergenceTable(float(alpha_prime), radii, mu, lb)
    margin = float(np.min(mu - lb))
    steps = np.diff(table.ratio)
    checks = [
        Check("measure dominates lower bound", "oscillating graph carries more mass than the closed-form bound", margin >= 0.0, margin, 0.0, 0.0),
        Check("ratio increases", "measure of balls over radius is unbounded", bool(np.all(steps > 0)), float(np.min(steps)) if steps.size else 0.0, 0.0, 0.0),
    ]
    return table, checks
