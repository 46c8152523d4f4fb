"""Experiment runners shared by the command line and the acceptance suite.

Each runner takes an :class:`ExperimentConfig` and returns a
:class:`~splab.regularity.Report` plus a dictionary of auxiliary artifacts
(fields, tables) that the caller may export.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import alt_caffarelli as ac
from .geometry import (
    Density,
    discretize,
    make_circle,
    mollify_curve,
    mollify_density,
    parse_curve,
    parse_density,
    surface_integral,
)
from .grid_solver import Field, Grid, deposit_measure, discrete_gradient, solve_poisson
from .potential import (
    ExtrapolationError,
    PotentialSolution,
    normal_derivatives,
    wolff_potential,
)
from .regularity import (
    Check,
    Report,
    blowup_residual,
    check_apriori_chain,
    check_close,
    check_le,
    check_necessity,
    comparison_residual,
    counterexample_divergence,
    estimate_norms,
    estimate_theta,
    gradient_magnitude_max,
    second_difference_max,
    traces,
)

DEFAULT_TOLERANCES = {
    "greens_sup": 1e-6,
    "grid_sup": 2e-3,
    "jump": 0.01,
    "method_agreement": 0.005,
    "pv": 1e-3,
    "lipschitz_change": 0.05,
    "second_difference_growth": [1.7, 2.3],
    "blowup_ratio": 0.67,
    "theta": 0.02,
    "traces": 0.02,
    "wolff": 0.05,
    "comparison_ratio": [0.5, 1.5],
    "altcaf_synthetic": 5e-3,
    "altcaf_lipschitz": 0.10,
    "altcaf_grad_floor": 1e-6,
    "apriori_stability": 0.2,
}


@dataclass
class ExperimentConfig:
    curve: str = "circle:rho=0.5"
    q: str = "const:1"
    domain: str = "disk"
    grid: int = 512
    nodes: int = 4096
    radii: list = field(default_factory=lambda: [0.1, 0.05, 0.025, 0.0125])
    samples: int = 16
    node: int = 0
    method: str = "greens"
    probes: list = field(default_factory=list)
    alpha: float = 0.5
    u0: float = 0.01
    epsilon: float = 0.0025
    max_steps: int = 2000
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    seed: int = 0
    quick: bool = False

    def to_text(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        data = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        merged = dict(DEFAULT_TOLERANCES)
        merged.update(cfg.tolerances)
        cfg.tolerances = merged
        return cfg

    def tol(self, key: str):
        return self.tolerances.get(key, DEFAULT_TOLERANCES[key])


def build_solution(cfg: ExperimentConfig, curve=None) -> PotentialSolution:
    curve = curve or parse_curve(cfg.curve)
    disc = discretize(curve, cfg.nodes)
    q = parse_density(cfg.q)(disc)
    domain = {"disk": "unit-disk", "free": "free-space"}.get(cfg.domain)
    if domain is None:
        raise ValueError(f"domain '{cfg.domain}' has no Green's function; use --method grid")
    return PotentialSolution(disc, q, domain)


def build_grid(cfg: ExperimentConfig, n: Optional[int] = None) -> Grid:
    n = n or cfg.grid
    if cfg.domain == "disk":
        return Grid.disk(n)
    if cfg.domain.startswith("square:"):
        side = float(cfg.domain.split(":", 1)[1])
        return Grid.square(n, side, (-0.5 * side, -0.5 * side))
    raise ValueError(f"domain '{cfg.domain}' has no grid")


def grid_solution(cfg: ExperimentConfig, n: Optional[int] = None, nodes: Optional[int] = None) -> Field:
    g = build_grid(cfg, n)
    curve = parse_curve(cfg.curve)
    disc = discretize(curve, nodes or max(cfg.nodes, 8 * g.n))
    q = parse_density(cfg.q)(disc)
    return solve_poisson(deposit_measure(disc, q, g))


def _sample_nodes(n: int, count: int) -> list[int]:
    step = max(1, n // count)
    return list(range(0, n, step))[:count]


def _radial(cfg: ExperimentConfig) -> Optional[float]:
    """Radius of an origin-centred circle with constant density, else None."""
    if not (cfg.curve.startswith("circle:") and cfg.q.startswith("const:")):
        return None
    c = parse_curve(cfg.curve)
    if abs(c.params["cx"]) > 0 or abs(c.params["cy"]) > 0:
        return None
    return c.params["rho"]


# ---------------------------------------------------------------------------


def run_solve(cfg: ExperimentConfig):
    report = Report(json.loads(cfg.to_text()))
    probes = np.atleast_2d(np.asarray(cfg.probes or [[0.0, 0.0]], dtype=float))
    artifacts = {}
    if cfg.method == "greens":
        values = build_solution(cfg).value(probes)
    elif cfg.method == "grid":
        f = grid_solution(cfg)
        values = f.at(probes)
        artifacts["field"] = f
    else:
        raise ValueError(f"unknown method '{cfg.method}'")
    artifacts["values"] = values
    report.add(Check("finite values", "potential is bounded", bool(np.all(np.isfinite(values))), float(np.max(np.abs(values))), math.inf, 0.0))
    rho = _radial(cfg)
    if rho is not None and cfg.domain == "disk":
        c = float(cfg.q.split(":", 1)[1])
        exact = -c * rho * np.log(np.maximum(np.hypot(probes[:, 0], probes[:, 1]), rho))
        tol = cfg.tol("greens_sup") if cfg.method == "greens" else cfg.tol("grid_sup")
        err = float(np.max(np.abs(values - exact)))
        report.add(check_le("radial oracle", "radial solution of the circle problem", err, tol))
    return report, artifacts


def run_radial(cfg: ExperimentConfig):
    """Green's evaluator and grid solver against ``-rho log max(r, rho)``."""
    report = Report(json.loads(cfg.to_text()))
    rho = _radial(cfg) or 0.5
    sol = build_solution(cfg)
    r = np.concatenate([np.linspace(0.0, rho - 1e-3, 200), np.linspace(rho + 1e-3, 0.999, 200)])
    phi = np.linspace(0.0, 2.0 * math.pi, len(r), endpoint=False) * 7.0
    pts = np.column_stack([r * np.cos(phi), r * np.sin(phi)])
    exact = -rho * np.log(np.maximum(r, rho))
    err = float(np.max(np.abs(sol.value(pts) - exact)))
    report.add(check_le("green sup error", "radial solution of the circle problem", err, cfg.tol("greens_sup")))
    f = grid_solution(cfg)
    g = f.grid
    X, Y = g.coords()
    R = np.hypot(X, Y)
    mask = g.interior & (np.abs(R - rho) >= 2.0 * g.h)
    gerr = float(np.max(np.abs(f.values - (-rho * np.log(np.maximum(R, rho))))[mask]))
    report.add(check_le("grid sup error", "radial solution of the circle problem", gerr, cfg.tol("grid_sup")))
    return report, {"field": f}


def run_jump(cfg: ExperimentConfig):
    report = Report(json.loads(cfg.to_text()))
    sol = build_solution(cfg)
    rows = []
    worst_jump, worst_agree = 0.0, 0.0
    for i in _sample_nodes(sol.disc.n, cfg.samples):
        nd = normal_derivatives(sol, i)
        rel = abs(nd.jump + nd.q0) / abs(nd.q0)
        worst_jump = max(worst_jump, rel)
        worst_agree = max(worst_agree, nd.method_agreement)
        rows.append((i, nd.outer, nd.inner, nd.jump, nd.pv_integral, nd.q0))
    report.add(check_le("normal jump equals minus density", "normal derivative jumps by the density", worst_jump, cfg.tol("jump")))
    report.add(check_le("jump formula agrees with extrapolation", "one-sided normal derivatives via principal value", worst_agree, cfg.tol("method_agreement")))
    rho = _radial(cfg)
    if rho is not None:
        c = float(cfg.q.split(":", 1)[1])
        pv_err = max(abs(r[4] + 0.5 * c) for r in rows)
        report.add(check_le("principal value on the circle", "principal value of the double-layer kernel", pv_err, cfg.tol("pv")))
    return report, {"rows": rows}


def run_theta(cfg: ExperimentConfig):
    report = Report(json.loads(cfg.to_text()))
    sol = build_solution(cfg)
    i = cfg.node
    est = estimate_theta(sol, sol.disc.nodes[i])
    tr = traces(sol, i)
    avg = 0.5 * (tr.inner + tr.outer)
    scale = max(float(np.linalg.norm(avg)), abs(tr.q0))
    report.add(check_close("theta matches trace mean", "ball averages of the gradient converge to the trace mean", float(np.linalg.norm(est.theta - avg)), 0.0, cfg.tol("theta"), scale=scale))
    return report, {"theta": est.theta, "order": est.order, "samples": est.samples}


def run_blowup(cfg: ExperimentConfig):
    report = Report(json.loads(cfg.to_text()))
    sol = build_solution(cfg)
    i = cfg.node
    est = estimate_theta(sol, sol.disc.nodes[i])
    radii = sorted(cfg.radii, reverse=True)
    br = blowup_residual(sol, i, est.theta, radii)
    for r, ratio in zip(radii[:-1], br.decay_ratios):
        report.add(check_le(f"residual decay at r={r:g}", "first-order Taylor profile with a kink", float(ratio), cfg.tol("blowup_ratio")))
    tr = traces(sol, i)
    avg = 0.5 * (tr.inner + tr.outer)
    scale = max(float(np.linalg.norm(avg)), abs(tr.q0))
    report.add(check_close("theta matches trace mean", "ball averages of the gradient converge to the trace mean", float(np.linalg.norm(est.theta - avg)), 0.0, cfg.tol("theta"), scale=scale))
    return report, {"residuals": br.residuals, "theta": est.theta}


def run_traces(cfg: ExperimentConfig):
    report = Report(json.loads(cfg.to_text()))
    sol = build_solution(cfg)
    worst = {"inner": 0.0, "outer": 0.0, "average": 0.0, "normal_jump": 0.0}
    failed = []
    for i in _sample_nodes(sol.disc.n, cfg.samples):
        try:
            theta = estimate_theta(sol, sol.disc.nodes[i]).theta
            errs = traces(sol, i, theta=theta).relative_errors()
        except ExtrapolationError:
            failed.append(i)
            continue
        for k in worst:
            worst[k] = max(worst[k], errs[k])
    tol = cfg.tol("traces")
    report.add(check_le("inner trace formula", "inner trace is theta plus half the density times the normal", worst["inner"], tol))
    report.add(check_le("outer trace formula", "outer trace is theta minus half the density times the normal", worst["outer"], tol))
    report.add(check_le("trace mean equals theta", "theta is the mean of the traces", worst["average"], tol))
    report.add(check_le("trace difference along the normal", "gradient jump equals the density", worst["normal_jump"], tol))
    report.add(Check("extrapolation converged", "traces exist at every sampled node", not failed, float(len(failed)), 0.0, 0.0))
    return report, {"failed": failed}


def run_necessity(cfg: ExperimentConfig):
    report = Report(json.loads(cfg.to_text()))
    sol = build_solution(cfg)
    est = estimate_norms(sol, cfg.samples)
    report.extend(check_necessity(sol, est))
    return report, {"estimates": est.as_dict()}


def run_apriori(cfg: ExperimentConfig, rotations: int = 4):
    """Rotating the curve about the origin keeps its distance to the unit circle fixed."""
    report = Report(json.loads(cfg.to_text()))
    base = parse_curve(cfg.curve)
    ests = []
    for k in range(rotations):
        ang = 2.0 * math.pi * k / rotations
        R = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])

        def rotated(fn, R=R):
            return lambda t: fn(t) @ R.T

        curve = replace(
            base,
            gamma=rotated(base.gamma),
            dgamma=rotated(base.dgamma),
            d2gamma=rotated(base.d2gamma) if base.d2gamma is not None else None,
        )
        ests.append(estimate_norms(build_solution(cfg, curve), cfg.samples))
    chain = check_apriori_chain(ests, stability=cfg.tol("apriori_stability"))
    report.extend(chain.checks)
    return report, {"constants": chain.constants, "estimates": [e.as_dict() for e in ests]}


def run_wolff(cfg: ExperimentConfig):
    report = Report(json.loads(cfg.to_text()))
    curve = parse_curve(cfg.curve)
    disc = discretize(curve, cfg.nodes)
    x_on = disc.nodes[cfg.node]
    deltas = 2.0 ** -np.arange(6, 13)
    w_on = np.array([wolff_potential(disc, x_on, d) for d in deltas])
    incr = np.diff(w_on) / (2.0 * math.log(2.0))
    report.add(check_le("logarithmic growth on the curve", "Wolff potential diverges logarithmically on the curve", float(np.max(np.abs(incr - 1.0))), cfg.tol("wolff")))
    x_off = x_on + 0.1 * disc.normals[cfg.node]
    w_off = np.array([wolff_potential(disc, x_off, d) for d in deltas])
    spread = float(np.ptp(w_off))
    report.add(check_le("finite off the curve", "Wolff potential is finite away from the curve", spread, 1e-12 * max(1.0, float(np.max(np.abs(w_off))))))
    return report, {"deltas": deltas, "on": w_on, "off": w_off}


def parse_radii(text: str) -> list[float]:
    """``2^-4..2^-12`` (inclusive powers of two) or a comma-separated list."""
    if ".." in text:
        a, b = text.split("..")
        ka = int(a.split("^")[1])
        kb = int(b.split("^")[1])
        step = -1 if kb < ka else 1
        return [2.0**k for k in range(ka, kb + step, step)]
    return [float(eval_power(p)) for p in text.split(",") if p.strip()]


def eval_power(s: str) -> float:
    s = s.strip()
    if "^" in s:
        b, e = s.split("^")
        return float(b) ** float(e)
    return float(s)


def run_counterexample(cfg: ExperimentConfig):
    report = Report(json.loads(cfg.to_text()))
    radii = sorted(cfg.radii, reverse=True)
    table, checks = counterexample_divergence(cfg.alpha, radii)
    report.extend(checks)
    return report, {"table": table}


def run_comparison(cfg: ExperimentConfig, epsilon: float = 0.1):
    report = Report(json.loads(cfg.to_text()))
    curve = parse_curve(cfg.curve)
    sol = build_solution(cfg, curve)

    def q_func(p):
        return _density_at(sol, p)

    res = []
    for n in (cfg.grid // 2, cfg.grid):
        g = build_grid(cfg, n)
        res.append(comparison_residual(curve, q_func, g, sol=sol, epsilon=epsilon))
    ratio_w = res[1].max_lap_w / res[0].max_lap_w
    ratio_v = res[1].max_lap_v / res[0].max_lap_v
    lo, hi = cfg.tol("comparison_ratio")
    report.add(Check("corrected Laplacian stays bounded", "distance correction cancels the kink", lo <= ratio_w <= hi, ratio_w, hi, lo))
    report.add(Check("raw Laplacian grows like 1/h", "potential is not twice differentiable across the curve", 1.7 <= ratio_v <= 2.3, ratio_v, 2.0, 0.3))
    return report, {"max_lap_w": [r.max_lap_w for r in res], "max_lap_v": [r.max_lap_v for r in res]}


def _density_at(sol: PotentialSolution, p: np.ndarray) -> np.ndarray:
    if sol.q.func is not None:
        return sol.q.func(p)
    return np.full(len(p), float(np.mean(sol.q.values)))


def run_grid_regularity(cfg: ExperimentConfig):
    """Gradient saturation and second-difference growth between ``grid`` and ``2 grid``."""
    report = Report(json.loads(cfg.to_text()))
    curve = parse_curve(cfg.curve)
    gm, sd, ratio_far = [], [], []
    for n in (cfg.grid, 2 * cfg.grid):
        f = grid_solution(cfg, n)
        g = f.grid
        d = _distance_to(curve, g)
        gr = discrete_gradient(f)
        gm.append(gradient_magnitude_max(gr, g.valid))
        sd.append(second_difference_max(f, np.abs(d) < 2.0 * g.h))
        far = g.interior & (np.abs(d) > 4.0 * g.h)
        near = g.interior & (np.abs(d) <= 6.0 * g.h)
        ratio_far.append(gradient_magnitude_max(gr, far) / gradient_magnitude_max(gr, near))
    change = abs(gm[1] - gm[0]) / gm[0]
    growth = sd[1] / sd[0]
    lo, hi = cfg.tol("second_difference_growth")
    report.add(check_le("gradient saturates", "potential is Lipschitz", change, cfg.tol("lipschitz_change")))
    report.add(Check("second differences grow like 1/h", "no bounded second derivatives", lo <= growth <= hi, growth, hi, lo))
    report.add(check_le("gradient maximum near the curve", "gradient sup is attained at the curve", max(ratio_far), 1.02))
    return report, {"grad_max": gm, "second_diff": sd}


def _distance_to(curve, g: Grid) -> np.ndarray:
    from .geometry import signed_distance_batch

    pts = g.points()
    inside = np.hypot(pts[:, 0], pts[:, 1]) <= 1.0 + 1e-12 if g.kind == "disk" else np.ones(len(pts), bool)
    d = np.full(len(pts), np.inf)
    d[inside], _ = signed_distance_batch(curve, pts[inside])
    return d.reshape(g.shape)


def run_mollify(cfg: ExperimentConfig):
    report = Report(json.loads(cfg.to_text()))
    circle = make_circle(0.5)
    disc = discretize(circle, cfg.nodes)
    dens = [
        Density.from_function(disc, lambda p: 1.0 + p[:, 0] ** 2),
        Density.from_function(disc, lambda p: np.cos(3.0 * np.arctan2(p[:, 1], p[:, 0]))),
        Density(np.where(disc.nodes[:, 1] > 0, 1.0, -0.5), disc, None),
    ]
    worst = -math.inf
    monotone = True
    eps = 2.0 ** -np.arange(2, 8)
    for k, q in enumerate(dens):
        l1 = []
        for e in eps:
            qe = mollify_density(q, e)
            worst = max(worst, qe.sup_norm - q.sup_norm)
            l1.append(qe.l1_distance(q))
        if k < 2:
            monotone &= bool(np.all(np.diff(l1) < 0))
    report.add(Check("smoothing never raises the sup norm", "mollified density keeps its bound", worst <= 0.0, worst, 0.0, 0.0))
    report.add(Check("L1 error decreases", "mollified density converges in L1", monotone, float(monotone), 1.0, 0.0))
    from .geometry import make_graph

    graph = make_graph(lambda x: np.abs(x - 0.25), lambda x: np.sign(x - 0.25), (-0.5, 0.5), name="kink")
    exact = surface_integral(graph, lambda p: p[:, 0] ** 2, breakpoints=(0.75,))
    errs = []
    for e in 2.0 ** -np.arange(4, 9):
        smooth = mollify_curve(graph, e)
        # the discrete kernel leaves slope jumps at shifted copies of the kink and the ends
        shifts = e * np.polynomial.legendre.leggauss(256)[0]
        kinks = np.concatenate([shifts, 0.75 + shifts, 1.0 + shifts])
        errs.append(abs(surface_integral(smooth, lambda p: p[:, 0] ** 2, breakpoints=kinks) - exact))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    report.add(Check("surface integral error halves", "surface integrals converge under curve smoothing", bool(np.all(np.abs(ratios - 2.0) <= 0.2)), float(np.max(np.abs(ratios - 2.0))), 0.2, 0.0))
    return report, {"errors": errs}


def run_altcaf(cfg: ExperimentConfig):
    report = Report(json.loads(cfg.to_text()))
    out = {}
    lip = []
    for n in (cfg.grid // 2, cfg.grid):
        g = Grid.square(n)
        st = ac.initial_state(g, cfg.u0, cfg.epsilon, dip=2.0 * cfg.u0)
        e0 = st.energy.total
        st, log = ac.minimize(st, max_steps=cfg.max_steps, rtol=0.0)
        energies = np.array([e0] + log.energies)
        report.add(Check(f"energy strictly decreasing [{n}]", "descent on the smoothed energy", bool(np.all(np.diff(energies) < 0)), float(np.max(np.diff(energies))), 0.0, 0.0))
        report.add(Check(f"descent stalled [{n}]", "discrete minimizer reached", bool(st.stalled), float(st.gradient_sup), 0.0, 0.0))
        fb = ac.extract_free_boundary(st.w)
        cc = ac.cross_check(st.w, fb=fb)
        report.add(Check(f"gradient bounded below on the free boundary [{n}]", "free boundary is non-degenerate", fb.min_grad > cfg.tol("altcaf_grad_floor"), fb.min_grad, cfg.tol("altcaf_grad_floor"), 0.0))
        report.add(Check(f"free boundary closed [{n}]", "negative phase is compactly contained", fb.is_closed, float(fb.is_closed), 1.0, 0.0))
        lip.append(cc.lipschitz_v1)
        out[f"state_{n}"] = st
        out[f"cross_{n}"] = cc
    change = abs(lip[1] - lip[0]) / lip[0]
    report.add(check_le("Laplacian of minimizer is Lipschitz", "Laplacian of the minimizer is Lipschitz", change, cfg.tol("altcaf_lipschitz")))
    # the synthetic tolerance is calibrated at 256 cells; coarser runs keep that floor
    gd = Grid.disk(max(cfg.grid, 256))
    w, _ = ac.synthetic_state(gd)
    cc = ac.cross_check(w)
    report.add(check_le("synthetic cross-check", "Laplacian of the minimizer solves the measure problem", cc.discrepancy, cfg.tol("altcaf_synthetic")))
    out["lipschitz"] = lip
    return report, out


RUNNERS = {
    "solve": run_solve,
    "radial": run_radial,
    "jump": run_jump,
    "blowup": run_blowup,
    "theta": run_theta,
    "traces": run_traces,
    "necessity": run_necessity,
    "apriori": run_apriori,
    "wolff": run_wolff,
    "counterexample": run_counterexample,
    "comparison": run_comparison,
    "regularity": run_grid_regularity,
    "mollify": run_mollify,
    "altcaf": run_altcaf,
}
