"""Planar curves, their quadrature discretizations and surface-measure helpers.

Curves are described analytically through a parametrization ``gamma(t)`` on a
parameter interval (``t_range``, default ``[0, 1]``).  A discretization is a
midpoint rule on parameter panels; each node carries its arc-length weight and
a unit normal, so the pair (nodes, weights) is the discrete carrier of the
arc-length measure restricted to the curve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, optimize, special
from scipy.spatial import cKDTree

ArrayFn = Callable[[np.ndarray], np.ndarray]


class GeometryError(ValueError):
    """Invalid curve description or geometric precondition."""


class DegenerateParametrizationError(GeometryError):
    def __init__(self, index: int, message: str | None = None):
        self.index = index
        super().__init__(message or f"|gamma'| vanishes at node {index}")


class CoverageError(GeometryError):
    def __init__(self, point: np.ndarray, parameter: float):
        self.point = np.asarray(point)
        self.parameter = parameter
        super().__init__(f"curve point {self.point} (t={parameter:.6g}) lies in no chart")


class AmbiguousProjectionError(GeometryError):
    def __init__(self, x: np.ndarray, candidates: np.ndarray):
        self.x = np.asarray(x)
        self.candidates = np.asarray(candidates)
        super().__init__(
            f"{len(candidates)} equidistant projections of {self.x}; point is beyond the reach"
        )


class QuadratureError(RuntimeError):
    def __init__(self, message: str, level: int):
        self.level = level
        super().__init__(f"{message} (deepest refinement level {level})")


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphData:
    """Graph y = f(x), x in [a, b], placed by ``rotation @ (x, f(x)) + offset``."""

    f: ArrayFn
    df: ArrayFn
    a: float
    b: float
    d2f: Optional[ArrayFn] = None
    rotation: np.ndarray = field(default_factory=lambda: np.eye(2))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(2))


@dataclass(frozen=True)
class PlanarCurve:
    kind: str
    gamma: ArrayFn
    dgamma: ArrayFn
    d2gamma: Optional[ArrayFn] = None
    closed: bool = False
    length: Optional[float] = None
    rotation: Optional[np.ndarray] = None
    t_range: tuple[float, float] = (0.0, 1.0)
    singular: tuple[float, ...] = ()
    graph: Optional[GraphData] = None
    name: str = ""
    params: dict = field(default_factory=dict)

    def __call__(self, t) -> np.ndarray:
        return self.gamma(np.atleast_1d(np.asarray(t, dtype=float)))

    def derivative(self, t) -> np.ndarray:
        return self.dgamma(np.atleast_1d(np.asarray(t, dtype=float)))

    def restricted(self, t0: float, t1: float) -> "PlanarCurve":
        """Same curve on the parameter subinterval ``[t0, t1]`` (no longer closed)."""
        if not self.t_range[0] <= t0 < t1 <= self.t_range[1]:
            raise GeometryError(f"[{t0}, {t1}] is not inside {self.t_range}")
        return replace(self, t_range=(float(t0), float(t1)), closed=False, length=None)

    @property
    def orientation(self) -> int:
        """+1 for counterclockwise closed curves, -1 for clockwise."""
        if not self.closed:
            return 1
        t = np.linspace(*self.t_range, 2049)[:-1]
        p = self(t)
        area = 0.5 * np.sum(p[:, 0] * np.roll(p[:, 1], -1) - np.roll(p[:, 0], -1) * p[:, 1])
        return 1 if area > 0 else -1

    def normal(self, t) -> np.ndarray:
        """Unit normals: outward for closed curves, graph-frame +y for graphs."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.graph is not None:
            g = self.graph
            x = g.a + (t - 0.0) * (g.b - g.a)
            fp = g.df(x)
            n = np.stack([-fp, np.ones_like(fp)], axis=-1) / np.sqrt(1.0 + fp**2)[:, None]
            return n @ g.rotation.T
        d = self.derivative(t)
        speed = np.hypot(d[:, 0], d[:, 1])
        left = np.stack([-d[:, 1], d[:, 0]], axis=-1) / speed[:, None]
        if self.closed:
            # left normal of a counterclockwise curve points inward
            return -self.orientation * left
        return left

    def curvature(self, t) -> np.ndarray:
        """Signed curvature ``(gamma'' . nu) / |gamma'|^2``.

        With outward normals this is negative on convex closed curves
        (-1/rho on a circle of radius rho), which is the sign that makes
        ``Lap d = -k / (1 - k d)`` reproduce ``1/r`` outside a circle.
        """
        if self.d2gamma is None:
            raise GeometryError(f"curve '{self.name}' has no second derivative")
        t = np.atleast_1d(np.asarray(t, dtype=float))
        d1 = self.derivative(t)
        d2 = self.d2gamma(t)
        nu = self.normal(t)
        return np.sum(d2 * nu, axis=-1) / np.sum(d1 * d1, axis=-1)


def make_circle(radius: float, center: Sequence[float] = (0.0, 0.0)) -> PlanarCurve:
    if not radius > 0:
        raise GeometryError(f"circle radius must be positive, got {radius}")
    c = np.asarray(center, dtype=float)
    w = 2.0 * math.pi

    def gamma(t):
        return c + radius * np.stack([np.cos(w * t), np.sin(w * t)], axis=-1)

    def dgamma(t):
        return radius * w * np.stack([-np.sin(w * t), np.cos(w * t)], axis=-1)

    def d2gamma(t):
        return -radius * w * w * np.stack([np.cos(w * t), np.sin(w * t)], axis=-1)

    return PlanarCurve(
        kind="closed-analytic",
        gamma=gamma,
        dgamma=dgamma,
        d2gamma=d2gamma,
        closed=True,
        length=w * radius,
        name="circle",
        params={"rho": float(radius), "cx": float(c[0]), "cy": float(c[1])},
    )


def _rotation(angle: float) -> np.ndarray:
    ca, sa = math.cos(angle), math.sin(angle)
    return np.array([[ca, -sa], [sa, ca]])


def make_ellipse(
    a: float, b: float, center: Sequence[float] = (0.0, 0.0), angle: float = 0.0
) -> PlanarCurve:
    if not (a > 0 and b > 0):
        raise GeometryError(f"ellipse semi-axes must be positive, got {a}, {b}")
    c = np.asarray(center, dtype=float)
    R = _rotation(angle)
    w = 2.0 * math.pi

    def gamma(t):
        return c + np.stack([a * np.cos(w * t), b * np.sin(w * t)], axis=-1) @ R.T

    def dgamma(t):
        return w * np.stack([-a * np.sin(w * t), b * np.cos(w * t)], axis=-1) @ R.T

    def d2gamma(t):
        return -w * w * np.stack([a * np.cos(w * t), b * np.sin(w * t)], axis=-1) @ R.T

    hi, lo = max(a, b), min(a, b)
    length = 4.0 * hi * special.ellipe(1.0 - (lo / hi) ** 2)
    return PlanarCurve(
        kind="closed-analytic",
        gamma=gamma,
        dgamma=dgamma,
        d2gamma=d2gamma,
        closed=True,
        length=float(length),
        rotation=R if angle else None,
        name="ellipse",
        params={"a": float(a), "b": float(b), "cx": float(c[0]), "cy": float(c[1]), "angle": float(angle)},
    )


def make_graph(
    f: ArrayFn,
    df: ArrayFn,
    interval: tuple[float, float],
    d2f: Optional[ArrayFn] = None,
    rotation: Optional[np.ndarray] = None,
    offset: Sequence[float] = (0.0, 0.0),
    name: str = "graph",
    singular: tuple[float, ...] = (),
    params: Optional[dict] = None,
) -> PlanarCurve:
    """Graph curve ``t -> R (x(t), f(x(t))) + offset`` with ``x(t) = a + t (b - a)``."""
    a, b = map(float, interval)
    if not b > a:
        raise GeometryError(f"empty graph interval [{a}, {b}]")
    R = np.eye(2) if rotation is None else np.asarray(rotation, dtype=float)
    off = np.asarray(offset, dtype=float)
    span = b - a
    data = GraphData(f=f, df=df, a=a, b=b, d2f=d2f, rotation=R, offset=off)

    def gamma(t):
        x = a + t * span
        return np.stack([x, f(x)], axis=-1) @ R.T + off

    def dgamma(t):
        x = a + t * span
        return span * np.stack([np.ones_like(x), df(x)], axis=-1) @ R.T

    d2gamma = None
    if d2f is not None:

        def d2gamma(t):
            x = a + t * span
            return span * span * np.stack([np.zeros_like(x), d2f(x)], axis=-1) @ R.T

    rotated = rotation is not None and not np.allclose(R, np.eye(2))
    return PlanarCurve(
        kind="rotated-graph" if rotated else "graph",
        gamma=gamma,
        dgamma=dgamma,
        d2gamma=d2gamma,
        closed=False,
        rotation=R if rotated else None,
        singular=singular,
        graph=data,
        name=name,
        params=dict(params or {}),
    )


def counterexample_profile(alpha_prime: float):
    """``f(x) = x^(1+a) sin(1/x) / (1+a)`` with its first two derivatives."""
    a = float(alpha_prime)

    def f(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = x ** (1.0 + a) * np.sin(1.0 / x) / (1.0 + a)
        return np.where(x > 0, v, 0.0)

    def df(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = x**a * np.sin(1.0 / x) - x ** (a - 1.0) * np.cos(1.0 / x) / (1.0 + a)
        return np.where(x > 0, v, 0.0)

    def d2f(x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            s, c = np.sin(1.0 / x), np.cos(1.0 / x)
            v = (
                a * x ** (a - 1.0) * s
                - x ** (a - 2.0) * c
                - ((a - 1.0) * x ** (a - 2.0) * c + x ** (a - 3.0) * s) / (1.0 + a)
            )
        return np.where(x > 0, v, 0.0)

    return f, df, d2f


def make_counterexample_curve(alpha_prime: float) -> PlanarCurve:
    """Hoelder-but-not-Lipschitz graph on [0, 1]; parameter t equals x."""
    if not 0.0 < alpha_prime < 1.0:
        raise GeometryError(f"exponent must lie in (0, 1), got {alpha_prime}")
    f, df, d2f = counterexample_profile(alpha_prime)
    return make_graph(
        f,
        df,
        (0.0, 1.0),
        d2f=d2f,
        name="counterexample",
        singular=(0.0,),
        params={"alpha": float(alpha_prime)},
    )


def make_polyline(points: np.ndarray, closed: bool) -> PlanarCurve:
    """Piecewise-linear curve through ``points``; vertex k sits at t = k / segments."""
    pts = np.asarray(points, dtype=float)
    if closed and np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]
    verts = np.vstack([pts, pts[:1]]) if closed else pts
    m = len(verts) - 1
    if m < 1:
        raise GeometryError("polyline needs at least two vertices")
    seg = np.diff(verts, axis=0)

    def _locate(t):
        s = np.clip(np.asarray(t, dtype=float), 0.0, 1.0) * m
        k = np.minimum(np.floor(s).astype(int), m - 1)
        return k, s - k

    def gamma(t):
        k, u = _locate(t)
        return verts[k] + u[:, None] * seg[k]

    def dgamma(t):
        k, _ = _locate(t)
        return m * seg[k]

    def d2gamma(t):
        return np.zeros((np.size(t), 2))

    return PlanarCurve(
        kind="closed-analytic" if closed else "graph",
        gamma=gamma,
        dgamma=dgamma,
        d2gamma=d2gamma,
        closed=closed,
        length=float(np.sum(np.hypot(seg[:, 0], seg[:, 1]))),
        name="polyline",
        params={"segments": m},
    )


# ---------------------------------------------------------------------------
# Discretization and densities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurveDiscretization:
    nodes: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    t_lo: np.ndarray
    t_hi: np.ndarray
    curve: Optional[PlanarCurve] = None
    closed: bool = False

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def params(self) -> np.ndarray:
        return 0.5 * (self.t_lo + self.t_hi)

    @property
    def total_length(self) -> float:
        return float(np.sum(self.weights))

    @property
    def max_spacing(self) -> float:
        return float(np.max(self.weights))

    def arc_positions(self) -> np.ndarray:
        """Arc-length coordinate of each node measured from the first panel start."""
        return np.cumsum(self.weights) - 0.5 * self.weights

    def subset(self, index) -> "CurveDiscretization":
        idx = np.asarray(index)
        return CurveDiscretization(
            nodes=self.nodes[idx],
            normals=self.normals[idx],
            weights=self.weights[idx],
            t_lo=self.t_lo[idx],
            t_hi=self.t_hi[idx],
            curve=self.curve,
            closed=False,
        )


def _panel_geometry(curve: PlanarCurve, lo: np.ndarray, hi: np.ndarray):
    mid = 0.5 * (lo + hi)
    d = curve.derivative(mid)
    speed = np.hypot(d[:, 0], d[:, 1])
    return mid, speed * (hi - lo), speed


def discretize(curve: PlanarCurve, n: int, cutoff: Optional[float] = None) -> CurveDiscretization:
    """Midpoint-rule discretization with ``n`` parameter panels.

    ``cutoff`` raises the lower parameter bound; on curves whose lower end is a
    listed singular parameter the panels are then graded geometrically
    (``cutoff * (t1 / cutoff) ** (i / n)``) so the oscillation near the
    singular end stays resolved.
    """
    if n < 8:
        raise GeometryError(f"need at least 8 nodes, got {n}")
    t0, t1 = curve.t_range
    geometric = False
    if cutoff is not None:
        if not t0 <= cutoff < t1:
            raise GeometryError(f"cutoff {cutoff} outside parameter range {curve.t_range}")
        geometric = any(abs(s - t0) < 1e-15 for s in curve.singular) and cutoff > 0
        t0 = float(cutoff)
    elif any(abs(s - t0) < 1e-15 for s in curve.singular):
        raise GeometryError("curve is singular at its lower end; supply a parameter cutoff")
    i = np.arange(n + 1)
    if geometric:
        edges = t0 * (t1 / t0) ** (i / n)
    else:
        edges = t0 + (t1 - t0) * i / n
    lo, hi = edges[:-1], edges[1:]
    mid, weights, speed = _panel_geometry(curve, lo, hi)
    bad = np.flatnonzero(~(speed > 1e-300) | ~np.isfinite(speed))
    if bad.size:
        raise DegenerateParametrizationError(int(bad[0]))
    return CurveDiscretization(
        nodes=curve(mid),
        normals=curve.normal(mid),
        weights=weights,
        t_lo=lo,
        t_hi=hi,
        curve=curve,
        closed=curve.closed and cutoff is None,
    )


def concatenate(discs: Sequence[CurveDiscretization]) -> CurveDiscretization:
    """Join several components; the result carries no parametrization."""
    if len(discs) == 1:
        return discs[0]
    return CurveDiscretization(
        nodes=np.vstack([d.nodes for d in discs]),
        normals=np.vstack([d.normals for d in discs]),
        weights=np.concatenate([d.weights for d in discs]),
        t_lo=np.concatenate([d.t_lo for d in discs]),
        t_hi=np.concatenate([d.t_hi for d in discs]),
        curve=None,
        closed=all(d.closed for d in discs),
    )


@dataclass(frozen=True)
class Density:
    """Samples of Q at the nodes of ``disc``; ``func`` evaluates Q at arbitrary points."""

    values: np.ndarray
    disc: Optional[CurveDiscretization] = None
    func: Optional[ArrayFn] = None

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def __mul__(self, s: float) -> "Density":
        func = None if self.func is None else (lambda p, f=self.func: s * f(p))
        return Density(s * self.values, self.disc, func)

    __rmul__ = __mul__

    def at(self, points: np.ndarray, panel: Optional[np.ndarray] = None) -> np.ndarray:
        """Q at points on the curve; falls back to the owning panel's node value."""
        if self.func is not None:
            return np.broadcast_to(self.func(points), (len(points),)).astype(float)
        if panel is None:
            raise GeometryError("density has no point evaluator; pass the panel index")
        return self.values[panel]

    @classmethod
    def constant(cls, disc: CurveDiscretization, value: float) -> "Density":
        c = float(value)
        return cls(np.full(disc.n, c), disc, lambda p: np.full(len(p), c))

    @classmethod
    def from_function(cls, disc: CurveDiscretization, func: ArrayFn) -> "Density":
        return cls(np.asarray(func(disc.nodes), dtype=float), disc, func)

    def l1_distance(self, other: "Density") -> float:
        if self.disc is None:
            raise GeometryError("L1 distance needs the discretization weights")
        return float(np.sum(self.disc.weights * np.abs(self.values - other.values)))


def _bump(u: np.ndarray) -> np.ndarray:
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


def mollify_density(q: Density, epsilon: float) -> Density:
    """Arc-length convolution with a unit-mass bump of half-width ``epsilon``.

    The discrete kernel is renormalized at every node, so each smoothed value
    is a convex combination of the input samples; constants are reproduced and
    the sup norm can only drop.
    """
    if not epsilon > 0:
        raise GeometryError(f"smoothing length must be positive, got {epsilon}")
    disc = q.disc
    if disc is None:
        raise GeometryError("density is not attached to a discretization")
    s = disc.arc_positions()
    total = disc.total_length
    tree_pts = s[:, None]
    out = np.empty_like(q.values, dtype=float)
    if disc.closed:
        # periodic arc coordinate: replicate one period on each side
        ext_s = np.concatenate([s - total, s, s + total])
        ext_idx = np.tile(np.arange(disc.n), 3)
    else:
        ext_s, ext_idx = s, np.arange(disc.n)
    tree = cKDTree(ext_s[:, None])
    for i, nbrs in enumerate(tree.query_ball_point(tree_pts, r=epsilon)):
        nbrs = np.asarray(nbrs, dtype=int)
        k = _bump((ext_s[nbrs] - s[i]) / epsilon) * disc.weights[ext_idx[nbrs]]
        if k.sum() <= 0.0:
            out[i] = q.values[i]
            continue
        out[i] = np.dot(k, q.values[ext_idx[nbrs]]) / k.sum()
    # rounding in the weighted mean can overshoot the convex hull by an ulp
    np.clip(out, np.min(q.values), np.max(q.values), out=out)
    return Density(out, disc, None)


_GL_KERNEL_NODES, _GL_KERNEL_WEIGHTS = np.polynomial.legendre.leggauss(256)
_KERNEL_W = _GL_KERNEL_WEIGHTS * _bump(_GL_KERNEL_NODES)
_KERNEL_W = _KERNEL_W / _KERNEL_W.sum()


def mollify_curve(curve: PlanarCurve, epsilon: float) -> PlanarCurve:
    """Smooth a graph curve by convolving its profile with a bump of width ``epsilon``.

    The profile is extended by constants outside ``[a, b]``; both the profile and
    its slope are convolved with the same normalized discrete kernel, so the
    slope bound and ``|f_eps - f| <= Lip(f) * eps`` hold exactly.
    """
    if curve.graph is None:
        raise GeometryError("mollify_curve needs a graph curve")
    if not epsilon > 0:
        raise GeometryError(f"smoothing length must be positive, got {epsilon}")
    g = curve.graph
    shifts = epsilon * _GL_KERNEL_NODES

    def clamp(x):
        return np.clip(x, g.a, g.b)

    def f_ext(x):
        return g.f(clamp(x))

    def df_ext(x):
        inside = (x >= g.a) & (x <= g.b)
        return np.where(inside, g.df(clamp(x)), 0.0)

    def conv(fn):
        def smoothed(x):
            x = np.asarray(x, dtype=float)
            vals = fn((x[..., None] - shifts).ravel()).reshape(x.shape + shifts.shape)
            return vals @ _KERNEL_W

        return smoothed

    return make_graph(
        conv(f_ext),
        conv(df_ext),
        (g.a, g.b),
        rotation=g.rotation if curve.rotation is not None else None,
        offset=g.offset,
        name=f"{curve.name}-mollified",
        params={**curve.params, "epsilon": float(epsilon)},
    )


def surface_integral(
    curve: PlanarCurve, g: ArrayFn, breakpoints: Sequence[float] = (), t_range=None
) -> float:
    """Adaptive quadrature of ``int_curve g dH^1`` in the parameter variable."""
    t0, t1 = t_range or curve.t_range

    def integrand(t):
        p = curve(t)
        d = curve.derivative(t)
        return float(g(p)[0] * np.hypot(d[0, 0], d[0, 1]))

    pts = sorted(b for b in breakpoints if t0 < b < t1)
    edges = [t0, *pts, t1]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, _ = integrate.quad(integrand, lo, hi, limit=400, epsabs=1e-13, epsrel=1e-12)
        total += val
    return total


# ---------------------------------------------------------------------------
# Measures of balls
# ---------------------------------------------------------------------------


def ball_measure(
    disc: CurveDiscretization,
    x: Sequence[float],
    r: float,
    q: Optional[Density] = None,
    max_depth: int = 20,
) -> float:
    """``int_{B_r(x) cap Gamma} |Q| dH^1`` (``Q = 1`` when ``q`` is omitted).

    Panels that may straddle the sphere ``|y - x| = r`` are bisected in the
    parameter, up to ``max_depth`` levels, when the discretization still knows
    its curve; leaves are decided by their midpoint.
    """
    if not r > 0:
        raise GeometryError(f"radius must be positive, got {r}")
    x = np.asarray(x, dtype=float)
    qabs = np.ones(disc.n) if q is None else np.abs(np.asarray(q.values, dtype=float))
    dist = np.hypot(*(disc.nodes - x).T)
    margin = 0.75 * disc.weights
    inside = dist + margin < r
    unsure = ~inside & (dist - margin < r)
    total = float(np.sum(disc.weights[inside] * qabs[inside]))
    if not unsure.any():
        return total
    if disc.curve is None:
        sel = unsure & (dist < r)
        return total + float(np.sum(disc.weights[sel] * qabs[sel]))
    curve = disc.curve
    lo, hi = disc.t_lo[unsure], disc.t_hi[unsure]
    panel = np.flatnonzero(unsure)
    for depth in range(1, max_depth + 1):
        mid = 0.5 * (lo + hi)
        lo = np.concatenate([lo, mid])
        hi = np.concatenate([mid, hi])
        panel = np.concatenate([panel, panel])
        c, w, _ = _panel_geometry(curve, lo, hi)
        pts = curve(c)
        qv = qabs[panel] if (q is None or q.func is None) else np.abs(q.func(pts))
        d = np.hypot(*(pts - x).T)
        m = 0.75 * w
        fin = d + m < r
        total += float(np.sum(w[fin] * qv[fin]))
        still = ~fin & (d - m < r)
        if depth == max_depth or np.count_nonzero(still) > 65536:
            # leaf decision by midpoint; also stops curves that run along the sphere
            sel = still & (d < r)
            total += float(np.sum(w[sel] * qv[sel]))
            break
        lo, hi, panel = lo[still], hi[still], panel[still]
        if lo.size == 0:
            break
    return total


def _counterexample_zeros(alpha: float, s_lo: float, s_hi: float) -> np.ndarray:
    """Zeros of ``sin s - s cos s / (1 + alpha)`` in (s_lo, s_hi), i.e. of f'(1/s)."""
    c = 1.0 + alpha
    k0 = max(1, int(math.floor(s_lo / math.pi)) - 1)
    k1 = int(math.ceil(s_hi / math.pi)) + 1
    k = np.arange(k0, k1 + 1, dtype=float)
    base = k * math.pi + 0.5 * math.pi
    s = base - c / base
    for _ in range(30):
        g = np.sin(s) - s * np.cos(s) / c
        dg = np.cos(s) - (np.cos(s) - s * np.sin(s)) / c
        step = g / dg
        s = np.clip(s - step, base - 0.5 * math.pi, base)
        if np.max(np.abs(step)) < 1e-14 * max(1.0, s_hi):
            break
    return s[(s > s_lo) & (s < s_hi)]


_GL24 = np.polynomial.legendre.leggauss(24)


def counterexample_arc_length(
    alpha_prime: float, a: float, b: float, s_cut: float = 2.0e5
) -> float:
    """Arc length of the counterexample graph over ``x in [a, b]`` (``a`` may be 0).

    Integrates ``sqrt(1 + f'(1/s)^2) / s^2`` in ``s = 1/x``, one oscillation at a
    time between consecutive zeros of ``f'``.  Beyond ``s_cut`` the oscillation is
    replaced by its mean ``2/pi`` times the slope envelope, whose relative error
    is of order ``1/s_cut``.
    """
    al = float(alpha_prime)
    if not 0.0 <= a < b:
        raise GeometryError(f"bad interval [{a}, {b}]")
    c = 1.0 + al
    s_lo = 1.0 / b
    s_hi = math.inf if a == 0.0 else 1.0 / a
    s_mid = min(s_hi, max(s_cut, s_lo))

    def integrand(s):
        fp = s ** (-al) * np.sin(s) - s ** (1.0 - al) * np.cos(s) / c
        return np.sqrt(1.0 + fp * fp) / (s * s)

    total = 0.0
    if s_mid > s_lo:
        edges = np.concatenate([[s_lo], _counterexample_zeros(al, s_lo, s_mid), [s_mid]])
        lo, hi = edges[:-1], edges[1:]
        xg, wg = _GL24
        half = 0.5 * (hi - lo)
        pts = (0.5 * (hi + lo))[:, None] + half[:, None] * xg
        total += float(np.sum(half * (integrand(pts) @ wg)))
    if s_hi > s_mid:
        # tail in x = u**(1/alpha), where the envelope becomes bounded in u
        def envelope(u):
            x = u ** (1.0 / al)
            amp = math.sqrt(x ** (2 * al) + x ** (2 * al - 2) / (c * c))
            return (2.0 / math.pi) * amp * x ** (1.0 - al) / al

        u_lo = 0.0 if math.isinf(s_hi) else s_hi ** (-al)
        tail, err = integrate.quad(envelope, u_lo, s_mid ** (-al), limit=200)
        if not np.isfinite(tail) or err > 1e-8 * max(1.0, abs(tail)):
            raise QuadratureError("tail quadrature failed near x = 0", level=int(math.log2(s_mid)))
        total += tail
    return total


def counterexample_ball_measure(alpha_prime: float, r: float) -> float:
    """``H^1(Gamma cap B_r(0))`` for the counterexample graph, by adaptive arc quadrature."""
    if not r > 0:
        raise GeometryError(f"radius must be positive, got {r}")
    f, _, _ = counterexample_profile(alpha_prime)
    if r >= math.sqrt(2.0):
        return counterexample_arc_length(alpha_prime, 0.0, 1.0)
    # |f(x)| <= x, so [0, r/sqrt 2] lies inside the ball; x > r lies outside
    x_in = min(r / math.sqrt(2.0), 1.0)
    total = counterexample_arc_length(alpha_prime, 0.0, x_in)
    x_hi = min(r, 1.0)
    if x_hi <= x_in:
        return total

    def g(x):
        return x * x + f(x) ** 2 - r * r

    m = int(2000 + 8.0 / r)
    xs = np.linspace(x_in, x_hi, m)
    gs = g(xs)
    roots = [x_in]
    for i in np.flatnonzero(np.sign(gs[:-1]) * np.sign(gs[1:]) < 0):
        roots.append(optimize.brentq(g, xs[i], xs[i + 1], xtol=1e-15))
    roots.append(x_hi)
    for lo, hi in zip(roots[:-1], roots[1:]):
        if g(np.array([0.5 * (lo + hi)]))[0] < 0:
            total += counterexample_arc_length(alpha_prime, lo, hi)
    return total


def counterexample_lower_bound(alpha_prime: float, r: float) -> float:
    """Closed-form lower bound ``pi / (8 (1+a)) * (sqrt 2 / r + pi/2) ** (-a)``."""
    a = float(alpha_prime)
    return math.pi / (8.0 * (1.0 + a)) * (math.sqrt(2.0) / r + 0.5 * math.pi) ** (-a)


# ---------------------------------------------------------------------------
# Lipschitz constant of a chart cover
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Chart:
    """Box ``origin + R([x0, x1] x [y0, y1])`` in which the curve is a graph over x."""

    rotation: np.ndarray
    origin: np.ndarray
    x_range: tuple[float, float]
    y_range: tuple[float, float]

    def local(self, p: np.ndarray) -> np.ndarray:
        return (p - self.origin) @ self.rotation

    def contains(self, p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        q = self.local(p)
        return (
            (q[:, 0] >= self.x_range[0] - tol)
            & (q[:, 0] <= self.x_range[1] + tol)
            & (q[:, 1] >= self.y_range[0] - tol)
            & (q[:, 1] <= self.y_range[1] + tol)
        )


def circle_charts(radius: float, center=(0.0, 0.0), count: int = 4) -> list[Chart]:
    """``count`` rotated graph charts of half-aperture ``pi / count`` covering a circle."""
    c = np.asarray(center, dtype=float)
    half = math.pi / count
    charts = []
    for k in range(count):
        phi = 2.0 * math.pi * k / count
        # local y axis along the outward radius at angle phi
        R = _rotation(phi - 0.5 * math.pi)
        w = radius * math.sin(half)
        charts.append(Chart(R, c, (-w, w), (0.0, 2.0 * radius)))
    return charts


def lipschitz_constant_estimate(
    curve: PlanarCurve, charts: Sequence[Chart], samples: int = 8192
) -> float:
    """Sum over charts of ``sqrt(1 + slope^2)``, slope = sampled sup of |f'| in the chart."""
    t0, t1 = curve.t_range
    t = np.linspace(t0, t1, samples + 1)
    if curve.singular and t0 in curve.singular:
        t = t[1:]
    p = curve(t)
    d = curve.derivative(t)
    covered = np.zeros(len(t), dtype=bool)
    total = 0.0
    for ch in charts:
        inside = ch.contains(p)
        covered |= inside
        if not inside.any():
            total += 1.0
            continue
        dl = d[inside] @ ch.rotation
        with np.errstate(divide="ignore"):
            slope = np.abs(dl[:, 1] / dl[:, 0])
        total += math.sqrt(1.0 + float(np.max(slope)) ** 2)
    if not covered.all():
        i = int(np.flatnonzero(~covered)[0])
        raise CoverageError(p[i], float(t[i]))
    return total


# ---------------------------------------------------------------------------
# Signed distance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SignedDistanceSample:
    d: float
    projection: np.ndarray
    curvature: float
    parameter: float


def _newton_project(curve: PlanarCurve, x: np.ndarray, t: np.ndarray, iters: int = 40) -> np.ndarray:
    t0, t1 = curve.t_range
    period = t1 - t0
    for _ in range(iters):
        g = curve(t) - x
        d1 = curve.derivative(t)
        f = np.sum(g * d1, axis=-1)
        fp = np.sum(d1 * d1, axis=-1)
        if curve.d2gamma is not None:
            fp = fp + np.sum(g * curve.d2gamma(t), axis=-1)
        fp = np.where(fp > 1e-3 * np.sum(d1 * d1, axis=-1), fp, np.sum(d1 * d1, axis=-1))
        step = f / fp
        step = np.clip(step, -0.05 * period, 0.05 * period)
        t = t - step
        if curve.closed:
            t = t0 + np.mod(t - t0, period)
        else:
            t = np.clip(t, t0, t1)
        if np.max(np.abs(step)) < 1e-15 * period:
            break
    return t


def _coarse_samples(curve: PlanarCurve, m: int):
    t0, t1 = curve.t_range
    if curve.closed:
        t = t0 + (t1 - t0) * np.arange(m) / m
    else:
        t = np.linspace(t0, t1, m)
        if curve.singular and t0 in curve.singular:
            t[0] = t0 + 1e-9 * (t1 - t0)
    return t, curve(t)


def project_points(curve: PlanarCurve, points: np.ndarray, samples: int = 4096) -> np.ndarray:
    """Nearest-point parameters for many points (no ambiguity check)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    t, p = _coarse_samples(curve, samples)
    _, idx = cKDTree(p).query(pts)
    return _newton_project(curve, pts, t[idx])


def signed_distance_batch(curve: PlanarCurve, points: np.ndarray, samples: int = 4096):
    """Vectorized signed distance (negative inside) and projection parameters."""
    if not curve.closed:
        raise GeometryError("signed distance needs a closed curve")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    t = project_points(curve, pts, samples)
    proj = curve(t)
    diff = pts - proj
    dist = np.hypot(diff[:, 0], diff[:, 1])
    side = np.sign(np.sum(diff * curve.normal(t), axis=-1))
    return side * dist, t


def signed_distance(curve: PlanarCurve, x: Sequence[float], samples: int = 4096) -> SignedDistanceSample:
    """Signed distance to a closed curve with projection and curvature at the foot point."""
    if not curve.closed:
        raise GeometryError("signed distance needs a closed curve")
    x = np.asarray(x, dtype=float)
    t, p = _coarse_samples(curve, samples)
    dist = np.hypot(*(p - x).T)
    prev, nxt = np.roll(dist, 1), np.roll(dist, -1)
    cand = np.flatnonzero((dist <= prev) & (dist <= nxt))
    scale = max(float(np.max(dist)), 1e-300)
    if len(cand) > 64:
        # many tied samples: the whole curve is (nearly) equidistant
        spread = np.ptp(dist[cand])
        if spread < 1e-9 * scale:
            raise AmbiguousProjectionError(x, p[cand[:8]])
        cand = cand[np.argsort(dist[cand])[:64]]
    tc = _newton_project(curve, np.broadcast_to(x, (len(cand), 2)), t[cand])
    pc = curve(tc)
    dc = np.hypot(*(pc - x).T)
    best = int(np.argmin(dc))
    rivals = (np.abs(dc - dc[best]) <= 1e-9 * scale) & (np.hypot(*(pc - pc[best]).T) > 1e-6 * scale)
    if rivals.any():
        raise AmbiguousProjectionError(x, np.vstack([pc[best], pc[rivals]]))
    tb = float(tc[best])
    nu = curve.normal(tb)[0]
    sgn = float(np.sign(np.dot(x - pc[best], nu)))
    kappa = float(curve.curvature(tb)[0]) if curve.d2gamma is not None else float("nan")
    return SignedDistanceSample(d=sgn * float(dc[best]), projection=pc[best], curvature=kappa, parameter=tb)


# ---------------------------------------------------------------------------
# Mini-language for curves and densities
# ---------------------------------------------------------------------------


def _kv(parts: Sequence[str]) -> dict[str, str]:
    out = {}
    for part in parts:
        if "=" not in part:
            raise GeometryError(f"expected key=value, got '{part}'")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _expr_fn(text: str, variables: Sequence[str]):
    import sympy as sp

    syms = sp.symbols(" ".join(variables))
    syms = syms if isinstance(syms, tuple) else (syms,)
    expr = sp.sympify(text.replace("^", "**"), locals={v: s for v, s in zip(variables, syms)})
    return expr, syms


def parse_curve(spec: str) -> PlanarCurve:
    """Build a curve from ``kind:key=value,...`` text.

    Grammar (ASCII, comma separated)::

        circle:rho=R[,cx=X,cy=Y]
        ellipse:a=A,b=B[,cx=X,cy=Y,angle=RAD]
        graph:counterexample,alpha=A
        graph:expr,f=<expression in x>,a=X0,b=X1[,angle=RAD,ox=X,oy=Y]

    Expressions may not contain commas.
    """
    if ":" not in spec:
        raise GeometryError(f"curve spec '{spec}' lacks a kind prefix")
    kind, rest = spec.split(":", 1)
    parts = [p for p in rest.split(",") if p.strip()]
    try:
        if kind == "circle":
            kv = _kv(parts)
            return make_circle(float(kv["rho"]), (float(kv.get("cx", 0)), float(kv.get("cy", 0))))
        if kind == "ellipse":
            kv = _kv(parts)
            return make_ellipse(
                float(kv["a"]),
                float(kv["b"]),
                (float(kv.get("cx", 0)), float(kv.get("cy", 0))),
                float(kv.get("angle", 0)),
            )
        if kind == "graph":
            sub, kv = parts[0], _kv(parts[1:])
            if sub == "counterexample":
                return make_counterexample_curve(float(kv["alpha"]))
            if sub == "expr":
                import sympy as sp

                expr, (xs,) = _expr_fn(kv["f"], ["x"])
                f = sp.lambdify(xs, expr, "numpy")
                df = sp.lambdify(xs, sp.diff(expr, xs), "numpy")
                d2f = sp.lambdify(xs, sp.diff(expr, xs, 2), "numpy")

                def vec(fn):
                    return lambda x: np.broadcast_to(fn(np.asarray(x, dtype=float)), np.shape(x)).astype(float)

                angle = float(kv.get("angle", 0))
                return make_graph(
                    vec(f),
                    vec(df),
                    (float(kv["a"]), float(kv["b"])),
                    d2f=vec(d2f),
                    rotation=_rotation(angle) if angle else None,
                    offset=(float(kv.get("ox", 0)), float(kv.get("oy", 0))),
                    name="expr",
                    params={"f": kv["f"]},
                )
    except KeyError as exc:
        raise GeometryError(f"curve spec '{spec}' is missing {exc}") from None
    raise GeometryError(f"unknown curve kind in '{spec}'")


def parse_density(spec: str) -> Callable[[CurveDiscretization], Density]:
    """``const:c`` or ``expr:<expression in x, y>``; returns a builder over a discretization."""
    kind, _, body = spec.partition(":")
    if kind == "const":
        c = float(body)
        return lambda disc: Density.constant(disc, c)
    if kind == "expr":
        import sympy as sp

        text = body.replace("x1", "x").replace("x2", "y")
        expr, syms = _expr_fn(text, ["x", "y"])
        fn = sp.lambdify(syms, expr, "numpy")

        def func(p):
            p = np.atleast_2d(p)
            return np.broadcast_to(fn(p[:, 0], p[:, 1]), (len(p),)).astype(float)

        return lambda disc: Density.from_function(disc, func)
    raise GeometryError(f"unknown density spec '{spec}'")
