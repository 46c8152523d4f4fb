"""Logarithmic potentials of surface densities on planar curves.

A :class:`PotentialSolution` evaluates ``v(x) = int_Gamma K(x, y) Q(y) dH^1(y)``
with ``K`` either the free-space fundamental solution or the Green's function
of the unit disk.  Far from the curve the midpoint sum of the discretization is
used; close to it every parameter panel is integrated with 8-point Gauss and
bisected until it is shorter than half its distance to the target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import CurveDiscretization, Density, GeometryError, ball_measure

TWO_PI = 2.0 * math.pi
_GL8_X, _GL8_W = np.polynomial.legendre.leggauss(8)
_NEAR_FACTOR = 6.0
_MAX_LEVEL = 20
_CHUNK = 256


class SingularEvaluationError(ValueError):
    def __init__(self, x, index: int):
        self.x = np.asarray(x)
        self.index = index
        super().__init__(f"evaluation point {self.x} coincides with quadrature node {index}")


class ResolutionError(RuntimeError):
    pass


class ExtrapolationError(RuntimeError):
    def __init__(self, message: str, sequence: Sequence[float]):
        self.sequence = list(map(float, sequence))
        super().__init__(f"{message}; extrapolants {self.sequence}")


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def fundamental_solution(x: Sequence[float], n: int = 2) -> tuple[float, np.ndarray]:
    """Value and gradient of the Laplace fundamental solution (``-Lap F = delta``)."""
    x = np.asarray(x, dtype=float)
    r = float(np.linalg.norm(x))
    if r == 0.0:
        raise SingularEvaluationError(x, -1)
    if n == 2:
        return -math.log(r) / TWO_PI, -x / (TWO_PI * r * r)
    if n < 2:
        raise ValueError(f"dimension must be at least 2, got {n}")
    an = unit_ball_volume(n)
    return r ** (2 - n) / (n * (n - 2) * an), -x / (n * an * r**n)


def _log_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x[:, None, :] - y[None, :, :]
    return -np.log(d[..., 0] ** 2 + d[..., 1] ** 2) / (2.0 * TWO_PI)


def _log_kernel_grad(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x[:, None, :] - y[None, :, :]
    r2 = d[..., 0] ** 2 + d[..., 1] ** 2
    return -d / (TWO_PI * r2)[..., None]


def _image_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = np.sum(x * x, axis=-1)[:, None]
    yy = np.sum(y * y, axis=-1)[None, :]
    return np.log(xx * yy - 2.0 * x @ y.T + 1.0) / (2.0 * TWO_PI)


def _image_kernel_grad(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = np.sum(x * x, axis=-1)[:, None]
    yy = np.sum(y * y, axis=-1)[None, :]
    den = xx * yy - 2.0 * x @ y.T + 1.0
    num = yy[..., None] * x[:, None, :] - y[None, :, :]
    return num / (TWO_PI * den)[..., None]


def greens_disk(x: Sequence[float], y: Sequence[float]) -> float:
    """Dirichlet Green's function of the unit disk (image-charge form)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.dot(x, x) < 1.0 and np.dot(y, y) < 1.0):
        raise GeometryError("Green's function arguments must lie in the open unit disk")
    if np.array_equal(x, y):
        raise SingularEvaluationError(x, -1)
    return float(_log_kernel(x[None], y[None])[0, 0] + _image_kernel(x[None], y[None])[0, 0])


@dataclass(frozen=True)
class PotentialSolution:
    """``v = int K(., y) Q(y) dH^1(y)`` with ``domain`` in {"free-space", "unit-disk"}."""

    disc: CurveDiscretization
    q: Density
    domain: str = "free-space"
    method: str = "greens"
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.domain not in ("free-space", "unit-disk"):
            raise ValueError(f"unknown domain '{self.domain}'")
        if self.domain == "unit-disk" and np.max(np.hypot(*self.disc.nodes.T)) >= 1.0:
            raise GeometryError("curve is not compactly contained in the unit disk")

    # -- kernels -----------------------------------------------------------
    def _kernel(self, x, y):
        k = _log_kernel(x, y)
        if self.domain == "unit-disk":
            k = k + _image_kernel(x, y)
        return k

    def _kernel_grad(self, x, y):
        g = _log_kernel_grad(x, y)
        if self.domain == "unit-disk":
            g = g + _image_kernel_grad(x, y)
        return g

    # -- quadrature --------------------------------------------------------
    def _near_threshold(self) -> float:
        return _NEAR_FACTOR * self.disc.max_spacing

    def _always_panels(self) -> bool:
        return not self.disc.closed and self.disc.curve is not None

    def _gauss(self, lo, hi, panel):
        curve = self.disc.curve
        half = 0.5 * (hi - lo)
        t = (0.5 * (hi + lo))[:, None] + half[:, None] * _GL8_X
        t = t.ravel()
        pts = curve(t)
        d = curve.derivative(t)
        w = (half[:, None] * _GL8_W).ravel() * np.hypot(d[:, 0], d[:, 1])
        pan = np.repeat(panel, len(_GL8_X))
        qv = self.q.at(pts, pan) if self.q.func is not None else self.q.values[pan]
        return pts, w, qv

    def _panel_sum(self, x: np.ndarray, kernel, lo, hi, panel, singular_t=None, max_level=None):
        """Adaptive Gauss sum of ``kernel(x, y) Q(y)`` over parameter panels."""
        cap = max_level or (50 if singular_t is not None else _MAX_LEVEL)
        total = 0.0
        curve = self.disc.curve
        for level in range(cap + 1):
            pts, w, qv = self._gauss(lo, hi, panel)
            m = len(lo)
            ends = curve(np.concatenate([lo, hi]))
            dist = np.hypot(*(pts - x).T).reshape(m, -1).min(axis=1)
            dist = np.minimum(dist, np.hypot(*(ends - x).T).reshape(2, m).min(axis=0))
            length = w.reshape(m, -1).sum(axis=1)
            ok = length < 0.5 * dist
            if singular_t is not None:
                touching = (lo == singular_t) | (hi == singular_t)
                ok &= ~touching
            if level == cap:
                if singular_t is None:
                    ok[:] = True
                # panels touching the singular parameter are dropped at the cap
            sel = np.repeat(ok, len(_GL8_X))
            if sel.any():
                kv = kernel(x[None], pts[sel])[0]
                contrib = kv * (w[sel] * qv[sel])[..., None] if kv.ndim == 2 else kv * w[sel] * qv[sel]
                total = total + contrib.sum(axis=0)
            lo, hi, panel = lo[~ok], hi[~ok], panel[~ok]
            if lo.size == 0:
                break
            mid = 0.5 * (lo + hi)
            lo, hi, panel = np.concatenate([lo, mid]), np.concatenate([mid, hi]), np.concatenate([panel, panel])
        return total

    def _evaluate(self, points, gradient: bool):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        disc = self.disc
        kern = self._kernel_grad if gradient else self._kernel
        out = np.zeros((len(pts), 2)) if gradient else np.zeros(len(pts))
        mass = disc.weights * self.q.values
        near_all = self._always_panels()
        thr = self._near_threshold()
        panel_ids = np.arange(disc.n)
        for s in range(0, len(pts), _CHUNK):
            chunk = pts[s : s + _CHUNK]
            diff = chunk[:, None, :] - disc.nodes[None, :, :]
            dist = np.hypot(diff[..., 0], diff[..., 1])
            dmin = dist.min(axis=1)
            hit = np.flatnonzero(dmin == 0.0)
            if hit.size:
                j = int(np.argmin(dist[hit[0]]))
                raise SingularEvaluationError(chunk[hit[0]], j)
            near = np.full(len(chunk), True) if near_all else dmin < thr
            if disc.curve is None:
                near[:] = False
            far = ~near
            if far.any():
                k = kern(chunk[far], disc.nodes)
                if gradient:
                    out[s : s + _CHUNK][far] = np.einsum("pnk,n->pk", k, mass)
                else:
                    out[s : s + _CHUNK][far] = k @ mass
            for i in np.flatnonzero(near):
                out[s + i] = self._panel_sum(chunk[i], kern, disc.t_lo, disc.t_hi, panel_ids)
        return out

    def value(self, points) -> np.ndarray:
        """Potential at points off the curve (vectorized)."""
        return self._evaluate(points, gradient=False)

    def gradient(self, points) -> np.ndarray:
        """Gradient at points off the curve (vectorized), shape ``(m, 2)``."""
        return self._evaluate(points, gradient=True)

    def trace_value(self, t0: float) -> float:
        """Value at the curve point with parameter ``t0`` (the potential is continuous)."""
        disc = self.disc
        if disc.curve is None:
            raise ResolutionError("on-curve evaluation needs the parametrization")
        x = disc.curve(t0)[0]
        lo, hi = disc.t_lo.copy(), disc.t_hi.copy()
        k = int(np.searchsorted(hi, t0))
        k = min(k, disc.n - 1)
        panel = np.arange(disc.n)
        if lo[k] < t0 < hi[k]:
            lo = np.concatenate([lo, [t0]])
            hi = np.concatenate([hi, [hi[k]]])
            hi[k] = t0
            panel = np.concatenate([panel, [k]])
        return float(self._panel_sum(x, self._kernel, lo, hi, panel, singular_t=t0))

    def scaled(self, s: float) -> "PotentialSolution":
        return PotentialSolution(self.disc, s * self.q, self.domain, self.method)


def single_layer(disc: CurveDiscretization, q: Density, x) -> np.ndarray | float:
    """Free-space single-layer potential at one point or an array of points."""
    sol = PotentialSolution(disc, q, "free-space")
    v = sol.value(x)
    return float(v[0]) if np.ndim(x) == 1 else v


def solve_dirichlet_disk(disc: CurveDiscretization, q: Density, x=None):
    """Measure-data Dirichlet problem on the unit disk via its Green's function.

    Returns the evaluator when ``x`` is omitted, otherwise the value(s) at ``x``.
    """
    sol = PotentialSolution(disc, q, "unit-disk")
    if x is None:
        return sol
    v = sol.value(x)
    return float(v[0]) if np.ndim(x) == 1 else v


# ---------------------------------------------------------------------------
# One-sided normal derivatives
# ---------------------------------------------------------------------------

OFFSET_T0 = 0.05
OFFSET_LEVELS = 9


@dataclass(frozen=True)
class NormalDerivatives:
    outer: float
    inner: float
    jump: float
    pv_integral: float
    formula_outer: float
    formula_inner: float
    q0: float
    offsets: np.ndarray
    outer_samples: np.ndarray
    inner_samples: np.ndarray
    windows: np.ndarray
    pv_samples: np.ndarray

    @property
    def method_agreement(self) -> float:
        """Largest relative mismatch between offset extrapolation and the jump formula."""
        scale = max(abs(self.q0), 1e-300)
        return max(abs(self.outer - self.formula_outer), abs(self.inner - self.formula_inner)) / scale


def richardson_limit(samples: np.ndarray, rtol: float = 1e-3) -> float:
    """Limit of ``g(t_k)`` for ``t_k = t_0 2^{-k}`` and ``g = g0 + c1 t + c2 t^2 + ...``.

    Two Richardson stages; raises :class:`ExtrapolationError` unless the last two
    second-stage extrapolants agree to ``rtol (1 + |value|)``.
    """
    g = np.asarray(samples, dtype=float)
    r1 = 2.0 * g[1:] - g[:-1]
    r2 = (4.0 * r1[1:] - r1[:-1]) / 3.0
    if len(r2) < 2 or not np.all(np.isfinite(r2)):
        raise ExtrapolationError("too few finite samples", r2)
    value = float(r2[-1])
    if abs(r2[-1] - r2[-2]) >= rtol * (1.0 + abs(value)):
        raise ExtrapolationError("Richardson sequence did not settle", r2)
    return value


def one_sided_gradients(sol: PotentialSolution, x0, nu, t0=OFFSET_T0, levels=OFFSET_LEVELS):
    """Extrapolated limits of the gradient at ``x0 +- t nu``; returns (outer, inner) vectors."""
    x0 = np.asarray(x0, dtype=float)
    nu = np.asarray(nu, dtype=float)
    t = t0 * 0.5 ** np.arange(levels)
    g_out = sol.gradient(x0 + t[:, None] * nu)
    g_in = sol.gradient(x0 - t[:, None] * nu)
    outer = np.array([richardson_limit(g_out[:, c]) for c in range(2)])
    inner = np.array([richardson_limit(g_in[:, c]) for c in range(2)])
    return outer, inner, t, g_out, g_in


def _arc_offset_parameter(curve, t0: float, s: float, sign: int, t_ref: np.ndarray, s_ref: np.ndarray):
    """Parameter reached by moving arc length ``s`` from ``t0`` in direction ``sign``."""
    target = np.interp(t0, t_ref, s_ref) + sign * s
    t = float(np.interp(target, s_ref, t_ref, period=None))
    for _ in range(20):
        # Newton on the arc length measured by Gauss quadrature
        a, b = (t0, t) if t >= t0 else (t, t0)
        half = 0.5 * (b - a)
        tt = 0.5 * (a + b) + half * _GL8_X
        d = curve.derivative(tt)
        arc = float(np.sum(half * _GL8_W * np.hypot(d[:, 0], d[:, 1])))
        speed = float(np.hypot(*curve.derivative(t)[0]))
        err = arc - s
        t -= sign * err / speed
        if abs(err) < 1e-15:
            break
    return t


def _pv_window_integral(sol: PotentialSolution, i: int, window: float, nu0, x0) -> float:
    """``int`` over Gamma minus the arc window ``|s - s_i| < window`` of d_nu K * Q."""
    disc = sol.disc
    curve = disc.curve
    t_edges = np.concatenate([disc.t_lo, disc.t_hi[-1:]])
    s_edges = np.concatenate([[0.0], np.cumsum(disc.weights)])
    t_i = float(disc.params[i])
    period = disc.t_hi[-1] - disc.t_lo[0]
    if disc.closed:
        t_ext = np.concatenate([t_edges[:-1] - period, t_edges, t_edges[1:] + period])
        s_tot = s_edges[-1]
        s_ext = np.concatenate([s_edges[:-1] - s_tot, s_edges, s_edges[1:] + s_tot])
    else:
        t_ext, s_ext = t_edges, s_edges
    t_plus = _arc_offset_parameter(curve, t_i, window, +1, t_ext, s_ext)
    t_minus = _arc_offset_parameter(curve, t_i, window, -1, t_ext, s_ext)
    if disc.closed:
        pieces = [(t_plus, t_minus + period)]
    else:
        pieces = [(disc.t_lo[0], max(t_minus, disc.t_lo[0])), (min(t_plus, disc.t_hi[-1]), disc.t_hi[-1])]

    def kernel(x, y):
        return np.einsum("pnk,k->pn", sol._kernel_grad(x, y), nu0)

    total = 0.0
    for a, b in pieces:
        if b <= a:
            continue
        m = max(8, int(math.ceil(4 * disc.n * (b - a) / period)))
        edges = np.linspace(a, b, m + 1)
        lo, hi = edges[:-1], edges[1:]
        mid = 0.5 * (lo + hi)
        panel = np.clip(np.searchsorted(disc.t_hi, np.mod(mid - disc.t_lo[0], period) + disc.t_lo[0]), 0, disc.n - 1)
        pts, w, qv = sol._gauss(lo, hi, panel)
        if disc.closed:
            pts = curve(np.mod((0.5 * (hi + lo))[:, None] + 0.5 * (hi - lo)[:, None] * _GL8_X, period).ravel())
        total += float(np.sum(kernel(x0[None], pts)[0] * w * qv))
    return total


def normal_derivatives(
    sol: PotentialSolution, i: int, levels: int = 7, offset_t0: float = OFFSET_T0
) -> NormalDerivatives:
    """Outer/inner normal derivatives at node ``i`` by two independent routes.

    (a) the gradient at ``x_i +- t nu`` extrapolated to ``t = 0``;
    (b) the jump formula ``-+ Q/2 + PV int d_nu K Q``, with the principal value
    taken over symmetric arc windows ``2^{-k} L / 8`` extrapolated linearly to
    zero width.
    """
    disc = sol.disc
    if disc.curve is None:
        raise ResolutionError("normal derivatives need the parametrization")
    x0 = disc.nodes[i]
    nu0 = disc.normals[i]
    outer_v, inner_v, t, g_out, g_in = one_sided_gradients(sol, x0, nu0, offset_t0)
    outer = float(outer_v @ nu0)
    inner = float(inner_v @ nu0)
    q0 = float(sol.q.at(x0[None], np.array([i]))[0])
    length = disc.total_length
    windows = length / 8.0 * 0.5 ** np.arange(levels)
    pv = np.array([_pv_window_integral(sol, i, w, nu0, x0) for w in windows])
    # linear extrapolation through the two narrowest windows
    pv0 = float(pv[-1] - windows[-1] * (pv[-2] - pv[-1]) / (windows[-2] - windows[-1]))
    return NormalDerivatives(
        outer=outer,
        inner=inner,
        jump=outer - inner,
        pv_integral=pv0,
        formula_outer=-0.5 * q0 + pv0,
        formula_inner=0.5 * q0 + pv0,
        q0=q0,
        offsets=t,
        outer_samples=g_out @ nu0,
        inner_samples=g_in @ nu0,
        windows=windows,
        pv_samples=pv,
    )


# ---------------------------------------------------------------------------
# Wolff potential
# ---------------------------------------------------------------------------


def wolff_potential(
    disc: CurveDiscretization, x, delta: float, q: Optional[Density] = None, nodes_per_octave: int = 8
) -> float:
    """Truncated Wolff potential ``int_delta^1 mu(B_t(x)) / t^2 dt`` (plane, exponent 2).

    Composite Gauss rule in ``log t`` on octave panels ``[2^{-k-1}, 2^{-k}]``; the
    panel breakpoints do not depend on ``delta`` so differences between cutoffs
    are computed on identical nodes.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"cutoff must lie in (0, 1), got {delta}")
    gx, gw = np.polynomial.legendre.leggauss(nodes_per_octave)
    x = np.asarray(x, dtype=float)
    total = 0.0
    top = 0.0
    while top > math.log(delta) + 1e-14:
        bottom = max(top - math.log(2.0), math.log(delta))
        half = 0.5 * (top - bottom)
        us = 0.5 * (top + bottom) + half * gx
        for u, w in zip(us, gw):
            t = math.exp(u)
            total += half * w * ball_measure(disc, x, t, q) / t
        top -= math.log(2.0)
    return total
