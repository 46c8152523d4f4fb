"""Discrete biharmonic free-boundary energy ``int (Lap w)^2 + |{w > 0}|``.

The volume term is smoothed by a cubic ramp of half-width ``eps``.  Boundary
values are pinned on the Dirichlet ring; slopes stay free, and the bending
term is summed over interior nodes only, so the natural condition
``Lap w = 0`` on the boundary emerges from stationarity.

At a stationary point the interior optimality system reads
``-Lap_h(Lap_h w) = H_eps'(w) / 2`` with ``Lap_h w = 0`` on the ring, i.e.
``v = Lap_h w`` solves the measure-data problem with density ``1 / (2|grad w|)``
carried by the zero level set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .geometry import CurveDiscretization, Density
from .grid_solver import (
    Field,
    Grid,
    deposit_measure,
    discrete_gradient,
    discrete_laplacian,
    solve_poisson,
)
from .regularity import lipschitz_seminorm

ARMIJO = 1e-4
STEP_FLOOR = 2.0**-40
GRADIENT_FLOOR = 1e-10


class DescentError(FloatingPointError):
    pass


class ExtractionError(ValueError):
    pass


def smoothed_heaviside(t: np.ndarray, eps: float) -> np.ndarray:
    s = np.clip((np.asarray(t) + eps) / (2.0 * eps), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def smoothed_heaviside_prime(t: np.ndarray, eps: float) -> np.ndarray:
    s = (np.asarray(t) + eps) / (2.0 * eps)
    inside = (s > 0.0) & (s < 1.0)
    return np.where(inside, 6.0 * s * (1.0 - s) / (2.0 * eps), 0.0)


def volume_weights(grid: Grid) -> np.ndarray:
    """Trapezoid weights on the square, interior nodes only on the disk."""
    if "vol_w" not in grid._cache:
        if grid.kind == "square":
            w1 = np.ones(grid.n + 1)
            w1[0] = w1[-1] = 0.5
            w = np.outer(w1, w1)
        else:
            w = grid.interior.astype(float)
        grid._cache["vol_w"] = w * grid.h**2
    return grid._cache["vol_w"]


def _lu(grid: Grid):
    if "lu" not in grid._cache:
        grid._cache["lu"] = spla.splu(grid.laplacian_matrix().tocsc())
    return grid._cache["lu"]


@dataclass(frozen=True)
class EnergyParts:
    total: float
    bending: float
    volume: float


@dataclass(frozen=True)
class AltCafState:
    w: Field
    boundary: Field
    epsilon: float
    energy: EnergyParts
    iteration: int = 0
    accepted: int = 0
    step: float = 1.0
    stalled: bool = False
    gradient_sup: float = math.inf

    @property
    def grid(self) -> Grid:
        return self.w.grid


def energy(w: Field, epsilon: float) -> EnergyParts:
    """Bending ``h^2 sum_interior (Lap_h w)^2`` plus smoothed positivity volume."""
    if not epsilon > 0:
        raise ValueError(f"smoothing width must be positive, got {epsilon}")
    g = w.grid
    lap = discrete_laplacian(w).values
    bending = float(g.h**2 * np.sum(lap[g.interior] ** 2))
    volume = float(np.sum(volume_weights(g) * smoothed_heaviside(w.values, epsilon)))
    return EnergyParts(bending + volume, bending, volume)


def energy_gradient(w: Field, epsilon: float) -> np.ndarray:
    """Gradient with respect to the interior nodal values (zero on the Dirichlet ring)."""
    g = w.grid
    lap = discrete_laplacian(w)  # zero outside the interior
    # adjoint of the interior Laplacian applied to 2 h^2 lap
    try:
        grad = 2.0 * g.h**2 * discrete_laplacian(lap).values
    except ValueError as exc:
        raise DescentError("non-finite energy gradient") from exc
    grad += volume_weights(g) * smoothed_heaviside_prime(w.values, epsilon)
    return np.where(g.interior, grad, 0.0)


def _precondition(grid: Grid, grad: np.ndarray) -> np.ndarray:
    """Apply ``(2 h^2 A^2)^{-1}`` with ``A = -Lap_h`` on the interior unknowns."""
    lu = _lu(grid)
    m = grid.interior
    y = lu.solve(lu.solve(grad[m])) / (2.0 * grid.h**2)
    out = np.zeros(grid.shape)
    out[m] = y
    return out


def make_state(w: Field, epsilon: float, boundary: Optional[Field] = None) -> AltCafState:
    if boundary is None:
        boundary = Field(w.grid, np.where(w.grid.interior, 0.0, w.values))
    values = np.where(w.grid.interior, w.values, boundary.values)
    wf = Field(w.grid, values)
    return AltCafState(wf, boundary, float(epsilon), energy(wf, epsilon))


def initial_state(grid: Grid, u0: float, epsilon: Optional[float] = None, dip: float = 0.0) -> AltCafState:
    """``w = u0 - dip * b`` with ``b`` a unit bump vanishing on the boundary."""
    if not u0 > 0:
        raise ValueError(f"boundary data must be positive, got {u0}")
    X, Y = grid.coords()
    if grid.kind == "square":
        L = grid.side
        bump = np.sin(math.pi * (X - grid.x0) / L) * np.sin(math.pi * (Y - grid.y0) / L)
    else:
        bump = np.clip(1.0 - X**2 - Y**2, 0.0, None)
    w = Field(grid, np.where(grid.interior, u0 - dip * bump, u0))
    state = make_state(w, epsilon if epsilon is not None else 2.0 * grid.h, Field(grid, np.full(grid.shape, float(u0))))
    # cautious first trial step: a full step on the bending part alone would
    # flatten the initial dip before the volume term can act
    return replace(state, step=1.0 / 16.0)


def descent_step(state: AltCafState) -> AltCafState:
    """One preconditioned gradient step with Armijo backtracking (halving)."""
    g = energy_gradient(state.w, state.epsilon)
    if not np.all(np.isfinite(g)):
        raise DescentError("non-finite energy gradient")
    gsup = float(np.max(np.abs(g)))
    if gsup < GRADIENT_FLOOR:
        return replace(state, stalled=True, gradient_sup=gsup, iteration=state.iteration + 1)
    p = -_precondition(state.grid, g)
    slope = float(np.sum(g * p))
    alpha = min(1.0, 2.0 * state.step)
    e0 = state.energy.total
    while alpha >= STEP_FLOOR:
        trial = Field(state.grid, state.w.values + alpha * p)
        e = energy(trial, state.epsilon)
        if e.total <= e0 + ARMIJO * alpha * slope and e.total < e0:
            return replace(
                state,
                w=trial,
                energy=e,
                iteration=state.iteration + 1,
                accepted=state.accepted + 1,
                step=alpha,
                stalled=False,
                gradient_sup=gsup,
            )
        alpha *= 0.5
    return replace(state, stalled=True, gradient_sup=gsup, iteration=state.iteration + 1)


@dataclass
class MinimizationLog:
    energies: list = field(default_factory=list)
    epsilons: list = field(default_factory=list)
    displacements: list = field(default_factory=list)
    steps: int = 0


def minimize(
    state: AltCafState,
    max_steps: int = 2000,
    rtol: float = 1e-13,
    continuation: int = 0,
    log: Optional[MinimizationLog] = None,
) -> tuple[AltCafState, MinimizationLog]:
    """Descend until the line search stalls, the relative energy decrease drops
    below ``rtol`` for five consecutive steps, or ``max_steps`` is reached.

    With ``continuation > 0`` the smoothing width is halved that many times,
    each stage restarting from the previous minimizer; the free-boundary
    displacement between stages is recorded.
    """
    log = log or MinimizationLog()
    prev_curve = None
    for stage in range(continuation + 1):
        if stage:
            state = make_state(state.w, 0.5 * state.epsilon, state.boundary)
        log.epsilons.append(state.epsilon)
        quiet = 0
        for _ in range(max_steps):
            nxt = descent_step(state)
            log.steps += 1
            if nxt.stalled:
                state = nxt
                break
            drop = (state.energy.total - nxt.energy.total) / max(abs(state.energy.total), 1e-300)
            state = nxt
            log.energies.append(state.energy.total)
            quiet = quiet + 1 if drop < rtol or drop == 0 else 0
            if quiet >= 5:
                break
        if continuation:
            try:
                fb = extract_free_boundary(state.w)
                pts = fb.disc.nodes
            except ExtractionError:
                pts = np.zeros((0, 2))
            if prev_curve is not None:
                log.displacements.append(hausdorff(prev_curve, pts))
            prev_curve = pts
    return state, log


def hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    if len(a) == 0 or len(b) == 0:
        return math.inf if len(a) != len(b) else 0.0
    return float(max(cKDTree(b).query(a)[0].max(), cKDTree(a).query(b)[0].max()))


# ---------------------------------------------------------------------------
# Free boundary
# ---------------------------------------------------------------------------


@dataclass
class FreeBoundary:
    polylines: list
    closed: list
    disc: CurveDiscretization
    q: Density
    grad_norm: np.ndarray
    min_grad: float
    capped: int
    degenerate_cells: int

    @property
    def is_closed(self) -> bool:
        return bool(self.closed) and all(self.closed)


# cell corners in counterclockwise order and the edge each side maps to
_CORNERS = ((0, 0), (0, 1), (1, 1), (1, 0))  # (dj, di)


def _edge_key(j, i, side):
    # side 0: bottom (j, i)-(j, i+1); 1: right (j, i+1)-(j+1, i+1); 2: top; 3: left
    if side == 0:
        return ("h", j, i)
    if side == 1:
        return ("v", j, i + 1)
    if side == 2:
        return ("h", j + 1, i)
    return ("v", j, i)


def _marching_squares(v: np.ndarray, active: np.ndarray):
    """Segments of the zero level set as pairs of edge keys, plus edge crossing points."""
    neg = v < 0.0
    segments = []
    degenerate = 0
    ny, nx = v.shape
    c = [neg[:-1, :-1], neg[:-1, 1:], neg[1:, 1:], neg[1:, :-1]]
    code = c[0].astype(int) | (c[1].astype(int) << 1) | (c[2].astype(int) << 2) | (c[3].astype(int) << 3)
    cell_ok = active[:-1, :-1] & active[:-1, 1:] & active[1:, 1:] & active[1:, :-1]
    zero = (v[:-1, :-1] == 0) & (v[:-1, 1:] == 0) & (v[1:, 1:] == 0) & (v[1:, :-1] == 0)
    degenerate = int(np.count_nonzero(zero & cell_ok))
    J, I = np.nonzero(cell_ok & (code != 0) & (code != 15))
    for j, i in zip(J, I):
        s = [neg[j + dj, i + di] for dj, di in _CORNERS]
        cut = [k for k in range(4) if s[k] != s[(k + 1) % 4]]
        if len(cut) == 2:
            segments.append((_edge_key(j, i, cut[0]), _edge_key(j, i, cut[1])))
        else:
            centre_neg = 0.25 * (v[j, i] + v[j, i + 1] + v[j + 1, i + 1] + v[j + 1, i]) < 0.0
            # join each side to the neighbour that keeps the centre's sign connected
            if centre_neg == s[0]:
                pairs = ((0, 1), (2, 3))
            else:
                pairs = ((3, 0), (1, 2))
            for a, b in pairs:
                segments.append((_edge_key(j, i, a), _edge_key(j, i, b)))
    return segments, degenerate


def _crossing_point(grid: Grid, v: np.ndarray, key) -> np.ndarray:
    kind, j, i = key
    a = v[j, i]
    b = v[j, i + 1] if kind == "h" else v[j + 1, i]
    t = a / (a - b)
    x = grid.x0 + (i + (t if kind == "h" else 0.0)) * grid.h
    y = grid.y0 + (j + (t if kind == "v" else 0.0)) * grid.h
    return np.array([x, y])


def _link(segments):
    adj: dict = {}
    for k, (a, b) in enumerate(segments):
        adj.setdefault(a, []).append(k)
        adj.setdefault(b, []).append(k)
    used = np.zeros(len(segments), dtype=bool)
    chains = []
    # open chains start at edges with a single segment
    starts = [e for e, ks in adj.items() if len(ks) == 1] + list(adj)
    for start in starts:
        ks = [k for k in adj[start] if not used[k]]
        if not ks:
            continue
        chain = [start]
        cur = start
        while True:
            nxt = [k for k in adj[cur] if not used[k]]
            if not nxt:
                break
            k = nxt[0]
            used[k] = True
            a, b = segments[k]
            cur = b if a == cur else a
            chain.append(cur)
        closed = len(chain) > 2 and chain[0] == chain[-1]
        chains.append((chain, closed))
    return chains


def extract_free_boundary(w: Field, floor: float = 1e-6) -> FreeBoundary:
    """Zero level set of ``w`` by marching squares; ``Q = 1 / (2 |grad w|)`` at segment midpoints."""
    g = w.grid
    v = w.values
    segments, degenerate = _marching_squares(v, g.valid)
    if not segments:
        raise ExtractionError("field has no zero crossing")
    chains = _link(segments)
    grad = discrete_gradient(w)
    gx = Field(g, grad[..., 0])
    gy = Field(g, grad[..., 1])
    polylines, closed_flags = [], []
    nodes, weights, normals, gnorm = [], [], [], []
    for chain, closed in chains:
        pts = np.array([_crossing_point(g, v, key) for key in chain])
        polylines.append(pts)
        closed_flags.append(closed)
        seg = np.diff(pts, axis=0)
        length = np.hypot(seg[:, 0], seg[:, 1])
        keep = length > 0
        mid = 0.5 * (pts[1:] + pts[:-1])[keep]
        gvec = np.column_stack([gx.at(mid), gy.at(mid)])
        gn = np.hypot(gvec[:, 0], gvec[:, 1])
        nu = gvec / np.maximum(gn, 1e-300)[:, None]
        nodes.append(mid)
        weights.append(length[keep])
        normals.append(nu)
        gnorm.append(gn)
    nodes = np.vstack(nodes)
    weights = np.concatenate(weights)
    normals = np.vstack(normals)
    gnorm = np.concatenate(gnorm)
    capped = int(np.count_nonzero(gnorm < floor))
    qv = 0.5 / np.maximum(gnorm, floor)
    t = np.arange(len(weights), dtype=float)
    disc = CurveDiscretization(nodes, normals, weights, t, t + 1.0, None, all(closed_flags))
    return FreeBoundary(
        polylines=polylines,
        closed=closed_flags,
        disc=disc,
        q=Density(qv, disc, None),
        grad_norm=gnorm,
        min_grad=float(gnorm.min()),
        capped=capped,
        degenerate_cells=degenerate,
    )


# ---------------------------------------------------------------------------
# Cross-check against the measure-data solver
# ---------------------------------------------------------------------------


@dataclass
class CrossCheck:
    v1: Field
    v2: Field
    discrepancy: float
    lipschitz_v1: float
    min_grad: float
    mask: np.ndarray


def cross_check(w: Field, v_sign: float = 1.0, ring: float = 4.0, fb: Optional[FreeBoundary] = None) -> CrossCheck:
    """Compare ``v1 = v_sign * Lap_h w`` with the solver output for the extracted ``(Gamma, Q)``.

    ``v_sign = +1`` is the sign produced by stationarity of the energy.  When
    ``w`` has no zero crossing the density vanishes and ``v2 = 0``.
    """
    g = w.grid
    v1 = Field(g, v_sign * discrete_laplacian(w).values)
    try:
        fb = fb or extract_free_boundary(w)
    except ExtractionError:
        fb = None
    if fb is None:
        v2 = Field.zeros(g)
        mask = g.interior
        min_grad = math.inf
    else:
        v2 = solve_poisson(deposit_measure(fb.disc, fb.q, g))
        d, _ = cKDTree(fb.disc.nodes).query(g.points())
        mask = g.interior & (d.reshape(g.shape) > ring * g.h)
        min_grad = fb.min_grad
    diff = np.abs(v1.values - v2.values)[mask]
    return CrossCheck(
        v1=v1,
        v2=v2,
        discrepancy=float(diff.max()) if diff.size else 0.0,
        lipschitz_v1=lipschitz_seminorm(v1, mask=g.interior),
        min_grad=min_grad,
        mask=mask,
    )


def radial_synthetic_w(rho: float = 0.5):
    """Radial ``w`` with ``Lap w = v``, ``v = -q rho log max(r, rho)``, ``w(rho) = 0``.

    ``q = 1 / (rho sqrt(-log rho))`` makes ``1 / (2|w'(rho)|) = q``, so ``(w, v)``
    is an exact stationary pair for the limit problem.  Returns ``(w, v, q)``.
    """
    q = 1.0 / (rho * math.sqrt(-math.log(rho)))
    c0 = -q * rho * math.log(rho)
    slope = c0 * rho / 2.0
    # outside: w = -q rho r^2 (log r - 1) / 4 + b log r + c
    b = (slope + q * rho * rho * (2.0 * math.log(rho) - 1.0) / 4.0) * rho
    c = q * rho * rho**2 * (math.log(rho) - 1.0) / 4.0 - b * math.log(rho)

    def w(r):
        r = np.asarray(r, dtype=float)
        rr = np.maximum(r, 1e-300)
        inner = c0 * (r * r - rho * rho) / 4.0
        outer = -q * rho * rr * rr * (np.log(rr) - 1.0) / 4.0 + b * np.log(rr) + c
        return np.where(r <= rho, inner, outer)

    def v(r):
        return -q * rho * np.log(np.maximum(np.asarray(r, dtype=float), rho))

    return w, v, q


def synthetic_state(grid: Grid, rho: float = 0.5) -> tuple[Field, float]:
    """Grid ``w`` with ``Lap_h w = v_exact`` on the interior and exact ring values."""
    w_fn, v_fn, q = radial_synthetic_w(rho)
    X, Y = grid.coords()
    R = np.hypot(X, Y)
    boundary = Field(grid, np.where(grid.interior, 0.0, w_fn(R)))
    rhs = Field(grid, -v_fn(R))
    return solve_poisson(rhs, grid, boundary=boundary), q
