"""Five-point finite differences on uniform grids over a square or the unit disk.

Nodes sit at ``(x0 + i h, y0 + j h)``; field arrays are indexed ``[j, i]`` (row
``j`` is the ``y`` index).  On the disk grid the square ``[-1, 1]^2`` is
covered and nodes with ``|x| < 1 - h/2`` are interior; every other node is a
Dirichlet node.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import CurveDiscretization, Density, GeometryError

RASTER_MAGIC = b"SPL1"
_HEADER = struct.Struct("<4sII3d")


class SolverError(RuntimeError):
    def __init__(self, message: str, residuals):
        self.residuals = list(map(float, residuals))
        last = self.residuals[-1] if self.residuals else float("nan")
        super().__init__(f"{message}; final relative residual {last:.3e}")


@dataclass(eq=False)
class Grid:
    kind: str  # "square" | "disk"
    n: int  # cells per axis
    x0: float
    y0: float
    h: float
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def square(cls, n: int, side: float = 1.0, origin=(0.0, 0.0)) -> "Grid":
        if n < 2 or side <= 0:
            raise GeometryError(f"bad square grid n={n}, side={side}")
        return cls("square", int(n), float(origin[0]), float(origin[1]), side / n)

    @classmethod
    def disk(cls, n: int) -> "Grid":
        if n < 4:
            raise GeometryError(f"bad disk grid n={n}")
        return cls("disk", int(n), -1.0, -1.0, 2.0 / n)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n + 1, self.n + 1)

    @property
    def side(self) -> float:
        return self.n * self.h

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        k = np.arange(self.n + 1)
        return self.x0 + k * self.h, self.y0 + k * self.h

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = self.axes()
        return np.meshgrid(xs, ys)

    def points(self) -> np.ndarray:
        X, Y = self.coords()
        return np.column_stack([X.ravel(), Y.ravel()])

    @property
    def interior(self) -> np.ndarray:
        if "interior" not in self._cache:
            m = np.zeros(self.shape, dtype=bool)
            if self.kind == "square":
                m[1:-1, 1:-1] = True
            else:
                X, Y = self.coords()
                m = np.hypot(X, Y) < 1.0 - 0.5 * self.h
                m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = False
            self._cache["interior"] = m
        return self._cache["interior"]

    @property
    def valid(self) -> np.ndarray:
        """Interior nodes plus the Dirichlet ring touching them."""
        if "valid" not in self._cache:
            m = self.interior
            ring = np.zeros_like(m)
            ring[1:, :] |= m[:-1, :]
            ring[:-1, :] |= m[1:, :]
            ring[:, 1:] |= m[:, :-1]
            ring[:, :-1] |= m[:, 1:]
            self._cache["valid"] = m | ring
        return self._cache["valid"]

    def contains(self, p: np.ndarray, margin: float) -> np.ndarray:
        p = np.atleast_2d(p)
        if self.kind == "disk":
            return np.hypot(p[:, 0], p[:, 1]) <= 1.0 - 0.5 * self.h - margin
        lo_x, lo_y = self.x0 + self.h + margin, self.y0 + self.h + margin
        hi_x, hi_y = self.x0 + self.side - self.h - margin, self.y0 + self.side - self.h - margin
        return (p[:, 0] >= lo_x) & (p[:, 0] <= hi_x) & (p[:, 1] >= lo_y) & (p[:, 1] <= hi_y)

    def laplacian_matrix(self) -> sp.csr_matrix:
        """``-Lap_h`` restricted to interior unknowns (SPD), cached on the grid."""
        if "A" not in self._cache:
            m = self.interior
            idx = -np.ones(self.shape, dtype=np.int64)
            idx[m] = np.arange(int(m.sum()))
            rows, cols, vals = [], [], []
            J, I = np.nonzero(m)
            me = idx[J, I]
            rows.append(me)
            cols.append(me)
            vals.append(np.full(me.shape, 4.0))
            for dj, di in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nb = idx[J + dj, I + di]
                ok = nb >= 0
                rows.append(me[ok])
                cols.append(nb[ok])
                vals.append(np.full(int(ok.sum()), -1.0))
            A = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(me.size, me.size),
            ) / self.h**2
            self._cache["A"] = A
            self._cache["index"] = idx
        return self._cache["A"]

    def unknown_index(self) -> np.ndarray:
        self.laplacian_matrix()
        return self._cache["index"]


def refine(grid: Grid) -> Grid:
    """Same extent with spacing ``h/2``."""
    return Grid(grid.kind, 2 * grid.n, grid.x0, grid.y0, grid.h / 2)


@dataclass
class Field:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "Field":
        X, Y = grid.coords()
        return cls(grid, np.broadcast_to(fn(X, Y), grid.shape).copy())

    @classmethod
    def zeros(cls, grid: Grid) -> "Field":
        return cls(grid, np.zeros(grid.shape))

    def __add__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values + other.values)

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values - other.values)

    def __mul__(self, s: float) -> "Field":
        return Field(self.grid, s * self.values)

    __rmul__ = __mul__

    def at(self, points: np.ndarray) -> np.ndarray:
        """Bilinear interpolation at arbitrary points inside the grid square."""
        g = self.grid
        p = np.atleast_2d(points)
        fx = (p[:, 0] - g.x0) / g.h
        fy = (p[:, 1] - g.y0) / g.h
        i = np.clip(np.floor(fx).astype(int), 0, g.n - 1)
        j = np.clip(np.floor(fy).astype(int), 0, g.n - 1)
        ax, ay = fx - i, fy - j
        v = self.values
        return (
            v[j, i] * (1 - ax) * (1 - ay)
            + v[j, i + 1] * ax * (1 - ay)
            + v[j + 1, i] * (1 - ax) * ay
            + v[j + 1, i + 1] * ax * ay
        )


def deposit_measure(disc: CurveDiscretization, q: Density, grid: Grid) -> Field:
    """Bilinear splat of the node masses ``Q_i w_i`` divided by ``h^2``."""
    if not np.all(grid.contains(disc.nodes, 2.0 * grid.h)):
        raise GeometryError("curve is closer than 2h to the grid boundary")
    h = grid.h
    fx = (disc.nodes[:, 0] - grid.x0) / h
    fy = (disc.nodes[:, 1] - grid.y0) / h
    i = np.floor(fx).astype(int)
    j = np.floor(fy).astype(int)
    ax, ay = fx - i, fy - j
    mass = np.asarray(q.values, dtype=float) * disc.weights / h**2
    rhs = np.zeros(grid.shape)
    np.add.at(rhs, (j, i), mass * (1 - ax) * (1 - ay))
    np.add.at(rhs, (j, i + 1), mass * ax * (1 - ay))
    np.add.at(rhs, (j + 1, i), mass * (1 - ax) * ay)
    np.add.at(rhs, (j + 1, i + 1), mass * ax * ay)
    return Field(grid, rhs)


def solve_poisson(
    rhs: Field, grid: Optional[Grid] = None, boundary: Optional[Field] = None, rtol: float = 1e-10
) -> Field:
    """Solve ``-Lap_h u = rhs`` on interior nodes; Dirichlet nodes take ``boundary`` (default 0).

    Jacobi-preconditioned conjugate gradients, capped at ``20 n`` iterations.
    """
    grid = grid or rhs.grid
    A = grid.laplacian_matrix()
    idx = grid.unknown_index()
    m = grid.interior
    b = rhs.values[m].astype(float)
    bvals = np.zeros(grid.shape) if boundary is None else np.where(m, 0.0, boundary.values)
    if boundary is not None:
        # move the known Dirichlet values to the right-hand side
        lap_b = np.zeros(grid.shape)
        lap_b[1:-1, 1:-1] = (
            bvals[2:, 1:-1] + bvals[:-2, 1:-1] + bvals[1:-1, 2:] + bvals[1:-1, :-2]
        ) / grid.h**2
        b = b + lap_b[m]
    out = bvals.copy()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return Field(grid, out)
    history: list[float] = []
    x = _pcg(A, b, 1.0 / A.diagonal(), rtol, 20 * grid.n, history)
    if history[-1] > rtol:
        raise SolverError(f"conjugate gradients stopped after {len(history) - 1} iterations", history)
    out[m] = x
    del idx
    return Field(grid, out)


def _pcg(A, b, dinv, rtol, maxiter, history):
    x = np.zeros_like(b)
    r = b.copy()
    z = dinv * r
    p = z.copy()
    rz = float(r @ z)
    bnorm = float(np.linalg.norm(b))
    history.append(1.0)
    for _ in range(maxiter):
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = float(np.linalg.norm(r)) / bnorm
        history.append(res)
        if res <= rtol:
            break
        z = dinv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def discrete_gradient(f: Field) -> np.ndarray:
    """Second-order differences, shape ``(ny, nx, 2)``; zero outside the valid node set.

    Centered where both neighbors are valid, one-sided three-point otherwise,
    two-point if only one neighbor is valid.
    """
    g = f.grid
    v = f.values
    valid = g.valid
    out = np.zeros(v.shape + (2,))
    for axis, comp in ((1, 0), (0, 1)):
        vp = np.roll(v, -1, axis)
        vm = np.roll(v, 1, axis)
        vpp = np.roll(v, -2, axis)
        vmm = np.roll(v, 2, axis)
        ok_p = np.roll(valid, -1, axis)
        ok_m = np.roll(valid, 1, axis)
        ok_pp = np.roll(valid, -2, axis) & ok_p
        ok_mm = np.roll(valid, 2, axis) & ok_m
        n = v.shape[axis]
        pos = np.arange(n).reshape((-1, 1) if axis == 0 else (1, -1))
        ok_p &= pos < n - 1
        ok_m &= pos > 0
        ok_pp &= pos < n - 2
        ok_mm &= pos > 1
        d = np.zeros_like(v)
        c = ok_p & ok_m
        d[c] = (vp - vm)[c] / (2 * g.h)
        fw = ~c & ok_pp
        d[fw] = (-3 * v + 4 * vp - vpp)[fw] / (2 * g.h)
        bw = ~c & ~fw & ok_mm
        d[bw] = (3 * v - 4 * vm + vmm)[bw] / (2 * g.h)
        f1 = ~c & ~fw & ~bw & ok_p
        d[f1] = (vp - v)[f1] / g.h
        b1 = ~c & ~fw & ~bw & ~f1 & ok_m
        d[b1] = (v - vm)[b1] / g.h
        out[..., comp] = np.where(valid, d, 0.0)
    return out


def discrete_laplacian(f: Field) -> Field:
    """Five-point Laplacian on interior nodes, zero elsewhere."""
    v = f.values
    lap = np.zeros_like(v)
    lap[1:-1, 1:-1] = (v[2:, 1:-1] + v[:-2, 1:-1] + v[1:-1, 2:] + v[1:-1, :-2] - 4 * v[1:-1, 1:-1]) / f.grid.h**2
    return Field(f.grid, np.where(f.grid.interior, lap, 0.0))


def sup_error(a: Field, b, mask: Optional[np.ndarray] = None) -> float:
    """``max |a - b|`` over ``mask`` (default: valid nodes); ``b`` is a Field or ``fn(X, Y)``."""
    if isinstance(b, Field):
        ref = b.values
    else:
        X, Y = a.grid.coords()
        ref = b(X, Y)
    m = a.grid.valid if mask is None else mask
    return float(np.max(np.abs(a.values - ref)[m])) if m.any() else 0.0


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def write_csv(f: Field, path) -> None:
    X, Y = f.grid.coords()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value"])
        for x, y, v in zip(X.ravel(), Y.ravel(), f.values.ravel()):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def write_raster(f: Field, path) -> None:
    """Little-endian raster: magic, u32 nx, u32 ny, f64 x0, y0, h, row-major f64 values."""
    ny, nx = f.values.shape
    g = f.grid
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RASTER_MAGIC, nx, ny, g.x0, g.y0, g.h))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_raster(path, kind: str = "square") -> Field:
    data = Path(path).read_bytes()
    magic, nx, ny, x0, y0, h = _HEADER.unpack_from(data)
    if magic != RASTER_MAGIC:
        raise ValueError(f"not a raster file (magic {magic!r})")
    if nx != ny:
        raise ValueError("only square rasters are supported")
    vals = np.frombuffer(data, dtype="<f8", offset=_HEADER.size, count=nx * ny).reshape(ny, nx)
    return Field(Grid(kind, nx - 1, x0, y0, h), vals.copy())
