"""Conformal factors on cylinder and strip grids.

A metric is g = u (dx^2 + dtheta^2) on a uniform grid in x times either a
periodic circle or a bounded fibre interval.  A single fibre node
(``n_theta == 1``) denotes a rotationally symmetric field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, StateError
from .expander import Box
from .fibre_measure import TWO_PI


@dataclass(frozen=True)
class CylGrid:
    x_min: float
    x_max: float
    nx: int
    n_theta: int
    periodic: bool = True
    y_min: float = 0.0
    y_max: float = TWO_PI

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise InputError("grid needs x_max > x_min")
        if self.nx < 8:
            raise InputError("grid needs at least 8 x nodes")
        if not (self.n_theta == 1 and self.periodic) and self.n_theta < 8:
            raise InputError("grid needs at least 8 fibre nodes")
        if not self.y_max > self.y_min:
            raise InputError("grid needs y_max > y_min")

    @classmethod
    def cylinder(cls, x_min, x_max, nx, n_theta=1) -> "CylGrid":
        return cls(float(x_min), float(x_max), int(nx), int(n_theta), True, 0.0, TWO_PI)

    @classmethod
    def strip(cls, x_min, x_max, nx, y_min, y_max, ny) -> "CylGrid":
        return cls(float(x_min), float(x_max), int(nx), int(ny), False,
                   float(y_min), float(y_max))

    @property
    def h_x(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def h_theta(self) -> float:
        if self.periodic:
            return TWO_PI / self.n_theta
        return (self.y_max - self.y_min) / (self.n_theta - 1)

    @property
    def axisymmetric(self) -> bool:
        return self.periodic and self.n_theta == 1

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def theta(self) -> np.ndarray:
        if self.periodic:
            return np.arange(self.n_theta) * self.h_theta
        return np.linspace(self.y_min, self.y_max, self.n_theta)

    @property
    def shape(self) -> tuple:
        return self.nx, self.n_theta

    def mesh(self):
        return np.meshgrid(self.x, self.theta, indexing="ij")


@dataclass(frozen=True)
class ConformalField:
    grid: CylGrid
    u: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if u.ndim == 1 and self.grid.n_theta == 1:
            u = u[:, None]
        if u.shape != self.grid.shape:
            raise InputError(f"field shape {u.shape} does not match grid {self.grid.shape}")
        u = u.copy()
        u.setflags(write=False)
        object.__setattr__(self, "u", u)
        if self.t < 0:
            raise InputError("time stamp must be nonnegative")

    def with_u(self, u, t=None) -> "ConformalField":
        return ConformalField(self.grid, u, self.t if t is None else t)


def _check_positive(f: ConformalField):
    if not np.all(f.u > 0.0) or not np.all(np.isfinite(f.u)):
        raise StateError("conformal factor must be positive and finite")


def _d2(w: np.ndarray, h: float, axis: int, periodic: bool) -> np.ndarray:
    n = w.shape[axis]
    if periodic:
        if n == 1:
            return np.zeros_like(w)
        return (np.roll(w, 1, axis) - 2 * w + np.roll(w, -1, axis)) / h ** 2
    w = np.moveaxis(w, axis, 0)
    out = np.empty_like(w)
    out[1:-1] = (w[:-2] - 2 * w[1:-1] + w[2:]) / h ** 2
    out[0] = (2 * w[0] - 5 * w[1] + 4 * w[2] - w[3]) / h ** 2
    out[-1] = (2 * w[-1] - 5 * w[-2] + 4 * w[-3] - w[-4]) / h ** 2
    return np.moveaxis(out, 0, axis)


def _d1(w: np.ndarray, h: float, axis: int, periodic: bool) -> np.ndarray:
    n = w.shape[axis]
    if periodic:
        if n == 1:
            return np.zeros_like(w)
        return (np.roll(w, -1, axis) - np.roll(w, 1, axis)) / (2 * h)
    w = np.moveaxis(w, axis, 0)
    out = np.empty_like(w)
    out[1:-1] = (w[2:] - w[:-2]) / (2 * h)
    out[0] = (-3 * w[0] + 4 * w[1] - w[2]) / (2 * h)
    out[-1] = (3 * w[-1] - 4 * w[-2] + w[-3]) / (2 * h)
    return np.moveaxis(out, 0, axis)


def laplacian_log(f: ConformalField) -> np.ndarray:
    _check_positive(f)
    g = f.grid
    w = np.log(f.u)
    return _d2(w, g.h_x, 0, False) + _d2(w, g.h_theta, 1, g.periodic)


def gauss_curvature(f: ConformalField) -> np.ndarray:
    return -laplacian_log(f) / (2.0 * f.u)


def soliton_residual(f: ConformalField, alpha: float, beta: float = 0.0,
                     zero_field: bool = False) -> np.ndarray:
    """Scalar residual 2Ku - X(u) + u of the expanding soliton equation."""
    if not alpha > 0.0:
        raise InputError("alpha must be positive")
    lap = laplacian_log(f)
    r = -lap + f.u
    if not zero_field:
        g = f.grid
        r = r - _d1(f.u, g.h_x, 0, False) / alpha
        if beta != 0.0:
            r = r - beta / alpha * _d1(f.u, g.h_theta, 1, g.periodic)
    return r


# ------------------------------------------------------------ integrals

def _pl_primitive(nodes: np.ndarray, vals: np.ndarray, z: float) -> np.ndarray:
    """Integral from nodes[0] to z of the piecewise-linear interpolant (axis 0)."""
    h = nodes[1] - nodes[0]
    n = nodes.size
    cum = np.concatenate([np.zeros((1,) + vals.shape[1:]),
                          np.cumsum(0.5 * h * (vals[1:] + vals[:-1]), axis=0)])
    i = min(max(int(math.floor((z - nodes[0]) / h)), 0), n - 2)
    tau = (z - nodes[i]) / h
    return cum[i] + h * (vals[i] * tau + 0.5 * (vals[i + 1] - vals[i]) * tau ** 2)


def _pl_integral(nodes, vals, a, b):
    return _pl_primitive(nodes, vals, b) - _pl_primitive(nodes, vals, a)


def metric_box_mass(f: ConformalField, B: Box) -> float:
    """Volume of B in the metric u (dx^2 + dtheta^2) by piecewise-linear quadrature."""
    g = f.grid
    a, b = B.x
    slack = 1e-12 * (g.x_max - g.x_min)
    if a < g.x_min - slack or b > g.x_max + slack:
        raise InputError(f"box [{a!r}, {b!r}] lies outside the grid")
    if b == a:
        return 0.0
    a, b = max(a, g.x_min), min(b, g.x_max)
    col = _pl_integral(g.x, f.u, a, b)          # one value per fibre node
    if g.axisymmetric:
        length = sum(d - c for c, d in B.fibre_set)
        return float(col[0] * min(length, TWO_PI))
    if g.periodic:
        th = np.append(g.theta, TWO_PI)
        vals = np.append(col, col[0])
        period = float(_pl_integral(th, vals, 0.0, TWO_PI))
        total = 0.0
        for c, d in B.fibre_set:
            if d - c >= TWO_PI:
                total += period
                continue
            k = math.floor(c / TWO_PI)
            c0, d0 = c - k * TWO_PI, d - k * TWO_PI
            if d0 <= TWO_PI:
                total += float(_pl_integral(th, vals, c0, d0))
            else:
                total += float(_pl_integral(th, vals, c0, TWO_PI)
                               + _pl_integral(th, vals, 0.0, d0 - TWO_PI))
        return total
    total = 0.0
    for c, d in B.fibre_set:
        c, d = max(c, g.y_min), min(d, g.y_max)
        if d > c:
            total += float(_pl_integral(g.theta, col, c, d))
    return total


def total_grid_mass(f: ConformalField) -> float:
    g = f.grid
    return metric_box_mass(f, Box((g.x_min, g.x_max), ((g.y_min, g.y_max),)))


# ------------------------------------------------------------ csv io

def write_field_csv(f: ConformalField, path) -> None:
    g = f.grid
    X, T = g.mesh()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,theta,u\n")
        for xv, tv, uv in zip(X.ravel(), T.ravel(), f.u.ravel()):
            fh.write(f"{xv:.17g},{tv:.17g},{uv:.17g}\n")


def read_field_csv(path, t: float = 0.0) -> ConformalField:
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    xs = np.unique(data[:, 0])
    ths = np.unique(data[:, 1])
    nx, nt = xs.size, ths.size
    u = data[:, 2].reshape(nx, nt)
    if nt == 1:
        grid = CylGrid.cylinder(xs[0], xs[-1], nx, 1)
    elif abs((ths[1] - ths[0]) * nt - TWO_PI) < 1e-9 and abs(ths[0]) < 1e-12:
        grid = CylGrid.cylinder(xs[0], xs[-1], nx, nt)
    else:
        grid = CylGrid.strip(xs[0], xs[-1], nx, ths[0], ths[-1], nt)
    return ConformalField(grid, u, t)
