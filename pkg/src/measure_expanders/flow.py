"""Backward-Euler integration of u_t = Delta log u and flow diagnostics.

The unknown is w = log u.  Each node owns a control volume V (half cells on
flux boundaries) and the discrete operator is the conservative five-point
flux sum, so every step satisfies

    V (v - u) = dt * (interior fluxes + boundary fluxes)

exactly up to the Newton tolerance.  The Jacobian diag(V v) - dt L is
symmetric positive definite and an M-matrix, which gives positivity and a
discrete comparison principle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sps
from scipy.sparse.linalg import cg, splu

from .errors import ConvergenceError, InputError, StateError
from .expander import Box, ProductExpander, box_mass
from .fibre_measure import TWO_PI, nu_invariant_under_full_group, nu_mollify
from .geometry import ConformalField, CylGrid, metric_box_mass, total_grid_mass
from .soliton_ode import cusp_coefficients

log = logging.getLogger(__name__)

CONE, CUSP, SMOOTH_ORIGIN, NEUMANN, WALL = "cone", "cusp", "smooth_origin", "neumann", "wall"


@dataclass(frozen=True)
class BoundaryCondition:
    """Boundary treatment for one end of the grid.

    cone           Dirichlet, u = mollified e^{alpha x} nu trace (+ floor)
    cusp           Robin, d_n log u from the hyperbolic cusp u = 2t/sigma^2;
                   ``alpha`` switches on the soliton log corrections
    smooth_origin  d_x log u = 2 (left end of a plane family)
    neumann        d_n log u = ``value``
    wall           Dirichlet, u = 2t / sin^2(y) (strip fibre ends)
    """

    kind: str
    alpha: float | None = None
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in (CONE, CUSP, SMOOTH_ORIGIN, NEUMANN, WALL):
            raise InputError(f"unknown boundary condition {self.kind!r}")

    @property
    def dirichlet(self) -> bool:
        return self.kind in (CONE, WALL)

    @classmethod
    def parse(cls, text: str) -> "BoundaryCondition":
        """``cone``, ``cusp``, ``cusp:1.0``, ``smooth_origin``, ``neumann:0``, ``wall``."""
        kind, _, arg = text.strip().lower().replace("-", "_").partition(":")
        if kind == CUSP:
            return cls(CUSP, float(arg) if arg else None)
        if kind == NEUMANN:
            return cls(NEUMANN, None, float(arg) if arg else 0.0)
        return cls(kind)

    def __str__(self) -> str:
        if self.kind == CUSP and self.alpha is not None:
            return f"cusp:{self.alpha!r}"
        if self.kind == NEUMANN:
            return f"neumann:{self.value!r}"
        return self.kind


def cusp_outflow(u: np.ndarray, t: float, alpha: float | None = None):
    """(c, dc/dlog u) with outward d_n log u = -c at a cusp end.

    Leading order the end is the hyperbolic cusp u = 2t/sigma^2 with sigma
    the distance to the (virtual) cusp point, so d_n log u = -2/sigma.  With
    ``alpha`` the soliton expansion sigma(s) = s + c log s + ... is inverted
    for s and the flux becomes -2 sigma'(s)/sigma.
    """
    u = np.asarray(u, dtype=float)
    sig = np.sqrt(2.0 * t / u)
    if alpha is None:
        c = 2.0 / sig
        return c, 0.5 * c
    cc, dd, ee = cusp_coefficients(alpha)

    def g(s):
        L = np.log(s)
        return s + cc * L + dd * L / s + ee / s

    def fac(s):
        L = np.log(s)
        return 1.0 + cc / s + dd * (1.0 - L) / s ** 2 - ee / s ** 2

    s_min = max(3.0, 3.0 / alpha)
    low = sig <= g(s_min)
    s = np.maximum(sig - cc * np.log(np.maximum(sig, 1.0)), s_min)
    for _ in range(50):
        ds = (g(s) - sig) / fac(s)
        s = np.maximum(s - ds, s_min)
        if np.all(np.abs(ds) <= 1e-14 * s):
            break
    s = np.where(low, s_min, s)
    F = fac(s)
    c = 2.0 * F / sig
    L = np.log(s)
    dF = -cc / s ** 2 + dd * (2.0 * L - 3.0) / s ** 3 + 2.0 * ee / s ** 3
    dc = np.where(low, 0.5 * c, -dF / F + F / sig)
    return c, dc


# ------------------------------------------------------------ stepper

@dataclass
class StepResult:
    field: ConformalField
    newton_iters: int
    residual: float
    w: np.ndarray | None = None


class ImplicitStepper:
    """Backward-Euler step for a fixed grid and boundary configuration.

    ``traces`` maps each Dirichlet side ('left', 'right', 'fibre') to a
    callable t -> boundary values of u (fibre: array (nx, 2) for the two
    walls).
    """

    def __init__(self, grid: CylGrid, bc_left: BoundaryCondition, bc_right: BoundaryCondition,
                 bc_fibre: BoundaryCondition | None = None, traces: dict | None = None,
                 newton_tol: float = 1e-10, newton_maxit: int = 20,
                 linear_solver: str = "pcg", krylov_tol: float = 1e-12):
        self.grid = grid
        self.bc = {"left": bc_left, "right": bc_right}
        if grid.periodic:
            bc_fibre = None
        elif bc_fibre is None:
            bc_fibre = BoundaryCondition(WALL)
        if bc_fibre is not None and bc_fibre.kind not in (WALL, NEUMANN):
            raise InputError("fibre ends accept wall or neumann conditions only")
        if bc_right.kind == SMOOTH_ORIGIN:
            raise InputError("smooth_origin applies to the left end only")
        self.bc["fibre"] = bc_fibre
        self.traces = dict(traces or {})
        for side in ("left", "right", "fibre"):
            b = self.bc[side]
            if b is not None and b.dirichlet and side not in self.traces:
                raise InputError(f"Dirichlet condition on {side} needs a boundary trace")
        if linear_solver not in ("pcg", "direct"):
            raise InputError(f"unknown linear solver {linear_solver!r}")
        self.newton_tol = newton_tol
        self.newton_maxit = newton_maxit
        self.linear_solver = linear_solver
        self.krylov_tol = krylov_tol
        self._assemble()

    # ---------------------------------------------------------- assembly
    def _assemble(self):
        g = self.grid
        nx, nt = g.shape
        hx = g.h_x
        ht = TWO_PI if g.axisymmetric else g.h_theta
        i0 = 1 if self.bc["left"].dirichlet else 0
        i1 = nx - 2 if self.bc["right"].dirichlet else nx - 1
        fb = self.bc["fibre"]
        if g.periodic:
            j0, j1 = 0, nt - 1
        elif fb.dirichlet:
            j0, j1 = 1, nt - 2
        else:
            j0, j1 = 0, nt - 1
        self.ix = slice(i0, i1 + 1)
        self.jx = slice(j0, j1 + 1)
        m, n = i1 - i0 + 1, j1 - j0 + 1
        self.m, self.n = m, n
        wx = np.full(m, hx)
        if i0 == 0:
            wx[0] *= 0.5
        if i1 == nx - 1:
            wx[-1] *= 0.5
        wt = np.full(n, ht)
        if not g.periodic and not fb.dirichlet:
            wt[0] *= 0.5
            wt[-1] *= 0.5
        self.V = np.outer(wx, wt).ravel()
        idx = np.arange(m * n).reshape(m, n)
        rows, cols, vals = [], [], []
        # x faces between unknown rows
        Tx = np.broadcast_to(wt / hx, (m - 1, n))
        rows.append(idx[:-1].ravel()); cols.append(idx[1:].ravel()); vals.append(Tx.ravel())
        # fibre faces
        if n > 1:
            Tt = np.broadcast_to((wx / ht)[:, None], (m, n))
            if g.periodic:
                rows.append(idx.ravel()); cols.append(np.roll(idx, -1, axis=1).ravel())
                vals.append(Tt.ravel())
            else:
                rows.append(idx[:, :-1].ravel()); cols.append(idx[:, 1:].ravel())
                vals.append(Tt[:, :-1].ravel())
        r = np.concatenate(rows); c = np.concatenate(cols); v = np.concatenate(vals)
        A = sps.coo_matrix((v, (r, c)), shape=(m * n, m * n))
        A = (A + A.T).tocsr()
        deg = np.asarray(A.sum(axis=1)).ravel()
        self.dir_coef = {}
        dirdeg = np.zeros((m, n))
        if self.bc["left"].dirichlet:
            dirdeg[0] += wt / hx
            self.dir_coef["left"] = wt / hx
        if self.bc["right"].dirichlet:
            dirdeg[-1] += wt / hx
            self.dir_coef["right"] = wt / hx
        if fb is not None and fb.dirichlet:
            dirdeg[:, 0] += wx / ht
            dirdeg[:, -1] += wx / ht
            self.dir_coef["fibre"] = wx / ht
        self.L = (A - sps.diags(deg + dirdeg.ravel())).tocsr()
        self.face_area = {"left": wt, "right": wt}
        if fb is not None and not fb.dirichlet:
            self.face_area["fibre"] = wx
        self.idx = idx

    # ---------------------------------------------------------- pieces
    def _dirichlet_term(self, t: float) -> np.ndarray:
        out = np.zeros((self.m, self.n))
        for side in ("left", "right"):
            if side in self.dir_coef:
                ub = np.asarray(self.traces[side](t), dtype=float).reshape(-1)[self.jx]
                row = 0 if side == "left" else -1
                out[row] += self.dir_coef[side] * np.log(ub)
        if "fibre" in self.dir_coef:
            ub = np.asarray(self.traces["fibre"](t), dtype=float)[self.ix]
            out[:, 0] += self.dir_coef["fibre"] * np.log(ub[:, 0])
            out[:, -1] += self.dir_coef["fibre"] * np.log(ub[:, 1])
        return out.ravel()

    def _flux_term(self, w: np.ndarray, t: float):
        """Boundary flux sum and its diagonal derivative in w."""
        q = np.zeros((self.m, self.n))
        dq = np.zeros((self.m, self.n))
        W = w.reshape(self.m, self.n)
        for side, row in (("left", 0), ("right", -1)):
            b = self.bc[side]
            if b.dirichlet:
                continue
            A = self.face_area[side]
            if b.kind == SMOOTH_ORIGIN:
                q[row] += -2.0 * A
            elif b.kind == NEUMANN:
                q[row] += b.value * A
            else:
                c, dc = cusp_outflow(np.exp(W[row]), t, b.alpha)
                q[row] -= c * A
                dq[row] -= dc * A
        fb = self.bc["fibre"]
        if fb is not None and fb.kind == NEUMANN:
            q[:, 0] += fb.value * self.face_area["fibre"]
            q[:, -1] += fb.value * self.face_area["fibre"]
        return q.ravel(), dq.ravel()

    def _solve(self, J, rhs):
        if self.linear_solver == "direct":
            return splu(J.tocsc()).solve(rhs)
        d = J.diagonal()
        M = sps.diags(1.0 / d)
        x, info = cg(J, rhs, rtol=self.krylov_tol, atol=0.0, M=M, maxiter=20 * J.shape[0])
        if info != 0:
            log.warning("pcg did not reach tolerance (info=%d); using direct solve", info)
            return splu(J.tocsc()).solve(rhs)
        return x

    def residual(self, w, u_old, dt, t_new):
        v = np.exp(w)
        q, dq = self._flux_term(w, t_new)
        div = self.L @ w + self._dirichlet_term(t_new) + q
        return self.V * (v - u_old) - dt * div, v, dq

    # ---------------------------------------------------------- public
    def interior(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u)[self.ix, self.jx].ravel()

    def assemble_field(self, v: np.ndarray, t: float) -> np.ndarray:
        g = self.grid
        U = np.empty(g.shape)
        if "left" in self.dir_coef:
            U[0] = self.traces["left"](t)
        if "right" in self.dir_coef:
            U[-1] = self.traces["right"](t)
        if "fibre" in self.dir_coef:
            ub = np.asarray(self.traces["fibre"](t))
            U[:, 0] = ub[:, 0]
            U[:, -1] = ub[:, 1]
        U[self.ix, self.jx] = v.reshape(self.m, self.n)
        return U

    def solve(self, u_old: np.ndarray, dt: float, t_new: float, w0: np.ndarray | None = None):
        """Newton solve on the interior unknowns; returns (w, iterations, residual)."""
        w = np.log(np.maximum(u_old, 1e-300)) if w0 is None else np.array(w0, dtype=float)
        scale = self.V * np.maximum(u_old, 0.0) + 1e-300
        with np.errstate(over="ignore", invalid="ignore"):
            F, v, dq = self.residual(w, u_old, dt, t_new)
            for it in range(1, self.newton_maxit + 1):
                J = sps.diags(self.V * v - dt * dq) - dt * self.L
                dw = self._solve(J, -F)
                if not np.all(np.isfinite(dw)):
                    raise ConvergenceError("non-finite Newton update")
                # damping: cap the log-update, then backtrack on the residual
                lam = min(1.0, 5.0 / max(np.max(np.abs(dw)), 1e-300))
                f0 = np.linalg.norm(F / scale)
                for _ in range(12):
                    wn = w + lam * dw
                    Fn, vn, dqn = self.residual(wn, u_old, dt, t_new)
                    if np.all(np.isfinite(Fn)) and (np.linalg.norm(Fn / scale) <= f0 or lam < 1e-3):
                        break
                    lam *= 0.5
                w, F, v, dq = wn, Fn, vn, dqn
                if not np.all(np.isfinite(w)):
                    raise StateError("positivity lost in Newton iteration")
                if lam * np.max(np.abs(dw)) < self.newton_tol:
                    return w, it, float(np.max(np.abs(F / scale)))
        raise ConvergenceError(f"Newton did not converge in {self.newton_maxit} iterations")

    def step(self, f: ConformalField, dt: float, w0=None) -> StepResult:
        if dt < 0:
            raise InputError("dt must be nonnegative")
        if not np.all(f.u > 0.0):
            raise StateError("conformal factor must be positive")
        if dt == 0.0:
            return StepResult(f, 0, 0.0, np.log(self.interior(f.u)))
        t_new = f.t + dt
        w, its, res = self.solve(self.interior(f.u), dt, t_new, w0)
        U = self.assemble_field(np.exp(w), t_new)
        if not np.all(U > 0.0):
            raise StateError("positivity violated")
        return StepResult(ConformalField(self.grid, U, t_new), its, res, w)

    def mass_balance_defect(self, u_old: ConformalField, u_new: ConformalField) -> float:
        """Relative mismatch of control-volume mass change and boundary flux."""
        dt = u_new.t - u_old.t
        w = np.log(self.interior(u_new.u))
        dm = float(np.sum(self.V * (self.interior(u_new.u) - self.interior(u_old.u)))) / dt
        flux = self.boundary_flux(w, u_new.t)
        return abs(dm - flux) / max(abs(dm), abs(flux), 1e-300)

    def boundary_flux(self, w: np.ndarray, t: float) -> float:
        """Net inflow of d_n log u through all boundaries (Dirichlet faces included)."""
        q, _ = self._flux_term(w, t)
        W = w.reshape(self.m, self.n)
        total = float(q.sum())
        for side, row in (("left", 0), ("right", -1)):
            if side in self.dir_coef:
                ub = np.asarray(self.traces[side](t)).reshape(-1)[self.jx]
                total += float(np.sum(self.dir_coef[side] * (np.log(ub) - W[row])))
        if "fibre" in self.dir_coef:
            ub = np.asarray(self.traces["fibre"](t))[self.ix]
            total += float(np.sum(self.dir_coef["fibre"] * (np.log(ub[:, 0]) - W[:, 0])))
            total += float(np.sum(self.dir_coef["fibre"] * (np.log(ub[:, 1]) - W[:, -1])))
        return total


def step_implicit(stepper: ImplicitStepper, f: ConformalField, dt: float) -> ConformalField:
    return stepper.step(f, dt).field


# ------------------------------------------------------------ initial data

def mollified_rows(e: ProductExpander, grid: CylGrid, h: float | None = None) -> np.ndarray:
    """Density of mu per unit x-theta area on the grid (no floor)."""
    x = grid.x
    if grid.axisymmetric:
        if not nu_invariant_under_full_group(e.nu):
            raise InputError("a single fibre node needs a rotation-invariant measure")
        rho = e.nu.total() / TWO_PI
        return (np.exp(e.alpha * x) * rho)[:, None]
    if grid.periodic != e.nu.fibre.periodic:
        raise InputError("grid fibre does not match the expander fibre")
    th = grid.theta
    if h is None:
        h = 3.0 * grid.h_theta
    out = np.empty(grid.shape)
    for i, xi in enumerate(x):
        out[i] = np.exp(e.alpha * xi) * nu_mollify(e.nu, h, th - e.beta * xi)
    return out


def floor_eta(density: np.ndarray, factor: float = 1e-3) -> float:
    pos = density[density > 0.0]
    return float(factor * np.median(pos)) if pos.size else 0.0


def init_from_expander(e: ProductExpander, grid: CylGrid, t0: float, h: float | None = None,
                       eta_factor: float = 1e-3, x_cut: float | None = None) -> ConformalField:
    """Mollified density of mu plus the floor eta t0.

    ``x_cut`` truncates mu to x < x_cut (plane families: the ball of radius
    e^{x_cut}); the cut cell receives its exact volume fraction.
    """
    if not t0 > 0.0:
        raise InputError("t0 must be positive")
    dens = mollified_rows(e, grid, h)
    if x_cut is not None:
        frac = np.clip((x_cut - (grid.x - 0.5 * grid.h_x)) / grid.h_x, 0.0, 1.0)
        dens = dens * frac[:, None]
    eta = floor_eta(dens, eta_factor)
    return ConformalField(grid, dens + eta * t0, t0)


def cone_trace(e: ProductExpander | None, grid: CylGrid, side: str, eta: float,
               initial: ConformalField | None = None, h: float | None = None,
               x_cut: float | None = None) -> Callable:
    """Boundary values at a conical x-end.

    The frozen mollified density of mu plus eta t.  On the circle, fibre
    directions where mu has no mass carry the hyperbolic strip profile of the
    empty helical band (width g measured along theta, sheared by beta).
    """
    row = 0 if side == "left" else -1
    if e is None:
        if initial is None:
            raise InputError("cone trace needs an expander or initial data")
        frozen = np.array(initial.u[row], dtype=float)
        return lambda t: frozen
    xb = grid.x[row]
    dens = mollified_rows(e, grid, h)[row]
    if x_cut is not None and xb >= x_cut:
        dens = np.zeros_like(dens)
    valley_shape = None
    if grid.periodic and not grid.axisymmetric and np.any(dens == 0.0):
        gaps = e.nu.support_gaps()
        phi = np.mod(grid.theta - e.beta * xb, TWO_PI)
        valley_shape = np.zeros_like(dens)
        for a, g in gaps:
            rel = np.mod(phi - a, TWO_PI)
            inside = (rel > 0.0) & (rel < g) & (dens == 0.0)
            valley_shape[inside] = (math.pi ** 2 * (1.0 + e.beta ** 2) / g ** 2
                                    / np.sin(math.pi * rel[inside] / g) ** 2)

    def trace(t):
        out = dens + eta * t
        if valley_shape is not None:
            out = out + 2.0 * t * valley_shape
        return out
    return trace


def wall_trace(grid: CylGrid) -> Callable:
    s = np.array([1.0 / math.sin(grid.y_min) ** 2, 1.0 / math.sin(grid.y_max) ** 2])
    ones = np.ones(grid.nx)

    def trace(t):
        return 2.0 * t * np.outer(ones, s)
    return trace


def strip_profile(grid: CylGrid, t: float) -> np.ndarray:
    _, Y = grid.mesh()
    return 2.0 * t / np.sin(Y) ** 2


def strip_prepared(grid: CylGrid, t0: float, bc_x: BoundaryCondition | None = None,
                   **kw) -> ConformalField:
    """t0 S_h with S_h the discrete steady state S = Delta_h log S.

    On the strip u = t S_h is an exact solution of every backward-Euler step,
    so starting from it the discrete flow is exactly self-similar.
    """
    bc_x = bc_x or BoundaryCondition(NEUMANN)
    st = ImplicitStepper(grid, bc_x, bc_x, BoundaryCondition(WALL),
                         {"fibre": wall_trace(grid)}, linear_solver="direct", **kw)
    exact = strip_profile(grid, 1.0)
    w, _, _ = st.solve(np.zeros(st.m * st.n), 1.0, 1.0, np.log(st.interior(exact)))
    S = st.assemble_field(np.exp(w), 1.0)
    return ConformalField(grid, t0 * S, t0)


# ------------------------------------------------------------ runs

@dataclass
class FlowConfig:
    grid: CylGrid
    t0: float
    t1: float
    bc_left: BoundaryCondition
    bc_right: BoundaryCondition
    bc_fibre: BoundaryCondition | None = None
    expander: ProductExpander | None = None
    initial: ConformalField | None = None
    output_times: tuple = ()
    mollify: float | None = None
    eta_factor: float = 1e-3
    x_cut: float | None = None
    dt0: float | None = None
    dt_max: float = math.inf
    dt_rel: float = 0.05
    newton_tol: float = 1e-10
    newton_maxit: int = 20
    linear_solver: str = "pcg"
    predictor: bool = True

    def __post_init__(self):
        if not (0.0 < self.t0 < self.t1):
            raise InputError("need 0 < t0 < t1")
        if self.newton_tol <= 0 or self.dt_rel <= 0:
            raise InputError("tolerances must be positive")
        outs = sorted(set(float(t) for t in self.output_times) | {float(self.t1)})
        if outs[0] <= self.t0:
            raise InputError("output times must exceed t0")
        if outs[-1] > self.t1:
            raise InputError("output times must not exceed t1")
        self.output_times = tuple(outs)


@dataclass(frozen=True)
class StepInfo:
    t: float
    dt: float
    newton_iters: int
    residual: float


@dataclass
class FlowTrajectory:
    snapshots: list
    steps: list
    config: FlowConfig | None = None
    eta: float = 0.0

    @property
    def times(self) -> list:
        return [s.t for s in self.snapshots]

    def at(self, t: float, rtol: float = 1e-9) -> ConformalField:
        for s in self.snapshots:
            if abs(s.t - t) <= rtol * max(abs(t), 1.0):
                return s
        raise InputError(f"no snapshot at t = {t!r}")

    def newton_between(self, t_a: float, t_b: float) -> int:
        return sum(s.newton_iters for s in self.steps if t_a < s.t <= t_b * (1 + 1e-12))


def build_initial(cfg: FlowConfig):
    if cfg.initial is not None:
        return cfg.initial, 0.0
    if cfg.expander is None:
        raise InputError("config needs an expander or an initial field")
    f = init_from_expander(cfg.expander, cfg.grid, cfg.t0, cfg.mollify, cfg.eta_factor, cfg.x_cut)
    dens = mollified_rows(cfg.expander, cfg.grid, cfg.mollify)
    if cfg.x_cut is not None:
        frac = np.clip((cfg.x_cut - (cfg.grid.x - 0.5 * cfg.grid.h_x)) / cfg.grid.h_x, 0.0, 1.0)
        dens = dens * frac[:, None]
    return f, floor_eta(dens, cfg.eta_factor)


def make_stepper(cfg: FlowConfig, initial: ConformalField, eta: float) -> ImplicitStepper:
    traces = {}
    for side, b in (("left", cfg.bc_left), ("right", cfg.bc_right)):
        if b.kind == CONE:
            traces[side] = cone_trace(cfg.expander if cfg.initial is None else None,
                                      cfg.grid, side, eta, initial, cfg.mollify, cfg.x_cut)
        elif b.kind == WALL:
            raise InputError("wall conditions apply to fibre ends only")
    if not cfg.grid.periodic:
        fb = cfg.bc_fibre or BoundaryCondition(WALL)
        if fb.kind == WALL:
            traces["fibre"] = wall_trace(cfg.grid)
    return ImplicitStepper(cfg.grid, cfg.bc_left, cfg.bc_right, cfg.bc_fibre, traces,
                           cfg.newton_tol, cfg.newton_maxit, cfg.linear_solver)


def run_flow(cfg: FlowConfig, progress: Callable | None = None) -> FlowTrajectory:
    """Integrate from t0 to t1 with geometric steps dt <= dt_rel * t."""
    f, eta = build_initial(cfg)
    if abs(f.t - cfg.t0) > 1e-12 * cfg.t0:
        f = f.with_u(f.u, cfg.t0)
    st = make_stepper(cfg, f, eta)
    traj = FlowTrajectory([f], [], cfg, eta)
    t = cfg.t0
    dt_ctl = cfg.dt0 if cfg.dt0 is not None else cfg.dt_rel * cfg.t0
    outs = list(cfg.output_times)
    w_prev = w_cur = None
    dt_prev = None
    while outs:
        target = outs[0]
        dt = min(dt_ctl, cfg.dt_rel * t, cfg.dt_max)
        if t + dt >= target * (1.0 - 1e-9):
            dt = target - t
        guess = None
        if cfg.predictor and w_prev is not None and dt_prev:
            guess = w_cur + (w_cur - w_prev) * (dt / dt_prev)
        for attempt in range(11):
            try:
                res = st.step(f, dt, guess)
                break
            except (ConvergenceError, StateError) as exc:
                if attempt == 10:
                    raise ConvergenceError(f"step at t={t!r} failed after 10 halvings") from exc
                dt *= 0.5
                guess = None
        w_prev, w_cur, dt_prev = w_cur, res.w, dt
        f = res.field
        t = f.t
        traj.steps.append(StepInfo(t, dt, res.newton_iters, res.residual))
        if res.newton_iters < 5:
            dt_ctl = 1.5 * dt
        elif res.newton_iters > 10:
            dt_ctl = 0.5 * dt
        else:
            dt_ctl = dt
        if abs(t - target) <= 1e-12 * target:
            traj.snapshots.append(f)
            outs.pop(0)
            if progress:
                progress(f)
    return traj


# ------------------------------------------------------------ diagnostics

def _interp_shift(f: ConformalField, dx: float, dtheta: float) -> np.ndarray:
    """log u at (x - dx, theta - dtheta), bilinear, for every grid node.

    Nodes whose source point leaves the x-range get nan.
    """
    g = f.grid
    w = np.log(f.u)
    gx = np.arange(g.nx) - dx / g.h_x
    i = np.floor(gx + 1e-9).astype(int)
    a = gx - i
    a[np.abs(a) < 1e-9] = 0.0
    top = (i == g.nx - 1) & (a == 0.0)
    i[top], a[top] = g.nx - 2, 1.0
    valid = (i >= 0) & (i <= g.nx - 2)
    i = np.clip(i, 0, g.nx - 2)
    wx = (1 - a)[:, None] * w[i] + a[:, None] * w[i + 1]
    wx[~valid] = np.nan
    if g.n_theta == 1 or dtheta == 0.0:
        return wx
    if not g.periodic:
        raise InputError("a fibre shift needs a periodic fibre")
    gt = np.mod(np.arange(g.n_theta) - dtheta / g.h_theta, g.n_theta)
    j = np.floor(gt + 1e-9).astype(int)
    b = gt - j
    b[np.abs(b) < 1e-9] = 0.0
    j %= g.n_theta
    return (1 - b)[None, :] * wx[:, j] + b[None, :] * wx[:, (j + 1) % g.n_theta]


def self_similarity_field(traj: FlowTrajectory, alpha: float, beta: float, t1: float, t2: float,
                          margin: float = 0.1):
    """(x, relative deviation field on the core)."""
    if not t1 < t2:
        raise InputError("need t1 < t2")
    f1, f2 = traj.at(t1), traj.at(t2)
    g = f1.grid
    D = math.log(t2 / t1) / alpha
    L = g.x_max - g.x_min
    core = (g.x >= g.x_min + margin * L - 1e-12) & (g.x <= g.x_max - margin * L + 1e-12)
    if np.any(g.x[core] - D < g.x_min - 1e-9):
        raise InputError("shift exceeds grid")
    w1 = _interp_shift(f1, D, beta * D)
    dev = np.abs((t2 / t1) * np.exp(w1[core]) / f2.u[core] - 1.0)
    return g.x[core], dev


def check_self_similarity(traj: FlowTrajectory, alpha: float, beta: float, t1: float, t2: float,
                          margin: float = 0.1) -> float:
    _, dev = self_similarity_field(traj, alpha, beta, t1, t2, margin)
    return float(np.max(dev))


def left_tail_mass(f: ConformalField, kind: str | None) -> np.ndarray:
    """Per-fibre-node mass left of x_min for an analytic end model."""
    if kind == SMOOTH_ORIGIN:
        return f.u[0] / 2.0                       # u ~ A e^{2x}
    if kind == CUSP:
        return np.sqrt(2.0 * f.t * f.u[0])         # u ~ 2t / sigma^2
    return np.zeros(f.grid.n_theta)


def right_tail_mass(f: ConformalField, kind: str | None) -> np.ndarray:
    if kind == CUSP:
        return np.sqrt(2.0 * f.t * f.u[-1])
    return np.zeros(f.grid.n_theta)


def _fibre_sum(f: ConformalField, per_node: np.ndarray) -> float:
    g = f.grid
    if g.axisymmetric:
        return float(per_node[0] * TWO_PI)
    if g.periodic:
        return float(np.sum(per_node) * g.h_theta)
    return float(np.trapezoid(per_node, g.theta))


def field_box_mass(f: ConformalField, B: Box, left_tail: str | None = None) -> float:
    """metric_box_mass, allowing a = -inf via an analytic left tail."""
    a, b = B.x
    g = f.grid
    if a == -math.inf:
        if left_tail is None:
            raise InputError("box reaches x = -inf but no tail model is given")
        full = all(d - c >= TWO_PI for c, d in B.fibre_set) or g.axisymmetric
        if not full:
            raise InputError("tail boxes must cover the whole fibre")
        tail = _fibre_sum(f, left_tail_mass(f, left_tail))
        return tail + metric_box_mass(f, Box((g.x_min, b), B.fibre_set))
    return metric_box_mass(f, B)


def total_area(f: ConformalField, left: str | None, right: str | None) -> float:
    return (total_grid_mass(f) + _fibre_sum(f, left_tail_mass(f, left))
            + _fibre_sum(f, right_tail_mass(f, right)))


@dataclass(frozen=True)
class AttainmentRow:
    box: Box
    exact: float
    times: tuple
    masses: tuple
    extrapolated: float
    exponent: float | None
    rel_gap: float


def richardson(ts: Sequence[float], ms: Sequence[float]):
    """Extrapolate M(t) = M0 + C t^p to t = 0 from the finest samples.

    The exponent is fitted from the two finest pairs; without a clean
    monotone pattern the finest sample is returned.
    """
    order = np.argsort(ts)
    ts = np.asarray(ts, dtype=float)[order]
    ms = np.asarray(ms, dtype=float)[order]
    if ts.size < 3:
        return float(ms[0]), None
    d1, d2 = ms[1] - ms[0], ms[2] - ms[1]
    scale = max(abs(ms[0]), 1e-300)
    if abs(d1) < 1e-13 * scale or d1 * d2 <= 0.0:
        return float(ms[0]), None
    rho = ts[1] / ts[0]
    p = math.log(d2 / d1) / math.log(ts[2] / ts[1])
    if not (0.25 <= p <= 4.0):
        return float(ms[0]), None
    return float(ms[0] - d1 / (rho ** p - 1.0)), p


def check_attainment(trajectories: Sequence[FlowTrajectory], e: ProductExpander, boxes,
                     left_tail: str | None = None) -> list:
    """Masses at the earliest output of each run, extrapolated to t = 0."""
    rows = []
    probes = [tr.snapshots[1] for tr in trajectories]
    for B in boxes:
        exact = box_mass(e, B)
        ts = tuple(f.t for f in probes)
        ms = tuple(field_box_mass(f, B, left_tail) for f in probes)
        if exact == 0.0 and all(m == 0.0 for m in ms):
            rows.append(AttainmentRow(B, 0.0, ts, ms, 0.0, None, 0.0))
            continue
        m0, p = richardson(ts, ms)
        gap = abs(m0 - exact) / exact if exact > 0 else abs(m0)
        rows.append(AttainmentRow(B, exact, ts, ms, m0, p, gap))
    return rows


def comparison_margin(traj1: FlowTrajectory, traj2: FlowTrajectory) -> float:
    """max over shared snapshots of u1 - u2."""
    worst = -math.inf
    t2 = {round(s.t, 12): s for s in traj2.snapshots}
    shared = 0
    for s in traj1.snapshots:
        o = t2.get(round(s.t, 12))
        if o is None:
            continue
        if o.u.shape != s.u.shape:
            raise InputError("trajectories live on different grids")
        shared += 1
        worst = max(worst, float(np.max(s.u - o.u)))
    if shared == 0:
        raise InputError("trajectories share no snapshot times")
    return worst


def check_comparison(traj1: FlowTrajectory, traj2: FlowTrajectory, atol: float = 1e-8) -> bool:
    return comparison_margin(traj1, traj2) <= atol


def u_over_t_violation(traj: FlowTrajectory, skip_initial: bool = True) -> float:
    """max over snapshot pairs t_a < t_b of u_b/t_b - u_a/t_a."""
    snaps = traj.snapshots[1:] if skip_initial else traj.snapshots
    if len(snaps) < 2:
        raise InputError("need at least two snapshots")
    ratios = [s.u / s.t for s in snaps]
    worst = -math.inf
    running_min = ratios[0]
    for r in ratios[1:]:
        worst = max(worst, float(np.max(r - running_min)))
        running_min = np.minimum(running_min, r)
    return worst


def check_u_over_t_monotone(traj: FlowTrajectory, atol: float = 1e-8,
                            skip_initial: bool = True) -> bool:
    """u/t nonincreasing between flow outputs.

    The initial snapshot is mollified measure data rather than flow output
    and is skipped by default.
    """
    return u_over_t_violation(traj, skip_initial) <= atol


@dataclass(frozen=True)
class TruncatedPlane:
    """mu restricted to the ball |z| < e^{x_cut} for a rotation-invariant plane family."""

    expander: ProductExpander
    x_cut: float

    def __post_init__(self):
        if not self.expander.tag.plane:
            raise InputError("truncated plane measure needs a plane family")

    def ball_mass(self, r: float) -> float:
        e = self.expander
        rr = min(r, math.exp(self.x_cut))
        return e.nu.total() * rr ** e.alpha / e.alpha

    def total(self) -> float:
        return self.ball_mass(math.inf)

    @property
    def extinction_time(self) -> float:
        return self.total() / (4.0 * math.pi)


@dataclass(frozen=True)
class AreaBallReport:
    slope: float
    expected_slope: float
    slope_rel_error: float
    fit_times: tuple
    samples: tuple        # (r, R, t, lhs, rhs, ok)

    @property
    def inequality_holds(self) -> bool:
        return all(s[-1] for s in self.samples)


def ball_bound(r: float, R: float, t: float) -> float:
    return 8.0 * math.pi * t / (1.0 - (r / R) ** 2)


def check_area_law_and_ball_inequality(traj: FlowTrajectory, measure: TruncatedPlane,
                                       samples: Sequence[tuple] = (),
                                       fit_window=(0.05, 0.2)) -> AreaBallReport:
    """Area slope against -4 pi and mu(B_r) <= mu_t(B_R) + 8 pi t / (1 - (r/R)^2)."""
    T = measure.extinction_time
    lo, hi = fit_window[0] * T, fit_window[1] * T
    fit = [s for s in traj.snapshots[1:] if lo * (1 - 1e-9) <= s.t <= hi * (1 + 1e-9)]
    if len(fit) < 2:
        raise InputError("need at least two snapshots inside the fit window")
    ts = np.array([s.t for s in fit])
    areas = np.array([total_area(s, SMOOTH_ORIGIN, CUSP) for s in fit])
    slope = float(np.polyfit(ts, areas, 1)[0])
    expected = -4.0 * math.pi
    out = []
    for r, R, t in samples:
        if not (0.0 < r < R):
            raise InputError("need 0 < r < R")
        mr = measure.ball_mass(r)
        if not (0.0 < t < mr / (8.0 * math.pi)):
            raise InputError(f"t = {t!r} out of range for r = {r!r}")
        f = traj.at(t)
        g = f.grid
        xR = math.log(R)
        if xR > g.x_max:
            raise InputError("R beyond the grid")
        lhs = mr
        rhs = field_box_mass(f, Box((-math.inf, xR), ((0.0, TWO_PI),)), SMOOTH_ORIGIN) \
            + ball_bound(r, R, t)
        out.append((r, R, t, lhs, rhs, lhs <= rhs))
    return AreaBallReport(slope, expected, abs(slope - expected) / abs(expected),
                          tuple(ts), tuple(out))
