"""Rotationally symmetric expanding solitons from the reduced ODE.

For u = u(x) and X = (1/alpha) d/dx the soliton equation reduces to

    w'' = e^w (1 - w'/alpha),    w = log u.

Profiles are normalised so that u(x) e^{-alpha x} -> 1 as x -> +inf, i.e.
they correspond to the measure e^{alpha x} dx (x) dtheta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .errors import InputError, ShootingError

CUSP = "cusp"
SMOOTH_ORIGIN = "smooth_origin"


def ode_rhs(alpha: float) -> Callable:
    """Right-hand side of the first-order system y = (w, p[, F]).

    The optional third component accumulates F' = e^w / alpha, the
    derivative of the soliton potential.
    """
    if not alpha > 0.0:
        raise InputError("alpha must be positive")

    def rhs(x, y):
        eu = math.exp(min(y[0], 300.0))
        out = [y[1], eu * (1.0 - y[1] / alpha)]
        if len(y) > 2:
            out.append(eu / alpha)
        return out

    return rhs


def cusp_coefficients(alpha: float) -> tuple:
    """(c, d, e) of sigma(s) = s + c log s + d log(s)/s + e/s, u = 2/sigma^2.

    Here s = -x is the distance into the cusp; the expansion follows from
    substituting into the reduced equation order by order.
    """
    c = -2.0 / (3.0 * alpha)
    d = 4.0 / (9.0 * alpha ** 2)
    e = 1.0 / (3.0 * alpha ** 2)
    return c, d, e


def cusp_sigma(s, alpha: float):
    """sigma(s) and sigma'(s) of the cusp expansion."""
    c, d, e = cusp_coefficients(alpha)
    s = np.asarray(s, dtype=float)
    L = np.log(s)
    sig = s + c * L + d * L / s + e / s
    dsig = 1.0 + c / s + d * (1.0 - L) / s ** 2 - e / s ** 2
    return sig, dsig


@dataclass
class SolitonProfile:
    alpha: float
    end: str
    x: np.ndarray
    u: np.ndarray
    f: np.ndarray
    c_minus: float
    c_plus: float
    nfev: int = 0
    _w: Callable | None = field(default=None, repr=False)

    @property
    def smooth_origin(self) -> bool:
        return self.end == SMOOTH_ORIGIN

    def __call__(self, x) -> np.ndarray:
        """u1 at arbitrary x (dense ODE output)."""
        if self._w is None:
            return np.exp(np.interp(x, self.x, np.log(self.u)))
        return np.exp(self._w(np.asarray(x, dtype=float)))


def _start_state(alpha: float, end: str, x_start: float):
    if end == CUSP:
        s0 = -x_start
        sig, dsig = cusp_sigma(s0, alpha)
        return [math.log(2.0) - 2.0 * math.log(float(sig)), 2.0 * float(dsig) / float(sig), 0.0]
    # smooth origin: w = 2x + (1 - 2/alpha) e^{2x}/4 + O(e^{4x})
    q = math.exp(2.0 * x_start)
    return [2.0 * x_start + 0.25 * (1.0 - 2.0 / alpha) * q,
            2.0 + 0.5 * (1.0 - 2.0 / alpha) * q, 0.0]


def shoot(alpha: float, end: str = CUSP, x_window=(-40.0, 20.0), n_samples: int = 6001,
          rtol: float = 1e-11, atol: float = 1e-13, far: float | None = None,
          cone_level: float = 60.0, max_step: float = math.inf) -> SolitonProfile:
    """Integrate the reduced soliton ODE and normalise to c_plus = 1.

    Integration runs from deep inside the left end (cusp expansion or
    smooth-origin series) towards the cone.  Once e^w / alpha^2 exceeds
    ``cone_level`` the remaining correction 1 - w'/alpha is below round-off
    and the solution is continued as the exact cone w = w_e + alpha (x - x_e).
    The translation invariance of the ODE then fixes c_plus = 1 exactly.
    ``max_step`` bounds the integrator step, which smooths the dense output
    when the profile is differentiated numerically.
    """
    if not alpha > 0.0:
        raise InputError("alpha must be positive")
    end = end.lower().replace("-", "_")
    if end not in (CUSP, SMOOTH_ORIGIN):
        raise InputError(f"unknown end type {end!r}")
    if far is None:
        far = 1e4 if end == CUSP else 80.0
    x_start = -far
    y0 = _start_state(alpha, end, x_start)

    def hit(x, y):
        return math.exp(y[0]) / alpha ** 2 - cone_level
    hit.terminal = True

    sol = solve_ivp(ode_rhs(alpha), (x_start, x_start + 1e6), y0, method="RK45",
                    rtol=rtol, atol=atol, events=hit, dense_output=True, max_step=max_step)
    if sol.status != 1:
        raise ShootingError("cone end not reached", trace=[sol.message, sol.t[-1]])
    xe = float(sol.t[-1])
    we, pe, Fe = (float(v) for v in sol.y[:, -1])
    if abs(1.0 - pe / alpha) > max(1e-6, 1e3 * rtol):
        raise ShootingError("cone asymptote not attained at the hand-over point",
                            trace=[xe, we, pe])
    shift = (we - alpha * xe) / alpha

    def w_orig(xx):
        xx = np.asarray(xx, dtype=float)
        inner = sol.sol(np.clip(xx, x_start, xe))[0]
        return np.where(xx < xe, inner, we + alpha * (xx - xe))

    def F_orig(xx):
        xx = np.asarray(xx, dtype=float)
        inner = sol.sol(np.clip(xx, x_start, xe))[2]
        outer = Fe + math.exp(we) * np.expm1(alpha * (xx - xe)) / alpha ** 2
        return np.where(xx < xe, inner, outer)

    def w1(x):
        return w_orig(np.asarray(x) - shift)

    lo, hi = x_window
    if lo - shift < x_start:
        raise ShootingError("window extends beyond the integration start", trace=[lo, shift])
    x = np.linspace(lo, hi, n_samples)
    u = np.exp(w1(x))
    f = (F_orig(x - shift) - F_orig(-shift))
    c_plus = fit_cone(x, u, alpha)
    c_minus = fit_cusp(x, u, alpha) if end == CUSP else fit_origin(x, u)
    return SolitonProfile(alpha, end, x, u, f, c_minus, c_plus, int(sol.nfev), w1)


def fit_cone(x, u, alpha, width: float = 5.0) -> float:
    """Mean of u e^{-alpha x} over the last ``width`` units."""
    sel = x >= x[-1] - width
    return float(np.mean(u[sel] * np.exp(-alpha * x[sel])))


def fit_origin(x, u, width: float = 5.0) -> float:
    sel = x <= x[0] + width
    return float(np.mean(u[sel] * np.exp(-2.0 * x[sel])))


def fit_cusp(x, u, alpha, width: float = 5.0) -> float:
    """Cusp coefficient c with u ~ 2c / sigma(s)^2 on the first ``width`` units.

    The logarithmic corrections of the cusp are fitted together with a free
    translation of s: sqrt(2/u) = A (sigma-like basis) + B (its s-derivative),
    and c = 1/A^2.  The bare ratio u x^2 / 2 converges only like 1/log|x|.
    """
    sel = x <= x[0] + width
    s = -x[sel]
    c, d, _ = cusp_coefficients(alpha)
    L = np.log(s)
    basis0 = s + c * L + d * L / s + 1.0 / (3.0 * alpha ** 2 * s)
    basis1 = 1.0 - 2.0 / (3.0 * alpha * s)
    M = np.column_stack([basis0, basis1])
    (A, _), *_ = np.linalg.lstsq(M, np.sqrt(2.0 / u[sel]), rcond=None)
    return float(1.0 / A ** 2)


@dataclass(frozen=True)
class CatalogEntry:
    family: str
    tag: str
    alphas: tuple
    end: str
    description: str
    labels: tuple = ()


def catalog(alphas_cone=(0.5, 1.0, 2.0), alphas_plane=(1.0, 2.0, 3.0)) -> list:
    """The three gradient families with sampled alpha values."""
    return [
        CatalogEntry("(1)", "Bi", (1.0,), CUSP,
                     "universal cover of the cusp-cone soliton on the punctured plane; "
                     "same radial profile as (2) with alpha = 1"),
        CatalogEntry("(2)", "Bii", tuple(alphas_cone), CUSP,
                     "cusp+cone: one cusp end and one conical end of angle pi*alpha"),
        CatalogEntry("(3)", "Ci", tuple(alphas_plane), SMOOTH_ORIGIN,
                     "smoothed cone: one conical end, smooth at the origin",
                     tuple("Gaussian" if a == 2.0 else "" for a in alphas_plane)),
    ]


def write_profile_csv(p: SolitonProfile, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# alpha={p.alpha!r} c_minus={p.c_minus!r} c_plus={p.c_plus!r}\n")
        fh.write("x,u,f\n")
        for a, b, c in zip(p.x, p.u, p.f):
            fh.write(f"{a:.17g},{b:.17g},{c:.17g}\n")


def read_profile_csv(path) -> SolitonProfile:
    with open(path, encoding="utf-8") as fh:
        head = fh.readline().lstrip("#").split()
    meta = dict(kv.split("=", 1) for kv in head)
    data = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
    return SolitonProfile(float(meta["alpha"]), meta.get("end", CUSP), data[:, 0], data[:, 1],
                          data[:, 2], float(meta["c_minus"]), float(meta["c_plus"]))
