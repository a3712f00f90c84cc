"""Measure expanders of product type and their exact measure algebra.

Every expander is written on the cylinder (or strip) with coordinates
(x, theta) as mu = e^{alpha x} dx (x) nu, optionally pushed forward by the
shear F_beta(x, theta) = (x, theta + beta x).  The plane families use
log-polar coordinates z = e^{x + i theta}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .fibre_measure import (TWO_PI, Fibre, FibreMeasure,
                            _circle_cdf, format_measure, nu_invariant_under_full_group,
                            nu_mass, nu_match, parse_measure_lines)


class FamilyTag(Enum):
    Ai = "Ai"
    Aii = "Aii"
    Bi = "Bi"
    Bii = "Bii"
    Biii = "Biii"
    Ci = "Ci"
    Cii = "Cii"

    @property
    def fibre(self) -> Fibre:
        return {"Ai": Fibre.HALF_LINE, "Aii": Fibre.PI_INTERVAL,
                "Bi": Fibre.LINE}.get(self.value, Fibre.CIRCLE)

    @property
    def twisted(self) -> bool:
        return self in (FamilyTag.Biii, FamilyTag.Cii)

    @property
    def plane(self) -> bool:
        return self in (FamilyTag.Ci, FamilyTag.Cii)

    @property
    def fixed_alpha(self) -> bool:
        return self in (FamilyTag.Ai, FamilyTag.Bi)

    @property
    def surface(self) -> str:
        return {"Ai": "half-plane", "Aii": "strip", "Bi": "plane",
                "Bii": "cylinder", "Biii": "cylinder",
                "Ci": "punctured plane", "Cii": "punctured plane"}[self.value]

    @classmethod
    def parse(cls, name) -> "FamilyTag":
        if isinstance(name, FamilyTag):
            return name
        for tag in cls:
            if tag.value.lower() == str(name).strip().lower():
                return tag
        raise InputError(f"unknown family {name!r}")


@dataclass(frozen=True)
class ProductExpander:
    tag: FamilyTag
    alpha: float
    beta: float
    nu: FibreMeasure

    @property
    def vector_field(self) -> tuple:
        """Components (X^x, X^theta) of the expanding field."""
        return 1.0 / self.alpha, self.beta / self.alpha


@dataclass(frozen=True)
class Box:
    """[a, b] x A in cylinder coordinates; A is a union of fibre intervals."""

    x: tuple
    fibre_set: tuple

    def __post_init__(self):
        a, b = float(self.x[0]), float(self.x[1])
        if math.isnan(a) or math.isnan(b) or a > b:
            raise InputError(f"invalid x-interval [{a!r}, {b!r}]")
        object.__setattr__(self, "x", (a, b))
        object.__setattr__(self, "fibre_set",
                           tuple((float(c), float(d)) for c, d in self.fibre_set))

    @classmethod
    def full(cls, a: float, b: float, fibre: Fibre = Fibre.CIRCLE) -> "Box":
        return cls((a, b), ((fibre.lo, fibre.hi),))

    def shifted(self, dx: float, dtheta: float = 0.0) -> "Box":
        return Box((self.x[0] + dx, self.x[1] + dx),
                   tuple((c + dtheta, d + dtheta) for c, d in self.fibre_set))


def make_expander(tag, alpha=None, beta=None, nu: FibreMeasure | None = None) -> ProductExpander:
    tag = FamilyTag.parse(tag)
    if tag.fixed_alpha:
        if alpha is None:
            alpha = 1.0
        if float(alpha) != 1.0:
            raise InputError(f"alpha is fixed to 1 for family {tag.value}")
    if alpha is None:
        raise InputError("invalid alpha: missing")
    alpha = float(alpha)
    if not (alpha > 0.0 and math.isfinite(alpha)):
        raise InputError(f"invalid alpha: {alpha!r}")
    if tag.twisted:
        if beta is None or not (float(beta) > 0.0 and math.isfinite(float(beta))):
            raise InputError(f"invalid beta: family {tag.value} needs beta > 0")
        beta = float(beta)
    else:
        if beta is not None and float(beta) != 0.0:
            raise InputError(f"invalid beta: family {tag.value} is untwisted")
        beta = 0.0
    if nu is None:
        raise InputError("measure is trivial")
    if nu.fibre is not tag.fibre:
        raise InputError(f"wrong fibre: family {tag.value} needs {tag.fibre.value}, "
                         f"got {nu.fibre.value}")
    return ProductExpander(tag, alpha, beta, nu)


# ------------------------------------------------------------ box masses

def _exp_integral(alpha: float, a: float, b: float) -> float:
    """Integral of e^{alpha x} over [a, b]."""
    if b <= a:
        return 0.0
    if a == -math.inf:
        return math.exp(alpha * b) / alpha
    return math.exp(alpha * a) * math.expm1(alpha * (b - a)) / alpha


def _exp_linear_integral(alpha, x0, x1, g0, g1, m):
    """Integral over [x0, x1] of e^{alpha x} (g0 + g1 (x - m))."""
    i0 = _exp_integral(alpha, x0, x1)
    if g1 == 0.0:
        return g0 * i0
    i1 = (math.exp(alpha * x1) * (x1 - m) - math.exp(alpha * x0) * (x0 - m)) / alpha - i0 / alpha
    return g0 * i0 + g1 * i1


def _sheared_slab(e: ProductExpander, A, a: float, b: float) -> float:
    """Integral over finite [a, b] of e^{alpha x} nu(A - beta x)."""
    nu, alpha, beta = e.nu, e.alpha, e.beta
    feats = nu.features()
    arcs = [(c, d) for c, d in A if d > c]
    cuts = {a, b}
    for c, d in arcs:
        if d - c >= TWO_PI:
            continue
        for end in (c, d):
            for p in feats:
                # end - beta x = p + 2 pi j
                jlo = math.ceil((end - p - beta * b) / TWO_PI)
                jhi = math.floor((end - p - beta * a) / TWO_PI)
                for j in range(jlo, jhi + 1):
                    x = (end - p - TWO_PI * j) / beta
                    if a < x < b:
                        cuts.add(x)
    xs = sorted(cuts)
    period_mass = nu_mass(nu, [(0.0, TWO_PI)])
    total = 0.0
    for x0, x1 in zip(xs, xs[1:]):
        if x1 <= x0:
            continue
        m = 0.5 * (x0 + x1)
        g0 = g1 = 0.0
        for c, d in arcs:
            if d - c >= TWO_PI:
                g0 += period_mass
                continue
            lo, hi = c - beta * m, d - beta * m
            g0 += _circle_cdf(nu, hi) - _circle_cdf(nu, lo)
            g1 -= beta * (nu.density_at(hi) - nu.density_at(lo))
        total += _exp_linear_integral(alpha, x0, x1, g0, g1, m)
    return total


def box_mass(e: ProductExpander, B: Box) -> float:
    a, b = B.x
    if b <= a:
        return 0.0
    if not e.tag.twisted:
        nA = nu_mass(e.nu, B.fibre_set)
        if nA == 0.0:
            return 0.0
        if b == math.inf:
            return math.inf
        return nA * _exp_integral(e.alpha, a, b)
    if b == math.inf:
        return math.inf if nu_mass(e.nu, B.fibre_set) > 0.0 else 0.0
    if a == -math.inf:
        # nu(A - beta x) has period 2 pi / beta in x
        P = TWO_PI / e.beta
        return _sheared_slab(e, B.fibre_set, b - P, b) / -math.expm1(-e.alpha * P)
    return _sheared_slab(e, B.fibre_set, a, b)


def flow_map_pullback_mass(e: ProductExpander, B: Box, s: float) -> float:
    """(psi_s^* mu)(B) = mu(psi_s(B))."""
    return box_mass(e, B.shifted(s / e.alpha, e.beta * s / e.alpha))


@dataclass(frozen=True)
class ExpandingReport:
    max_rel_error: float
    fd_rel_error: float
    samples: int


def default_boxes(e: ProductExpander, n: int = 20, seed: int = 0) -> list:
    """Deterministic random boxes of positive mass."""
    rng = np.random.default_rng(seed)
    boxes = []
    fib = e.nu.fibre
    for _ in range(200 * n):
        if len(boxes) == n:
            break
        a = rng.uniform(-3.0, 2.0)
        b = a + rng.uniform(0.1, 2.0)
        if fib.periodic:
            c = rng.uniform(0.0, TWO_PI)
            A = ((c, c + rng.uniform(0.5, TWO_PI)),)
        else:
            feats = [p for p in e.nu.features() if math.isfinite(p)] or [0.5]
            lo = max(fib.lo, min(feats) - 1.0)
            hi = min(fib.hi, max(feats) + 1.0)
            c = rng.uniform(lo, hi)
            A = ((c, min(fib.hi, c + rng.uniform(0.2, 2.0))),)
        B = Box((a, b), A)
        if box_mass(e, B) > 0.0:
            boxes.append(B)
    return boxes


def expanding_check(e: ProductExpander, s_values: Sequence[float] = (-1.0, 0.5, 1.0),
                    boxes: Iterable[Box] | None = None, fd_step: float = 1e-4) -> ExpandingReport:
    boxes = list(default_boxes(e) if boxes is None else boxes)
    err = 0.0
    fd_err = 0.0
    for B in boxes:
        m0 = box_mass(e, B)
        if not m0 > 0.0:
            raise InputError("expanding check needs boxes of positive mass")
        for s in s_values:
            ref = math.exp(s) * m0
            err = max(err, abs(flow_map_pullback_mass(e, B, s) - ref) / ref)
        deriv = (flow_map_pullback_mass(e, B, fd_step)
                 - flow_map_pullback_mass(e, B, -fd_step)) / (2 * fd_step)
        fd_err = max(fd_err, abs(deriv - m0) / m0)
    return ExpandingReport(err, fd_err, len(boxes) * len(tuple(s_values)))


# ------------------------------------------------------------ isomorphism

def expanders_isomorphic(e1: ProductExpander, e2: ProductExpander, tol: float = 1e-9):
    """Witness (lam, phi) of an isomorphism, or None."""
    if e1.tag is not e2.tag:
        return None
    if abs(e1.alpha - e2.alpha) > tol * max(e1.alpha, e2.alpha):
        return None
    if abs(e1.beta - e2.beta) > tol * max(e1.beta, e2.beta, 1.0):
        return None
    return nu_match(e1.nu, e2.nu, orientation_preserving_only=e1.tag.twisted, tol=tol)


def is_gradient(e: ProductExpander) -> bool:
    if e.tag not in (FamilyTag.Bi, FamilyTag.Bii, FamilyTag.Ci):
        return False
    return nu_invariant_under_full_group(e.nu)


def plane_coordinates(e: ProductExpander, r: float) -> Box:
    """The Euclidean ball B_r about the origin as a half-cylinder box."""
    if not e.tag.plane:
        raise InputError(f"family {e.tag.value} is not a plane family")
    if not r > 0.0:
        raise InputError("ball radius must be positive")
    return Box((-math.inf, math.log(r)), ((0.0, TWO_PI),))


# ------------------------------------------------------------ spec files

def parse_keyvalue_line(line: str):
    """Split ``key = value`` or ``key value``; comments start with #."""
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    if "=" in line:
        k, v = line.split("=", 1)
    else:
        parts = line.split(None, 1)
        k, v = parts[0], parts[1] if len(parts) > 1 else ""
    return k.strip(), v.strip()


MEASURE_KEYS = ("atom", "step", "fibre")


def expander_from_mapping(fields: dict, measure_lines: list) -> ProductExpander:
    if "family" not in fields:
        raise InputError("expander spec has no family")
    tag = FamilyTag.parse(fields["family"])

    def num(key):
        if key not in fields:
            return None
        try:
            return float(fields[key])
        except ValueError:
            raise InputError(f"invalid {key}: {fields[key]!r}") from None

    nu = parse_measure_lines(measure_lines, tag.fibre) if measure_lines else None
    if nu is not None and nu.fibre is not tag.fibre:
        raise InputError(f"wrong fibre: family {tag.value} needs {tag.fibre.value}")
    return make_expander(tag, num("alpha"), num("beta"), nu)


def parse_expander(text: str) -> ProductExpander:
    fields, mlines = {}, []
    for raw in text.splitlines():
        kv = parse_keyvalue_line(raw)
        if kv is None:
            continue
        k, v = kv
        if k.lower() in MEASURE_KEYS:
            mlines.append(f"{k} {v}")
        else:
            fields[k.lower()] = v
    return expander_from_mapping(fields, mlines)


def format_expander(e: ProductExpander) -> str:
    lines = [f"family {e.tag.value}", f"alpha {e.alpha!r}"]
    if e.tag.twisted:
        lines.append(f"beta {e.beta!r}")
    return "\n".join(lines) + "\n" + format_measure(e.nu)


def describe_witness(w) -> str:
    lam, phi = w
    kind = "reflection" if phi.reflect else "rotation/translation"
    return f"lambda = {lam!r}\nphi: {kind}, shift = {phi.shift!r}, reflect = {phi.reflect}"
