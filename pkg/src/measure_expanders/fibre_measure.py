"""Finitely presented Radon measures on a one-dimensional fibre.

A measure is a finite list of atoms plus a piecewise-constant density.
The density is stored as sorted breakpoints ``b_i`` with values ``v_i``;
``v_i`` holds on ``[b_i, b_{i+1})``.  On the circle the pattern is cyclic
(the last value wraps to the first breakpoint); on intervals the density
is zero left of the first breakpoint and the last value extends to the
right end of the fibre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError

TWO_PI = 2.0 * math.pi
DEFAULT_TOL = 1e-9


class Fibre(Enum):
    CIRCLE = "circle"
    LINE = "line"
    HALF_LINE = "halfline"
    PI_INTERVAL = "pi_interval"

    @property
    def lo(self) -> float:
        return {Fibre.CIRCLE: 0.0, Fibre.LINE: -math.inf,
                Fibre.HALF_LINE: 0.0, Fibre.PI_INTERVAL: 0.0}[self]

    @property
    def hi(self) -> float:
        return {Fibre.CIRCLE: TWO_PI, Fibre.LINE: math.inf,
                Fibre.HALF_LINE: math.inf, Fibre.PI_INTERVAL: math.pi}[self]

    @property
    def periodic(self) -> bool:
        return self is Fibre.CIRCLE

    @property
    def isometry_group(self) -> str:
        return {Fibre.CIRCLE: "O(2)", Fibre.LINE: "R x| Z2",
                Fibre.HALF_LINE: "trivial", Fibre.PI_INTERVAL: "Z2"}[self]

    @classmethod
    def parse(cls, name: str) -> "Fibre":
        key = name.strip().lower().replace("-", "_")
        aliases = {"s1": "circle", "r": "line", "half_line": "halfline",
                   "pi": "pi_interval", "interval": "pi_interval"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise InputError(f"unknown fibre kind {name!r}") from None


def wrap_angle(p: float) -> float:
    """Normalise an angle into [0, 2pi)."""
    r = math.fmod(p, TWO_PI)
    if r < 0.0:
        r += TWO_PI
    if r >= TWO_PI:
        r = 0.0
    return r


@dataclass(frozen=True)
class FibreIsometry:
    """y -> s*y + shift with s = -1 when ``reflect`` is set."""

    reflect: bool = False
    shift: float = 0.0

    @classmethod
    def identity(cls) -> "FibreIsometry":
        return cls(False, 0.0)

    @classmethod
    def rotation(cls, angle: float) -> "FibreIsometry":
        return cls(False, wrap_angle(angle))

    @classmethod
    def translation(cls, d: float) -> "FibreIsometry":
        return cls(False, float(d))

    @classmethod
    def reflection(cls, c: float = 0.0) -> "FibreIsometry":
        """y -> c - y."""
        return cls(True, float(c))

    @classmethod
    def flip(cls) -> "FibreIsometry":
        """The nontrivial isometry y -> pi - y of (0, pi)."""
        return cls(True, math.pi)

    @property
    def sign(self) -> float:
        return -1.0 if self.reflect else 1.0

    @property
    def orientation_preserving(self) -> bool:
        return not self.reflect

    def __call__(self, y: float) -> float:
        return self.sign * y + self.shift

    def inverse(self) -> "FibreIsometry":
        # y = s*z + c  =>  z = s*y - s*c
        return FibreIsometry(self.reflect, -self.sign * self.shift)

    def compose(self, other: "FibreIsometry") -> "FibreIsometry":
        """self o other."""
        return FibreIsometry(self.reflect != other.reflect,
                             self.sign * other.shift + self.shift)

    def normalised(self, fibre: Fibre) -> "FibreIsometry":
        if fibre.periodic:
            return FibreIsometry(self.reflect, wrap_angle(self.shift))
        return self

    def allowed_on(self, fibre: Fibre, tol: float = 1e-12) -> bool:
        if not math.isfinite(self.shift):
            return False
        if fibre in (Fibre.CIRCLE, Fibre.LINE):
            return True
        if fibre is Fibre.HALF_LINE:
            return not self.reflect and abs(self.shift) <= tol
        if self.reflect:
            return abs(self.shift - math.pi) <= tol
        return abs(self.shift) <= tol

    def describe(self) -> str:
        if self.reflect:
            return f"reflection y -> {self.shift!r} - y"
        return f"shift by {self.shift!r}"


@dataclass(frozen=True)
class FibreMeasure:
    fibre: Fibre
    atoms: tuple = ()
    breakpoints: tuple = ()
    values: tuple = ()
    _segments: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        fib = self.fibre
        if not isinstance(fib, Fibre):
            fib = Fibre.parse(str(fib))
            object.__setattr__(self, "fibre", fib)
        atoms = _canonical_atoms(fib, self.atoms)
        bps, vals = _canonical_density(fib, self.breakpoints, self.values)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "breakpoints", bps)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "_segments", _segments(fib, bps, vals))
        if not atoms and not any(v > 0.0 for v in vals):
            raise InputError("measure is trivial")

    # constructors -----------------------------------------------------
    @classmethod
    def atom(cls, fibre: Fibre, position: float, mass: float = 1.0) -> "FibreMeasure":
        return cls(fibre, ((position, mass),))

    @classmethod
    def lebesgue(cls, fibre: Fibre, c: float = 1.0) -> "FibreMeasure":
        return cls(fibre, (), (fibre.lo,), (c,))

    # basic queries ----------------------------------------------------
    @property
    def atom_positions(self) -> tuple:
        return tuple(p for p, _ in self.atoms)

    def total(self) -> float:
        return nu_mass(self, [(self.fibre.lo, self.fibre.hi)])

    def density_at(self, y: float) -> float:
        if self.fibre.periodic:
            y = wrap_angle(y)
        for s, e, v in self._segments:
            if s <= y < e:
                return v
        return 0.0

    def jumps(self) -> tuple:
        """Breakpoints where the density really changes value."""
        if self.fibre.periodic:
            return self.breakpoints if len(self.breakpoints) > 1 else ()
        return tuple(b for b in self.breakpoints if b > self.fibre.lo)

    def features(self) -> tuple:
        return self.atom_positions + self.jumps()

    def support_gaps(self) -> list:
        """Circle only: maximal arcs (start, length) carrying no mass."""
        if not self.fibre.periodic:
            raise InputError("support gaps are defined on the circle only")
        # canonical form merges equal neighbours, so consecutive empty arcs
        # are always separated by an atom
        cuts = sorted(set(self.atom_positions) | set(self.jumps()))
        gaps = []
        for i, a in enumerate(cuts):
            b = cuts[i + 1] if i + 1 < len(cuts) else cuts[0] + TWO_PI
            if self.density_at(0.5 * (a + b)) == 0.0:
                gaps.append((a, b - a))
        return gaps


def _canonical_atoms(fibre: Fibre, atoms: Iterable) -> tuple:
    out = []
    for item in atoms:
        p, m = float(item[0]), float(item[1])
        if not (m > 0.0 and math.isfinite(m)):
            raise InputError(f"atom mass must be positive, got {m!r}")
        if not math.isfinite(p):
            raise InputError("atom position must be finite")
        if fibre.periodic:
            p = wrap_angle(p)
        elif not (fibre.lo < p < fibre.hi) and not (fibre is Fibre.LINE):
            raise InputError(f"atom at {p!r} lies outside the fibre")
        out.append((p, m))
    out.sort()
    for (p, _), (q, _) in zip(out, out[1:]):
        if p == q:
            raise InputError(f"duplicate atom position {p!r}")
    return tuple(out)


def _canonical_density(fibre: Fibre, bps: Sequence, vals: Sequence):
    if len(bps) != len(vals):
        raise InputError("breakpoints and values differ in length")
    pairs = []
    for b, v in zip(bps, vals):
        b, v = float(b), float(v)
        if not (v >= 0.0 and math.isfinite(v)):
            raise InputError(f"density value must be nonnegative, got {v!r}")
        if math.isnan(b):
            raise InputError("breakpoint is nan")
        if fibre.periodic:
            if not math.isfinite(b):
                raise InputError("circle breakpoints must be finite")
            b = wrap_angle(b)
        else:
            if b >= fibre.hi:
                continue
            if b < fibre.lo:
                raise InputError(f"breakpoint {b!r} lies outside the fibre")
        pairs.append((b, v))
    if fibre.periodic:
        pairs.sort()
    for (a, _), (b, _) in zip(pairs, pairs[1:]):
        if not a < b:
            raise InputError("breakpoints must be strictly increasing")
    if not pairs:
        return (), ()
    if fibre.periodic:
        merged = []
        for b, v in pairs:
            if merged and merged[-1][1] == v:
                continue
            merged.append((b, v))
        while len(merged) > 1 and merged[-1][1] == merged[0][1]:
            merged.pop(0)
            merged.sort()
        if len(merged) == 1:
            merged = [(0.0, merged[0][1])]
        if all(v == 0.0 for _, v in merged):
            return (), ()
    else:
        merged = []
        prev = 0.0
        for b, v in pairs:
            if v == prev:
                continue
            merged.append((b, v))
            prev = v
    return tuple(b for b, _ in merged), tuple(v for _, v in merged)


def _segments(fibre: Fibre, bps: tuple, vals: tuple) -> tuple:
    """(start, end, value) pieces; on the circle pieces tile [0, 2pi)."""
    if not bps:
        return ()
    segs = []
    n = len(bps)
    if fibre.periodic:
        if bps[0] > 0.0:
            segs.append((0.0, bps[0], vals[-1]))
        for i in range(n):
            e = bps[i + 1] if i + 1 < n else TWO_PI
            segs.append((bps[i], e, vals[i]))
    else:
        for i in range(n):
            e = bps[i + 1] if i + 1 < n else fibre.hi
            segs.append((bps[i], e, vals[i]))
    return tuple(segs)


def _overlap(a: float, b: float, s: float, e: float) -> float:
    lo, hi = max(a, s), min(b, e)
    return hi - lo if hi > lo else 0.0


def _base_mass(nu: FibreMeasure, a: float, b: float) -> float:
    """Mass of [a, b) with a <= b inside [lo, hi] (circle: inside [0, 2pi])."""
    total = 0.0
    for p, m in nu.atoms:
        if a <= p < b:
            total += m
    for s, e, v in nu._segments:
        if v > 0.0:
            ov = _overlap(a, b, s, e)
            if ov > 0.0:
                total += v * ov
    return total


def _circle_cdf(nu: FibreMeasure, y: float) -> float:
    """Lifted distribution function: mass of [0, y) continued periodically."""
    k = math.floor(y / TWO_PI)
    r = y - k * TWO_PI
    if r >= TWO_PI:
        k, r = k + 1, 0.0
    period = _base_mass(nu, 0.0, TWO_PI)
    return k * period + _base_mass(nu, 0.0, r)


def _check_intervals(fibre: Fibre, A) -> list:
    ivs = [(float(a), float(b)) for a, b in A]
    for a, b in ivs:
        if math.isnan(a) or math.isnan(b) or a > b:
            raise InputError(f"reversed or invalid interval [{a!r}, {b!r})")
    for (a0, b0), (a1, b1) in zip(ivs, ivs[1:]):
        if a1 < b0:
            raise InputError("intervals overlap or are unsorted")
    if not ivs:
        return ivs
    if fibre.periodic:
        if ivs[-1][1] - ivs[0][0] > TWO_PI * (1 + 1e-12):
            raise InputError("interval list wraps more than once around the circle")
    else:
        if ivs[0][0] < fibre.lo or ivs[-1][1] > fibre.hi:
            raise InputError("interval lies outside the fibre")
    return ivs


def nu_mass(nu: FibreMeasure, A) -> float:
    """nu of a finite union of half-open intervals [a, b)."""
    ivs = _check_intervals(nu.fibre, A)
    total = 0.0
    for a, b in ivs:
        if b == a:
            continue
        if nu.fibre.periodic:
            if b - a >= TWO_PI:
                total += _base_mass(nu, 0.0, TWO_PI)
            else:
                total += _circle_cdf(nu, b) - _circle_cdf(nu, a)
        else:
            total += _base_mass(nu, a, b)
    return total


def nu_scale(nu: FibreMeasure, lam: float) -> FibreMeasure:
    lam = float(lam)
    if not (lam > 0.0 and math.isfinite(lam)):
        raise InputError(f"scale factor must be positive, got {lam!r}")
    return FibreMeasure(nu.fibre,
                        tuple((p, m * lam) for p, m in nu.atoms),
                        nu.breakpoints,
                        tuple(v * lam for v in nu.values))


def nu_pushforward(nu: FibreMeasure, phi: FibreIsometry) -> FibreMeasure:
    fib = nu.fibre
    if not phi.allowed_on(fib):
        raise InputError(f"{phi.describe()} is not an isometry of the {fib.value} fibre")
    if fib is Fibre.HALF_LINE:
        return nu
    if fib is Fibre.PI_INTERVAL:
        phi = FibreIsometry.flip() if phi.reflect else FibreIsometry.identity()
    atoms = tuple((phi(p), m) for p, m in nu.atoms)
    bps, vals = nu.breakpoints, nu.values
    n = len(bps)
    if n == 0:
        return FibreMeasure(fib, atoms)
    if not phi.reflect:
        new = [(phi(b), v) for b, v in zip(bps, vals)]
    elif fib.periodic:
        # [b_i, b_{i+1}) maps to (phi(b_{i+1}), phi(b_i)]
        new = [(phi(bps[(i + 1) % n]), vals[i]) for i in range(n)]
    else:
        new = [(phi(fib.hi), vals[-1])]
        new += [(phi(bps[i + 1]), vals[i]) for i in range(n - 1)]
        new.append((phi(bps[0]), 0.0))
        new.sort()
    if fib.periodic:
        new = sorted((wrap_angle(b), v) for b, v in new)
    else:
        new = [(b, v) for b, v in new if b < fib.hi]
    return FibreMeasure(fib, atoms, tuple(b for b, _ in new), tuple(v for _, v in new))


def _cyc_dist(fibre: Fibre, p: float, q: float) -> float:
    d = abs(p - q)
    if fibre.periodic:
        d = min(d, TWO_PI - d)
    return d


def _pos_tol(fibre: Fibre, p: float, tol: float) -> float:
    if fibre.periodic:
        return tol * TWO_PI
    return tol * max(1.0, abs(p))


def measures_close(a: FibreMeasure, b: FibreMeasure, tol: float = DEFAULT_TOL) -> bool:
    """Featurewise equality up to relative tolerance ``tol``."""
    if a.fibre is not b.fibre:
        return False
    fib = a.fibre
    if len(a.atoms) != len(b.atoms):
        return False
    used = set()
    for p, m in a.atoms:
        hit = None
        for j, (q, n) in enumerate(b.atoms):
            if j not in used and _cyc_dist(fib, p, q) <= _pos_tol(fib, p, tol):
                hit = j
                break
        if hit is None:
            return False
        used.add(hit)
        n = b.atoms[hit][1]
        if abs(m - n) > tol * max(m, n):
            return False
    ja, jb = a.jumps(), b.jumps()
    if len(ja) != len(jb):
        return False
    for p in ja:
        if not any(_cyc_dist(fib, p, q) <= _pos_tol(fib, p, tol) for q in jb):
            return False
    scale = max(a.values + b.values + (0.0,))
    if scale == 0.0:
        return True
    pts = sorted(set(a.breakpoints) | set(b.breakpoints))
    probes = []
    finite = [x for x in pts if math.isfinite(x)]
    for x, y in zip(pts, pts[1:]):
        if math.isfinite(x) and y - x > 10 * _pos_tol(fib, x, tol):
            probes.append(0.5 * (x + y))
    if fib.periodic and pts:
        x, y = pts[-1], pts[0] + TWO_PI
        if y - x > 10 * _pos_tol(fib, x, tol):
            probes.append(wrap_angle(0.5 * (x + y)))
    elif finite:
        right = fib.hi if math.isfinite(fib.hi) else finite[-1] + 2.0
        if right - finite[-1] > 10 * _pos_tol(fib, finite[-1], tol):
            probes.append(0.5 * (finite[-1] + right))
        if fib is Fibre.LINE:
            probes.append(finite[0] - 1.0)
    elif pts:
        probes.append(0.0)
    for y in probes:
        if abs(a.density_at(y) - b.density_at(y)) > tol * scale:
            return False
    return True


def _orientations(fibre: Fibre, orientation_preserving_only: bool) -> list:
    if fibre is Fibre.HALF_LINE:
        return [False]
    if orientation_preserving_only:
        return [False]
    return [False, True]


def _scale_candidates(nu1, nu2, phi):
    t1, t2 = nu1.total(), nu2.total()
    if math.isfinite(t1) and math.isfinite(t2):
        return t1 / t2
    if math.isfinite(t1) != math.isfinite(t2):
        return None
    if nu1.atoms and nu2.atoms:
        pushed = nu_pushforward(nu1, phi)
        p, m = pushed.atoms[0]
        for q, n in nu2.atoms:
            if _cyc_dist(nu1.fibre, p, q) <= _pos_tol(nu1.fibre, p, 1e-9):
                return m / n
        return None
    m1, m2 = max(nu1.values + (0.0,)), max(nu2.values + (0.0,))
    if m1 > 0.0 and m2 > 0.0:
        return m1 / m2
    return None


def nu_match(nu1: FibreMeasure, nu2: FibreMeasure,
             orientation_preserving_only: bool = False,
             tol: float = DEFAULT_TOL):
    """Find (lam, phi) with phi_* nu1 = lam * nu2, or None."""
    if nu1.fibre is not nu2.fibre:
        raise InputError("measures live on different fibres")
    fib = nu1.fibre
    if len(nu1.atoms) != len(nu2.atoms) or len(nu1.jumps()) != len(nu2.jumps()):
        return None
    candidates = []
    if fib is Fibre.HALF_LINE:
        candidates.append(FibreIsometry.identity())
    elif fib is Fibre.PI_INTERVAL:
        candidates.append(FibreIsometry.identity())
        if not orientation_preserving_only:
            candidates.append(FibreIsometry.flip())
    else:
        if nu1.atoms:
            anchor, targets = nu1.atoms[0][0], nu2.atom_positions
        elif nu1.jumps():
            anchor, targets = nu1.jumps()[0], nu2.jumps()
        else:
            anchor, targets = None, ()
        if anchor is None:
            candidates.append(FibreIsometry.identity())
        else:
            for refl in _orientations(fib, orientation_preserving_only):
                sgn = -1.0 if refl else 1.0
                for q in targets:
                    candidates.append(FibreIsometry(refl, q - sgn * anchor).normalised(fib))
    for phi in candidates:
        lam = _scale_candidates(nu1, nu2, phi)
        if lam is None or not (lam > 0.0 and math.isfinite(lam)):
            continue
        if measures_close(nu_pushforward(nu1, phi), nu_scale(nu2, lam), tol):
            return lam, phi
    return None


def nu_invariant_under_full_group(nu: FibreMeasure) -> bool:
    """True when nu is fixed by every isometry of its fibre."""
    if nu.fibre in (Fibre.CIRCLE, Fibre.LINE):
        return not nu.atoms and len(nu.values) == 1 and nu.breakpoints[0] == nu.fibre.lo
    if nu.fibre is Fibre.PI_INTERVAL:
        return measures_close(nu_pushforward(nu, FibreIsometry.flip()), nu)
    return True


def _bump(r: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r, dtype=float)
    inside = np.abs(r) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


def _density_cdf(nu: FibreMeasure, y: np.ndarray) -> np.ndarray:
    """Integral of the density part alone over [lo, y) (lifted on the circle)."""
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    if nu.fibre.periodic:
        k = np.floor(y / TWO_PI)
        r = y - k * TWO_PI
        period = sum(v * (e - s) for s, e, v in nu._segments)
        out += k * period
        for s, e, v in nu._segments:
            out += v * np.clip(r - s, 0.0, e - s)
        return out
    base = float(y.min()) if y.size else 0.0
    for s, e, v in nu._segments:
        s = max(s, base)
        if v > 0.0 and e > s:
            out += v * np.clip(y - s, 0.0, e - s)
    return out


def nu_mollify(nu: FibreMeasure, h: float, nodes) -> np.ndarray:
    """Smoothed density of nu sampled at uniformly spaced ``nodes``.

    Cell masses are deposited exactly (atoms by linear sharing between the
    two nearest nodes) and then convolved with a normalised smooth bump of
    half-width ``h``.  On the circle ``nodes`` must tile [0, 2pi) and the
    result conserves mass to round-off.
    """
    nodes = np.asarray(nodes, dtype=float)
    n = nodes.size
    if n < 2:
        raise InputError("need at least two fibre nodes")
    d = (nodes[-1] - nodes[0]) / (n - 1)
    if not (h > 0.0) or h < d * (1 - 1e-12):
        raise InputError(f"mollifier width {h!r} below grid spacing {d!r} (undersampled)")
    periodic = nu.fibre.periodic
    if periodic and abs(n * d - TWO_PI) > 1e-9 * TWO_PI:
        raise InputError("circle nodes must tile [0, 2pi) uniformly")
    edges = np.append(nodes - 0.5 * d, nodes[-1] + 0.5 * d)
    if not periodic:
        edges = np.clip(edges, max(nu.fibre.lo, nodes[0]), min(nu.fibre.hi, nodes[-1]))
    mass = np.diff(_density_cdf(nu, edges))
    width = np.diff(edges)
    for p, m in nu.atoms:
        g = (p - nodes[0]) / d
        if periodic:
            g = g % n
        j = int(math.floor(g))
        frac = g - j
        for idx, w in ((j, 1.0 - frac), (j + 1, frac)):
            if periodic:
                mass[idx % n] += m * w
            elif 0 <= idx < n:
                mass[idx] += m * w
    K = int(math.floor(h / d * (1 + 1e-12)))
    offs = np.arange(-K, K + 1)
    w = _bump(offs * d / h)
    w /= w.sum()
    if periodic:
        out = np.zeros(n)
        for k, wk in zip(offs, w):
            if wk > 0.0:
                out += wk * np.roll(mass, k)
        return out / d
    # normalising by the convolved cell widths keeps constants fixed at the ends
    num = np.convolve(mass, w, mode="same")
    den = np.convolve(width, w, mode="same")
    return num / den


# ---------------------------------------------------------------- text io

def format_measure(nu: FibreMeasure, with_fibre: bool = True) -> str:
    lines = [f"fibre {nu.fibre.value}"] if with_fibre else []
    lines += [f"atom {p!r} {m!r}" for p, m in nu.atoms]
    lines += [f"step {b!r} {v!r}" for b, v in zip(nu.breakpoints, nu.values)]
    return "\n".join(lines) + "\n"


def parse_measure_lines(lines: Iterable[str], fibre: Fibre | None = None) -> FibreMeasure:
    atoms, bps, vals = [], [], []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0].lower()
        try:
            if key == "fibre" and len(parts) == 2:
                fibre = Fibre.parse(parts[1])
            elif key == "atom" and len(parts) == 3:
                atoms.append((float(parts[1]), float(parts[2])))
            elif key == "step" and len(parts) == 3:
                bps.append(float(parts[1]))
                vals.append(float(parts[2]))
            else:
                raise InputError(f"unrecognised measure line {raw.strip()!r}")
        except ValueError as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError(f"bad number in line {raw.strip()!r}") from None
    if fibre is None:
        raise InputError("measure block has no fibre")
    return FibreMeasure(fibre, tuple(atoms), tuple(bps), tuple(vals))


def parse_measure(text: str, fibre: Fibre | None = None) -> FibreMeasure:
    return parse_measure_lines(text.splitlines(), fibre)
