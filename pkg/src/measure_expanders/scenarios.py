"""Scenario configs: parsing, built-in runs, diagnostics and report files."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InputError
from .expander import (MEASURE_KEYS, ProductExpander, expander_from_mapping,
                       parse_keyvalue_line)
from .fibre_measure import TWO_PI, nu_scale
from .flow import (SMOOTH_ORIGIN, BoundaryCondition, FlowConfig, FlowTrajectory,
                   TruncatedPlane, check_area_law_and_ball_inequality, comparison_margin,
                   run_flow, self_similarity_field, strip_prepared, strip_profile,
                   u_over_t_violation)
from .geometry import CylGrid, total_grid_mass, write_field_csv
from .soliton_ode import shoot

BUILTIN = ("strip-exact", "gaussian", "cusp-cone", "cusp-cone-fine", "twisted-b3",
           "plane-disc", "comparison")
DIAGNOSTICS = ("strip_exact", "gaussian_exact", "selfsim", "ode", "monotone",
               "area_law", "ball", "comparison")


@dataclass
class Scenario:
    name: str
    values: dict
    measure_lines: list
    diagnostics: tuple
    source: str = ""

    def get(self, key, default=None):
        return self.values.get(key, default)

    def num(self, key, default=None) -> float:
        v = self.values.get(key)
        if v is None:
            if default is None:
                raise InputError(f"missing config key {key}")
            return default
        try:
            return float(v)
        except ValueError:
            raise InputError(f"config key {key}: not a number ({v!r})") from None

    def integer(self, key, default=None) -> int:
        x = self.num(key, default)
        if x != int(x):
            raise InputError(f"config key {key}: not an integer")
        return int(x)

    def floats(self, key) -> tuple:
        v = self.values.get(key, "")
        try:
            return tuple(float(s) for s in v.replace(",", " ").split())
        except ValueError:
            raise InputError(f"config key {key}: bad number list") from None

    def expander(self) -> ProductExpander:
        return expander_from_mapping(self.values, self.measure_lines)


def parse_scenario(text: str, overrides: dict | None = None, source: str = "") -> Scenario:
    values, mlines = {}, []
    for raw in text.splitlines():
        kv = parse_keyvalue_line(raw)
        if kv is None:
            continue
        k, v = kv
        if k.lower() in MEASURE_KEYS:
            mlines.append(f"{k} {v}")
        else:
            values[k.lower()] = v
    for k, v in (overrides or {}).items():
        values[k.lower()] = str(v)
    diags = tuple(d.strip() for d in values.get("diagnostics", "").split(",") if d.strip())
    for d in diags:
        if d not in DIAGNOSTICS:
            raise InputError(f"unknown diagnostic {d!r}")
    sc = Scenario(values.get("name", Path(source).stem if source else "scenario"),
                  values, mlines, diags, source)
    e = sc.expander()
    if ("area_law" in diags or "ball" in diags) and not e.tag.plane:
        raise InputError("area/ball diagnostics need a plane family")
    if ("area_law" in diags or "ball" in diags) and sc.get("init.x_cut") is None:
        raise InputError("area/ball diagnostics need a truncated measure (init.x_cut)")
    return sc


def builtin_text(name: str) -> str:
    if name not in BUILTIN:
        raise InputError(f"unknown scenario {name!r}")
    return resources.files(__package__).joinpath("scenarios").joinpath(f"{name}.cfg") \
        .read_text(encoding="utf-8")


def load_scenario(name_or_path: str, overrides: dict | None = None) -> Scenario:
    p = Path(name_or_path)
    if name_or_path in BUILTIN and not p.exists():
        return parse_scenario(builtin_text(name_or_path), overrides, name_or_path)
    if not p.is_file():
        raise InputError(f"scenario {name_or_path!r} not found")
    return parse_scenario(p.read_text(encoding="utf-8"), overrides, str(p))


def build_config(sc: Scenario, expander: ProductExpander | None = None) -> FlowConfig:
    e = expander or sc.expander()
    nx = sc.integer("grid.nx")
    nt = sc.integer("grid.ntheta", 1)
    xmin, xmax = sc.num("grid.xmin"), sc.num("grid.xmax")
    if e.nu.fibre.periodic:
        grid = CylGrid.cylinder(xmin, xmax, nx, nt)
    else:
        grid = CylGrid.strip(xmin, xmax, nx, sc.num("grid.ymin"), sc.num("grid.ymax"), nt)
    t0, t1 = sc.num("time.t0"), sc.num("time.t1")
    bcf = sc.get("bc.fibre")
    kind = sc.get("init.kind", "expander")
    cfg = FlowConfig(
        grid=grid, t0=t0, t1=t1,
        bc_left=BoundaryCondition.parse(sc.get("bc.left", "cone")),
        bc_right=BoundaryCondition.parse(sc.get("bc.right", "cone")),
        bc_fibre=BoundaryCondition.parse(bcf) if bcf else None,
        expander=e,
        output_times=sc.floats("time.outputs"),
        mollify=sc.num("init.mollify", 0.0) or None,
        eta_factor=sc.num("init.eta", 1e-3),
        x_cut=sc.num("init.x_cut") if sc.get("init.x_cut") is not None else None,
        dt_rel=sc.num("time.dt_rel", 0.05),
        dt_max=sc.num("time.dt_max", math.inf),
        newton_tol=sc.num("solver.newton_tol", 1e-10),
        newton_maxit=sc.integer("solver.newton_maxit", 20),
        linear_solver=sc.get("solver.linear", "pcg"),
    )
    if kind == "strip_prepared":
        cfg.initial = strip_prepared(grid, t0, cfg.bc_left)
    elif kind == "strip_exact":
        cfg.initial = strip_profile_field(grid, t0)
    elif kind != "expander":
        raise InputError(f"unknown init.kind {kind!r}")
    return cfg


def strip_profile_field(grid, t0):
    from .geometry import ConformalField
    return ConformalField(grid, strip_profile(grid, t0), t0)


@dataclass
class DiagResult:
    name: str
    value: float
    tol: float
    ok: bool
    detail: str = ""


@dataclass
class ScenarioResult:
    name: str
    trajectory: FlowTrajectory
    diagnostics: list = field(default_factory=list)
    selfsim: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(d.ok for d in self.diagnostics)


def _selfsim_pairs(sc: Scenario, traj: FlowTrajectory, alpha: float, beta: float) -> dict:
    out = {}
    times = traj.times[1:]
    for ta, tb in zip(times, times[1:]):
        try:
            _, dev = self_similarity_field(traj, alpha, beta, ta, tb)
            out[tb] = float(np.max(dev))
        except InputError:
            out[tb] = math.nan
    return out


def run_scenario(sc: Scenario, outdir: str | os.PathLike | None = None) -> ScenarioResult:
    e = sc.expander()
    cfg = build_config(sc, e)
    traj = run_flow(cfg)
    res = ScenarioResult(sc.name, traj)
    diags = sc.diagnostics
    if "selfsim" in diags:
        res.selfsim = _selfsim_pairs(sc, traj, e.alpha, e.beta)
        t_a = sc.num("diag.selfsim.t1", traj.times[-2])
        t_b = sc.num("diag.selfsim.t2", traj.times[-1])
        _, dev = self_similarity_field(traj, e.alpha, e.beta, t_a, t_b)
        tol = sc.num("diag.selfsim.tol", 1e-2)
        v = float(np.max(dev))
        res.diagnostics.append(DiagResult("selfsim", v, tol, v <= tol, f"t={t_a!r}->{t_b!r}"))
    if "strip_exact" in diags:
        v = max(float(np.max(np.abs(s.u / strip_profile(s.grid, s.t) - 1.0)))
                for s in traj.snapshots)
        tol = sc.num("diag.strip_exact.tol", 5e-3)
        res.diagnostics.append(DiagResult("strip_exact", v, tol, v <= tol))
    if "gaussian_exact" in diags:
        g = cfg.grid
        ref = np.exp(e.alpha * g.x)[:, None] * e.nu.total() / TWO_PI
        v = max(float(np.max(np.abs(s.u / ref - 1.0))) for s in traj.snapshots)
        tol = sc.num("diag.gaussian_exact.tol", 1e-8)
        res.diagnostics.append(DiagResult("gaussian_exact", v, tol, v <= tol))
    if "ode" in diags:
        g = cfg.grid
        prof = shoot(e.alpha, "smooth_origin" if cfg.bc_left.kind == SMOOTH_ORIGIN else "cusp")
        L = g.x_max - g.x_min
        core = (g.x >= g.x_min + 0.1 * L) & (g.x <= g.x_max - 0.1 * L)
        f1 = traj.at(1.0)
        # nu = c dtheta corresponds to the unit profile translated by log(c)/alpha
        shift = math.log(e.nu.total() / TWO_PI) / e.alpha
        v = float(np.max(np.abs(f1.u[core].mean(axis=1) / prof(g.x[core] + shift) - 1.0)))
        tol = sc.num("diag.ode.tol", 1e-2)
        res.diagnostics.append(DiagResult("ode", v, tol, v <= tol, "t=1 core max-norm"))
    if "monotone" in diags:
        v = u_over_t_violation(traj)
        tol = sc.num("diag.monotone.tol", 1e-8)
        res.diagnostics.append(DiagResult("monotone", v, tol, v <= tol, "max increase of u/t"))
    if "area_law" in diags or "ball" in diags:
        meas = TruncatedPlane(e, sc.num("init.x_cut"))
        samples = []
        if "ball" in diags:
            for r in (0.5, 0.8, 1.0):
                for R in (1.2 * r, math.sqrt(2.0) * r, 2.0 * r):
                    for t in traj.times[1:]:
                        if t < meas.ball_mass(r) / (8 * math.pi) and math.log(R) < cfg.grid.x_max:
                            samples.append((r, R, t))
        rep = check_area_law_and_ball_inequality(traj, meas, samples)
        if "area_law" in diags:
            tol = sc.num("diag.area_law.tol", 2e-2)
            res.diagnostics.append(DiagResult("area_law", rep.slope_rel_error, tol,
                                              rep.slope_rel_error <= tol,
                                              f"slope {rep.slope:.6g} vs {rep.expected_slope:.6g}"))
        if "ball" in diags:
            worst = min((s[4] - s[3] for s in rep.samples), default=math.inf)
            res.diagnostics.append(DiagResult("ball", -worst, 0.0, rep.inequality_holds,
                                              f"{len(rep.samples)} samples, min slack {worst:.3g}"))
    if "comparison" in diags:
        lam = sc.num("diag.comparison.scale", 0.5)
        small = ProductExpander(e.tag, e.alpha, e.beta, nu_scale(e.nu, lam))
        traj_small = run_flow(build_config(sc, small))
        v = comparison_margin(traj_small, traj)
        tol = sc.num("diag.comparison.tol", 1e-8)
        res.diagnostics.append(DiagResult("comparison", v, tol, v <= tol,
                                          f"max(u[{lam!r} nu] - u[nu])"))
    if outdir is not None:
        write_outputs(res, Path(outdir), "selfsim" in diags)
    return res


def _tag(t: float) -> str:
    return f"{t:.6g}"


def write_outputs(res: ScenarioResult, outdir: Path, with_selfsim: bool) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    traj = res.trajectory
    cols = ["t", "total_mass", "min_u", "newton_iters"] + (["selfsim_err"] if with_selfsim else [])
    prev_t = -math.inf
    with open(outdir / "diagnostics.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for s in traj.snapshots:
            row = [f"{s.t:.17g}", f"{total_grid_mass(s):.17g}", f"{float(np.min(s.u)):.17g}",
                   str(traj.newton_between(prev_t, s.t))]
            if with_selfsim:
                v = res.selfsim.get(s.t)
                row.append("" if v is None or math.isnan(v) else f"{v:.17g}")
            fh.write(",".join(row) + "\n")
            prev_t = s.t
    for s in traj.snapshots:
        write_field_csv(s, outdir / f"snapshot_t{_tag(s.t)}.csv")
        with open(outdir / f"profile_t{_tag(s.t)}.dat", "w", encoding="utf-8", newline="\n") as fh:
            for xv, uv in zip(s.grid.x, s.u.mean(axis=1)):
                fh.write(f"{xv:.17g} {uv:.17g}\n")
    with open(outdir / "summary.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_summary(res))


def format_summary(res: ScenarioResult) -> str:
    tr = res.trajectory
    lines = [f"scenario {res.name}: {len(tr.steps)} steps, "
             f"{sum(s.newton_iters for s in tr.steps)} Newton iterations"]
    for d in res.diagnostics:
        status = "PASS" if d.ok else "FAIL"
        lines.append(f"  {d.name:<15s} {d.value:12.4e}  tol {d.tol:9.2e}  {status}  {d.detail}")
    return "\n".join(lines) + "\n"
