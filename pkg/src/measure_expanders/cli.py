"""Command-line front end: family, iso, flow, soliton, verify-all.

Exit codes: 0 success, 1 diagnostic failure, 2 input error.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .errors import InputError, ShootingError
from .expander import (describe_witness, expanders_isomorphic, expanding_check,
                       format_expander, is_gradient, parse_expander)
from .scenarios import BUILTIN, format_summary, load_scenario, run_scenario
from .soliton_ode import CUSP, SMOOTH_ORIGIN, shoot, write_profile_csv

EXIT_OK, EXIT_DIAG, EXIT_INPUT = 0, 1, 2
FAMILY_TOL = 1e-9


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def split_overrides(argv: list) -> tuple:
    """Separate ``--key.sub=value`` config overrides from ordinary arguments."""
    rest, over = [], {}
    for a in argv:
        if a.startswith("--") and "=" in a and "." in a.split("=", 1)[0]:
            k, v = a[2:].split("=", 1)
            over[k] = v
        else:
            rest.append(a)
    return rest, over


def cmd_family(args, overrides) -> int:
    e = parse_expander(_read(args.spec))
    print(format_expander(e), end="")
    rep = expanding_check(e)
    print(f"expanding check: max relative error {rep.max_rel_error:.3e} "
          f"over {rep.samples} samples (finite-difference {rep.fd_rel_error:.3e})")
    print(f"gradient: {'yes' if is_gradient(e) else 'no'}")
    return EXIT_OK if rep.max_rel_error <= FAMILY_TOL else EXIT_DIAG


def cmd_iso(args, overrides) -> int:
    e1 = parse_expander(_read(args.spec1))
    e2 = parse_expander(_read(args.spec2))
    w = expanders_isomorphic(e1, e2)
    if w is None:
        print("not isomorphic")
    else:
        print("isomorphic")
        print(describe_witness(w))
    return EXIT_OK


def _run_one(name: str, overrides: dict, outdir: str | None):
    sc = load_scenario(name, overrides)
    out = None if outdir is None else Path(outdir) / sc.name
    res = run_scenario(sc, out)
    return format_summary(res), res.ok


def cmd_flow(args, overrides) -> int:
    text, ok = _run_one(args.scenario, overrides, args.out)
    print(text, end="")
    return EXIT_OK if ok else EXIT_DIAG


def cmd_soliton(args, overrides) -> int:
    end = args.end.lower().replace("-", "_")
    if end not in (CUSP, SMOOTH_ORIGIN):
        raise InputError(f"unknown end type {args.end!r}")
    p = shoot(args.alpha, end)
    out = Path(args.out or f"soliton_alpha{args.alpha:g}_{end}.csv")
    write_profile_csv(p, out)
    label = "c_minus" if end == CUSP else "c_origin"
    print(f"{label} = {p.c_minus:.12g}")
    print(f"c_plus = {p.c_plus:.12g}")
    print(f"profile written to {out}")
    return EXIT_OK


def cmd_verify_all(args, overrides) -> int:
    names = args.scenarios or list(BUILTIN)
    for n in names:
        load_scenario(n, overrides)          # validate everything before running
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_run_one, names, [overrides] * len(names),
                                  [args.out] * len(names)))
    else:
        results = [_run_one(n, overrides, args.out) for n in names]
    for text, _ in results:
        print(text, end="")
    failed = [n for n, (_, ok) in zip(names, results) if not ok]
    print(f"{len(names) - len(failed)}/{len(names)} scenarios passed"
          + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_DIAG if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="measure-expanders",
                                description="Measure expanders and expanding Ricci solitons.",
                                epilog="Config keys can be overridden with --key=value, "
                                       "e.g. --grid.nx=512 --time.dt_rel=0.02.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("family", help="validate an expander spec and check the expanding law")
    s.add_argument("spec")
    s.set_defaults(func=cmd_family)

    s = sub.add_parser("iso", help="decide isomorphism of two expander specs")
    s.add_argument("spec1")
    s.add_argument("spec2")
    s.set_defaults(func=cmd_iso)

    s = sub.add_parser("flow", help="run a scenario (built-in name or config file)")
    s.add_argument("scenario")
    s.add_argument("-o", "--out", default=None, help="output directory")
    s.set_defaults(func=cmd_flow)

    s = sub.add_parser("soliton", help="shoot a rotationally symmetric soliton profile")
    s.add_argument("alpha", type=float)
    s.add_argument("end", help="cusp or smooth_origin")
    s.add_argument("-o", "--out", default=None, help="profile CSV path")
    s.set_defaults(func=cmd_soliton)

    s = sub.add_parser("verify-all", help="run all built-in scenarios")
    s.add_argument("scenarios", nargs="*", help=f"subset of {', '.join(BUILTIN)}")
    s.add_argument("-o", "--out", default=None, help="output directory")
    s.add_argument("-j", "--jobs", type=int, default=1, help="scenarios run in parallel")
    s.set_defaults(func=cmd_verify_all)
    return p


def main(argv: list | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    rest, overrides = split_overrides(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(rest)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args, overrides)
    except (InputError, ShootingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
