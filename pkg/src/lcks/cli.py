"""Command-line interface.

Exit codes: 0 when every check passes, 1 when a check fails or a numerical
step breaks down, 2 on input errors (bad arguments, problem files or
expressions, non-closed Lee forms).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .atlas import (
    EmptyOverlap,
    NotExactOnPatch,
    cocycle_defect,
    glue_invariance,
    hamiltonian_compatibility,
    localize,
    sample_patch,
)
from .dsl import DomainError
from .hdw import (
    DomainEscape,
    Gauge,
    OutOfRange,
    hdw_field,
    hdw_residual,
    integrate_section,
    kernel_basis,
    solve_hdw,
)
from .hj import PreconditionFailed, verify_hj_theorem
from .pipeline import format_table, run_punctured_plane
from .problems import BUILTIN, ProblemError, ProblemFile
from .structures import NotClosed, verify_structure

GENERATOR = "numpy.random.default_rng (PCG64)"


class InputError(ValueError):
    pass


class CheckFailed(RuntimeError):
    """A numerical step broke down; the message names point and residual."""


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) else v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _emit_json(report: dict, out: str | None) -> None:
    _emit(json.dumps(_clean(report), indent=2) + "\n", out)


def _floats(text: str, what: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()], dtype=float)
    except ValueError:
        raise InputError(f"{what}: expected a comma-separated list of numbers, got {text!r}") from None


def _load(args):
    if not args.problem:
        raise InputError("--problem PATH is required")
    spec = ProblemFile.load(args.problem)
    if args.seed is not None:
        spec.seed = args.seed
    return spec.build()


def _sample(problem, args, default: int = 100) -> np.ndarray:
    b = problem.bundle
    if args.point:
        pts = np.array([_floats(p, "--point") for p in args.point])
        if pts.shape[1] != b.dim:
            raise InputError(f"--point needs {b.dim} coordinates, got {pts.shape[1]}")
        return pts
    rng = np.random.default_rng(problem.spec.seed)
    return b.sample(rng, args.points or default)


def _header(problem, command: str) -> dict:
    return {
        "command": command,
        "problem": problem.spec.name,
        "n": problem.bundle.n,
        "k": problem.bundle.k,
        "seed": problem.spec.seed,
        "generator": GENERATOR,
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_check_structure(args) -> int:
    problem = _load(args)
    tol = args.tol if args.tol is not None else 1e-8
    z = _sample(problem, args)
    rep = verify_structure(problem.bundle, z, tol)
    report = _header(problem, "check-structure")
    report["structure"] = rep.to_dict()
    report["passed"] = rep.passed
    _emit_json(report, args.out)
    return 0 if rep.passed else 1


def cmd_hdw(args) -> int:
    problem = _load(args)
    b, H = problem.bundle, problem.H
    gauge = Gauge.parse(args.gauge) if args.gauge else problem.gauge
    tol = args.tol if args.tol is not None else problem.spec.solver.tolerance
    z = _sample(problem, args, default=1)
    try:
        X = solve_hdw(b, H, z, gauge, tol)
    except OutOfRange as exc:
        raise CheckFailed(str(exc)) from None
    res = hdw_residual(b, H, z, X)
    rows = []
    for zi, xi, ri in zip(z, X, res):
        rows.append({"point": zi, "X": xi, "residual": ri, "kernel_dim": len(kernel_basis(b, zi))})
    report = _header(problem, "hdw")
    report["gauge"] = gauge.value
    report["coordinates"] = list(b.scope.names)
    report["solutions"] = rows
    report["max_residual"] = float(np.max(res))
    report["passed"] = bool(np.max(res) < tol)
    if args.format == "csv":
        lines = ["kappa," + ",".join(b.scope.names) + ",residual"]
        for zi, xi, ri in zip(z, X, res):
            for c, row in enumerate(xi):
                lines.append(",".join([str(c + 1)] + [repr(float(v)) for v in row] + [repr(float(ri))]))
        _emit("\n".join(lines) + "\n", args.out)
    else:
        _emit_json(report, args.out)
    return 0 if report["passed"] else 1


def cmd_integrate(args) -> int:
    problem = _load(args)
    b, H = problem.bundle, problem.H
    gauge = Gauge.parse(args.gauge) if args.gauge else problem.gauge
    try:
        steps, sizes = problem.grid(args.grid)
    except ValueError as exc:
        raise InputError(f"--grid: {exc}") from None
    order = problem.spec.solver.order
    if args.order:
        order = [int(v) - 1 for v in args.order.split(",")]
    if order is not None and sorted(order) != list(range(b.k)):
        raise InputError(f"--order must be a permutation of 1..{b.k}")
    start = _floats(args.point[0], "--point") if args.point else problem.start()
    if len(start) != b.dim:
        raise InputError(f"start point needs {b.dim} coordinates")
    X = hdw_field(b, H, gauge)
    header = list(b.scope.names)
    escaped = None
    try:
        grid = integrate_section(X, start, steps, sizes, order, domain=b.domain)
    except (DomainEscape, DomainError) as exc:
        escaped = exc
        grid = getattr(exc, "grid", None)
    tol = args.tol if args.tol is not None else 1e-6
    if escaped is not None:
        msg = f"integral section left the domain: {escaped}"
        if grid is not None and args.format == "csv":
            _emit(grid.to_csv(header), args.out)
        raise CheckFailed(msg)
    summary = _header(problem, "integrate")
    summary.update(
        {
            "gauge": gauge.value,
            "steps": list(grid.steps),
            "sizes": list(grid.sizes),
            "order": [a + 1 for a in grid.order],
            "start": grid.start,
            "end": grid.points[tuple(s for s in grid.steps)],
            "hdw_residual": grid.hdw_residual,
            "path_defect": grid.path_defect,
        }
    )
    ok = bool(grid.hdw_residual < tol and grid.path_defect < tol)
    summary["passed"] = ok
    if args.format == "json":
        _emit_json(summary, args.out)
    else:
        _emit(grid.to_csv(header), args.out)
        sys.stderr.write(
            f"hdw_residual={grid.hdw_residual:.3e} path_defect={grid.path_defect:.3e} "
            f"{'PASS' if ok else 'FAIL'}\n"
        )
    return 0 if ok else 1


def cmd_hj_verify(args) -> int:
    problem = _load(args)
    b, H = problem.bundle, problem.H
    if problem.section is None:
        raise InputError("the problem file has no 'sections'")
    gauge = Gauge.parse(args.gauge) if args.gauge else problem.gauge
    tol = args.tol if args.tol is not None else 1e-8
    try:
        steps, sizes = problem.grid(args.grid or problem.spec.solver.hj_grid)
    except ValueError as exc:
        raise InputError(f"--grid: {exc}") from None
    start = _floats(args.point[0], "--point") if args.point else problem.hj_start()
    if len(start) != b.n:
        raise InputError(f"hj start point needs {b.n} base coordinates")
    rng = np.random.default_rng(problem.spec.seed)
    q = b.domain.sample_base(rng, args.points or 100)
    X = hdw_field(b, H, gauge)
    try:
        rep = verify_hj_theorem(b, H, X, problem.section, q, start, steps, sizes, tol=tol)
    except PreconditionFailed as exc:
        raise CheckFailed(str(exc)) from None
    except (DomainEscape, DomainError) as exc:
        raise CheckFailed(f"section or integral curve left the domain: {exc}") from None
    report = _header(problem, "hj-verify")
    report["gauge"] = gauge.value
    report["hj"] = rep.to_dict()
    report["passed"] = rep.verdict == "PASS"
    _emit_json(report, args.out)
    return 0 if report["passed"] else 1


def cmd_atlas_check(args) -> int:
    problem = _load(args)
    b, H = problem.bundle, problem.H
    if problem.atlas is None:
        raise InputError("the problem file has no 'atlas'")
    gauge = Gauge.parse(args.gauge) if args.gauge else problem.gauge
    tol = args.tol if args.tol is not None else 1e-8
    seed = problem.spec.seed
    report = _header(problem, "atlas-check")
    ok = True
    try:
        cyc = cocycle_defect(problem.atlas, seed)
    except EmptyOverlap as exc:
        raise CheckFailed(str(exc)) from None
    report["cocycle"] = cyc.to_dict()
    ok &= cyc.defect < tol
    patches = []
    rng = np.random.default_rng(seed)
    for patch in problem.atlas.patches:
        entry = {"name": patch.name}
        try:
            loc = localize(b, H, patch, seed=seed, tol=tol)
            z = sample_patch(b, patch, args.points or 100, rng)
            glue = glue_invariance(b, H, patch, z, gauge, tol)
        except (NotExactOnPatch, EmptyOverlap) as exc:
            entry["error"] = str(exc)
            ok = False
            patches.append(entry)
            continue
        entry.update(
            {
                "exactness": loc.exactness,
                "closedness": loc.closedness,
                "inversion": loc.inversion,
                "glue": glue.to_dict(),
            }
        )
        passed = loc.closedness < tol and glue.local_vs_global < tol
        if not patch.is_reference:
            passed = passed and glue.cross_coordinate < max(tol, 1e-7)
        entry["passed"] = bool(passed)
        ok &= passed
        patches.append(entry)
    report["patches"] = patches
    report["hamiltonian_compatibility"] = hamiltonian_compatibility(problem.atlas, b, H, seed)
    report["passed"] = bool(ok)
    _emit_json(report, args.out)
    return 0 if ok else 1


def cmd_demo(args) -> int:
    if args.name not in BUILTIN:
        raise InputError(f"unknown built-in problem {args.name!r} (known: {', '.join(BUILTIN)})")
    if args.k < 1:
        raise InputError("--k must be positive")
    seed = args.seed if args.seed is not None else 42
    checks = run_punctured_plane(args.k, args.points or 100, seed)
    ok = all(c.passed for c in checks)
    if args.format == "json":
        _emit_json(
            {
                "command": "demo",
                "problem": f"{args.name}-k{args.k}",
                "seed": seed,
                "generator": GENERATOR,
                "checks": [c.to_dict() for c in checks],
                "passed": ok,
            },
            args.out,
        )
    else:
        table = format_table(checks)
        _emit(f"{args.name} (k={args.k}, seed={seed})\n{table}\n{'ALL PASS' if ok else 'FAILURES'}\n", args.out)
    return 0 if ok else 1


def cmd_export(args) -> int:
    if args.name not in BUILTIN:
        raise InputError(f"unknown built-in problem {args.name!r}")
    spec = BUILTIN[args.name](args.k)
    _emit(json.dumps(spec.to_dict(), indent=2) + "\n", args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, *, gauge=False, grid=False, fmt=None):
    p.add_argument("--problem", metavar="PATH", help="problem file (JSON)")
    p.add_argument("--point", action="append", metavar="CSV", help="comma-separated point (repeatable)")
    p.add_argument("--points", type=int, metavar="N", help="number of sampled points")
    p.add_argument("--seed", type=int, metavar="U64", help="override the problem seed")
    p.add_argument("--tol", type=float, metavar="FLOAT", help="pass/fail tolerance")
    p.add_argument("--out", metavar="PATH", help="write output here instead of stdout")
    if gauge:
        p.add_argument("--gauge", choices=[g.value for g in Gauge])
    if grid:
        p.add_argument("--grid", metavar="STEPS@H,...", help="grid, one entry per axis or one for all")
        p.add_argument("--order", metavar="PERM", help="axis order, e.g. 2,1")
    if fmt:
        p.add_argument("--format", choices=["json", "csv"], default=fmt)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lcks", description="Locally conformal k-symplectic geometry and HDW dynamics."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("check-structure", help="verify the structure axioms at sample points")
    _common(p)
    p.set_defaults(func=cmd_check_structure)
    p = sub.add_parser("hdw", help="solve the HDW equation at points")
    _common(p, gauge=True, fmt="json")
    p.set_defaults(func=cmd_hdw)
    p = sub.add_parser("integrate", help="integrate a multi-time integral section")
    _common(p, gauge=True, grid=True, fmt="csv")
    p.set_defaults(func=cmd_integrate)
    p = sub.add_parser("hj-verify", help="check the three Hamilton-Jacobi conditions")
    _common(p, gauge=True, grid=True)
    p.set_defaults(func=cmd_hj_verify)
    p = sub.add_parser("atlas-check", help="cocycle, localization and glueing checks")
    _common(p, gauge=True)
    p.set_defaults(func=cmd_atlas_check)
    p = sub.add_parser("demo", help="run a built-in problem end to end")
    p.add_argument("name", help="built-in problem name (punctured-plane)")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--points", type=int, metavar="N")
    p.add_argument("--seed", type=int, metavar="U64")
    p.add_argument("--out", metavar="PATH")
    p.add_argument("--format", choices=["json", "table"], default="table")
    p.set_defaults(func=cmd_demo)
    p = sub.add_parser("export", help="write a built-in problem as a problem file")
    p.add_argument("name")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_export)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        return args.func(args)
    except (InputError, ProblemError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except NotClosed as exc:
        sys.stderr.write(f"error: NotClosed: {exc}\n")
        return 2
    except CheckFailed as exc:
        sys.stderr.write(f"check failed: {exc}\n")
        return 1
    except OutOfRange as exc:
        sys.stderr.write(f"check failed: {exc}\n")
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
