"""Command-line front door.

Commands:
  audit     decide the invariant-volume question for a system file
  simulate  integrate the constrained dynamics and export CSV
  verify    run the volume-rate oracle standalone
  eps       analyze a Lie-algebra (left-invariant) system file

Exit codes: 0 volume exists / preserved, 1 refuted or not found, 2 error.
Reports are deterministic JSON documents for a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import sys as _sys
from pathlib import Path

import numpy as np

from . import __version__
from . import dynamics as dy
from . import expr as ex
from . import forms as fm
from . import liealg as la
from . import measure as ms
from . import nonhol as nh
from .backends import backend_name
from .sysio import FileFormatError, load_eps, load_system

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_REFUTED = 1
EXIT_ERROR = 2


def _round_floats(obj, ndigits: int = 12):
    if isinstance(obj, float):
        return round(obj, ndigits)
    if isinstance(obj, dict):
        return {k: _round_floats(v, ndigits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, ndigits) for v in obj]
    if isinstance(obj, (np.floating,)):
        return round(float(obj), ndigits)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _round_floats(obj.tolist(), ndigits)
    return obj


def _write_report(report: dict, out: str | None, default_name: str) -> Path:
    path = Path(out) if out else Path(f"{default_name}.json")
    path.write_text(json.dumps(_round_floats(report), indent=2, sort_keys=True) + "\n")
    return path


def _expr_str(e: ex.Expr | None, limit: int = 4000) -> str | None:
    if e is None:
        return None
    s = ex.to_str(e)
    return s if len(s) <= limit else None


def _parse_init(text: str | None, sys_: nh.NonholonomicSystem, seed: int) -> dy.ReducedState:
    if not text:
        return dy.synthesize_state(sys_, seed=seed)
    try:
        qpart, vpart = text.split(";")
        q = np.array([float(x) for x in qpart.split(",")])
        v = np.array([float(x) for x in vpart.split(",")])
    except ValueError:
        raise FileFormatError(
            "--init must look like 'q1,q2,...;v1,v2,...'"
        ) from None
    if q.size != sys_.dim or v.size != sys_.dim:
        raise FileFormatError(f"--init needs {sys_.dim} coordinates and velocities")
    return dy.ReducedState(q, dy.project_velocity(sys_, q, v))


def _theta_at_center(sys_: nh.NonholonomicSystem, theta: fm.KForm) -> dict:
    from .backends import eval_point

    center = sys_.domain.center()
    vals = eval_point(nh.theta_program(sys_), center)
    return {q: float(v) for q, v in zip(sys_.chart, vals)}


def _basis_from_arg(arg: str | None, sys_: nh.NonholonomicSystem) -> ms.AnsatzBasis:
    if arg is None or arg == "default":
        return ms.AnsatzBasis.default(sys_)
    if arg == "none":
        return ms.AnsatzBasis.empty()
    funcs = [
        ex.parse(part, sys_.chart, tuple(sys_.params))
        for part in arg.split(",")
        if part.strip()
    ]
    return ms.AnsatzBasis(funcs)


def cmd_audit(args) -> int:
    sys_ = load_system(args.file)
    seed = args.seed
    theta = nh.density_form(sys_)
    closed = ms.closedness(theta, sys_.domain, sys_.params, args.samples, args.tol, seed)
    verdict = ms.exactify(sys_, _basis_from_arg(args.basis, sys_), args.samples, seed)

    density = verdict.potential.density if verdict.potential is not None else None
    z0 = _parse_init(args.init, sys_, seed)
    traj = dy.integrate(sys_, z0, args.T, args.step)
    audit = dy.volume_rate_audit(sys_, traj, density, n_states=args.states)

    report = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "backend": backend_name(),
        "command": "audit",
        "system": {
            "name": sys_.name,
            "coordinates": list(sys_.chart),
            "parameters": sys_.params,
            "n_constraints": sys_.n_constraints,
        },
        "seeds": {"main": seed},
        "tolerances": {
            "zero_test": args.tol,
            "ansatz_residual": ms.ANSATZ_RESIDUAL_TOL,
            "path_independence": ms.PATH_INDEPENDENCE_TOL,
            "rate_certification": audit.tol,
        },
        "divergence_scale": nh.DIVERGENCE_SCALE,
        "density_form": {
            "components": {sys_.chart[i]: _expr_str(c) for (i,), c in theta.coeffs.items()},
            "at_center": _theta_at_center(sys_, theta),
        },
        "closed": bool(closed),
        "verdict": {
            "status": verdict.status,
            "volume_exists": verdict.volume_exists,
            "multipliers": None
            if verdict.multipliers is None
            else [_expr_str(k) for k in verdict.multipliers],
            "certified_nonexistence": verdict.certified_nonexistence,
            "witness": verdict.witness,
            "nullspace_dim": verdict.nullspace_dim,
            "residuals": {k: float(v) for k, v in verdict.residuals.items()},
        },
        "density": None
        if verdict.potential is None
        else {
            "pattern": verdict.density_pattern,
            "expr": _expr_str(verdict.density_expr),
            "base_point": {q: float(v) for q, v in zip(sys_.chart, verdict.potential.base)},
            "grid": verdict.potential.grid,
        },
        "rate_audit": {
            "states_used": audit.states_used,
            "skipped": audit.skipped,
            "max_abs_rate": audit.max_abs_rate,
            "field_scale": audit.field_scale,
            "certified_preserving": audit.certified,
            "fitted_c": audit.c_fit,
            "fitted_c_std": audit.c_std,
            "trajectory": {"T": args.T, "step": args.step},
        },
    }
    code = EXIT_OK if verdict.volume_exists else EXIT_REFUTED
    report["exit_code"] = code
    path = _write_report(report, args.out, f"{sys_.name}_audit")
    print(f"system: {sys_.name}   status: {verdict.status}")
    center_vals = {
        q: f"{v:.6g}" for q, v in _theta_at_center(sys_, theta).items() if abs(v) > 1e-12
    }
    print(f"density form at domain center: {center_vals if center_vals else '0'}")
    print(f"closed: {closed}   certified nonexistence: {verdict.certified_nonexistence}")
    if verdict.density_pattern:
        print(f"density pattern: {verdict.density_pattern}")
    print(
        f"rate audit: max |rate| = {audit.max_abs_rate:.3e}"
        f" (certified preserving: {audit.certified}, fitted c: {audit.c_fit})"
    )
    print(f"report: {path}")
    return code


def cmd_simulate(args) -> int:
    sys_ = load_system(args.file)
    z0 = _parse_init(args.init, sys_, args.seed)
    traj = dy.integrate(sys_, z0, args.T, args.step)
    out = Path(args.out) if args.out else Path(f"{sys_.name}_trajectory.csv")
    if args.t0:
        traj.t = traj.t + args.t0
    traj.to_csv(out, sys_.chart)
    print(f"steps: {len(traj.t) - 1}   status: {'ok' if traj.status == 0 else 'aborted (nonfinite)'}")
    print(f"energy drift (relative): {traj.energy_drift:.3e}")
    print(f"constraint residual (max): {traj.constraint_residual.max():.3e}")
    print(f"trajectory: {out}")
    return EXIT_OK if traj.status == 0 else EXIT_ERROR


def cmd_verify(args) -> int:
    sys_ = load_system(args.file)
    density = None
    if args.density:
        rho_expr = ex.parse(args.density, sys_.chart, tuple(sys_.params))
        from .compile import compile_exprs
        from .backends import eval_point

        prog = compile_exprs([rho_expr], sys_.chart, sys_.params)

        def density(q, _prog=prog):
            return float(eval_point(_prog, q)[0])

    z0 = _parse_init(args.init, sys_, args.seed)
    traj = dy.integrate(sys_, z0, args.T, args.step)
    audit = dy.volume_rate_audit(sys_, traj, density, n_states=args.states)
    report = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "backend": backend_name(),
        "command": "verify",
        "system": {"name": sys_.name},
        "seeds": {"main": args.seed},
        "density": args.density or "1",
        "divergence_scale": nh.DIVERGENCE_SCALE,
        "rate_audit": {
            "states_used": audit.states_used,
            "skipped": audit.skipped,
            "max_abs_rate": audit.max_abs_rate,
            "field_scale": audit.field_scale,
            "certified_preserving": audit.certified,
            "fitted_c": audit.c_fit,
            "fitted_c_std": audit.c_std,
            "rates": audit.rates.tolist(),
            "theta_qdot": audit.theta_qdot.tolist(),
        },
    }
    code = EXIT_OK if audit.certified else EXIT_REFUTED
    report["exit_code"] = code
    path = _write_report(report, args.out, f"{sys_.name}_verify")
    print(
        f"max |rate| = {audit.max_abs_rate:.3e} over {audit.states_used} states"
        f" (certified preserving: {audit.certified})"
    )
    if audit.c_fit is not None:
        print(f"fitted c = {audit.c_fit:.6f} (std {audit.c_std})")
    print(f"report: {path}")
    return code


def cmd_eps(args) -> int:
    alg = load_eps(args.file)
    rep = la.eps_report(alg)
    report = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "command": "eps",
        "system": {"name": alg.name, "dimension": alg.dim, "n_constraints": int(alg.constraints.shape[0])},
        "tolerances": {"membership": la.MEMBERSHIP_TOL, "jacobi": la.JACOBI_TOL},
        "trace_ad": rep.trace_ad.tolist(),
        "theta": rep.theta.tolist(),
        "unimodular": rep.unimodular,
        "bi_invariant": rep.bi_invariant,
        "membership": {
            "volume_preserved": rep.volume_preserved,
            "residual": rep.membership_residual,
        },
        "kozlov": rep.kozlov,
    }
    code = EXIT_OK if rep.volume_preserved else EXIT_REFUTED
    report["exit_code"] = code
    path = _write_report(report, args.out, f"{alg.name}_eps")
    print(f"system: {alg.name}   unimodular: {rep.unimodular}   bi-invariant: {rep.bi_invariant}")
    print(f"trace ad = {rep.trace_ad.tolist()}")
    print(f"theta    = {rep.theta.tolist()}")
    print(
        f"volume preserved: {rep.volume_preserved}"
        f" (membership residual {rep.membership_residual:.3e})"
    )
    if rep.kozlov is not None:
        print(f"kozlov: {rep.kozlov}")
    print(f"report: {path}")
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="nhvol",
        description="Invariant-volume auditor for nonholonomic mechanical systems",
    )
    p.add_argument("--version", action="version", version=f"nhvol {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("file", help="system JSON file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None, help="report/output path")

    pa = sub.add_parser("audit", help="decide the invariant-volume question")
    common(pa)
    pa.add_argument("--samples", type=int, default=64)
    pa.add_argument("--tol", type=float, default=1e-9)
    pa.add_argument("--basis", default="default", help="'default', 'none', or comma-separated expressions")
    pa.add_argument("--T", type=float, default=2.0, help="audit trajectory length")
    pa.add_argument("--step", type=float, default=1e-3)
    pa.add_argument("--states", type=int, default=10)
    pa.add_argument("--init", default=None, help="'q1,..;v1,..' initial state")
    pa.set_defaults(func=cmd_audit)

    psim = sub.add_parser("simulate", help="integrate and export a CSV trajectory")
    common(psim)
    psim.add_argument("--t0", type=float, default=0.0)
    psim.add_argument("--T", type=float, default=10.0)
    psim.add_argument("--step", "--h", dest="step", type=float, default=1e-3)
    psim.add_argument("--init", default=None)
    psim.set_defaults(func=cmd_simulate)

    pv = sub.add_parser("verify", help="standalone volume-rate oracle")
    common(pv)
    pv.add_argument("--density", default=None, help="density expression in the chart coordinates")
    pv.add_argument("--T", type=float, default=2.0)
    pv.add_argument("--step", type=float, default=1e-3)
    pv.add_argument("--states", type=int, default=10)
    pv.add_argument("--init", default=None)
    pv.set_defaults(func=cmd_verify)

    pe = sub.add_parser("eps", help="analyze a Lie-algebra system file")
    common(pe)
    pe.set_defaults(func=cmd_eps)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        FileFormatError,
        FileNotFoundError,
        ex.ExprError,
        fm.FormError,
        nh.SystemError_,
        ms.MeasureError,
        la.LieAlgebraError,
        dy.DynamicsError,
        ValueError,
    ) as err:
        print(f"error: {err}", file=_sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    _sys.exit(main())
