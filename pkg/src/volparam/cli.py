"""Command-line interface: ``volparam <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 certification failed,
4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from .bijective import BijectifyParams, CollocationParams, alternative_constraint_count, bijectify
from .bspline import BSplineVolume, KnotVector
from .certify import certify_volume
from .errors import (
    CompatibilityError,
    ConvergenceError,
    DegenerateBoundaryError,
    InfeasibleError,
    KnotVectorError,
    ModelFileError,
    NotCertifiedError,
    NotSPDError,
    RationalInputError,
    RefinementLimitError,
)
from .fixtures import FIXTURES, get_fixture
from .harmonic import harmonic_map
from .io import PipelineConfig, dumps_json, export_vtk, parse_model, write_model
from .metrics import TABLE_HEADER, quality_report
from .mips import refine

log = logging.getLogger("volparam")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_CERT, EXIT_SOLVER = 0, 1, 2, 3, 4

INPUT_ERRORS = (
    ModelFileError,
    KnotVectorError,
    CompatibilityError,
    RationalInputError,
    DegenerateBoundaryError,
    NotCertifiedError,
)
SOLVER_ERRORS = (ConvergenceError, NotSPDError, InfeasibleError, RefinementLimitError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="JSON config file; flags override its entries")
    g.add_argument("--delta", type=float, help="lower bound imposed on det J at collocation points")
    g.add_argument("--cert-delta", type=float, help="threshold used by the positivity certificate")
    g.add_argument("--lambda", dest="lam", type=float, help="fairness weight")
    g.add_argument("--sigma", type=float, help="collocation softmax temperature (default: adaptive)")
    g.add_argument("--max-level", type=int, help="coarse-to-fine level budget")
    g.add_argument("--cert-depth", type=int, help="subdivision depth of the certificate")
    g.add_argument("--threads", type=int, help="cap on BLAS threads")
    g.add_argument("--seed", type=int, help="seed of the low-discrepancy collocation offsets")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="volparam", description="Certified-bijective B-spline volume parameterization.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr (-vv for debug)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help_, needs_input=True):
        p = sub.add_parser(name, help=help_)
        if needs_input:
            p.add_argument("input", help="model file, or fixture:NAME for a bundled fixture")
        _add_config_flags(p)
        return p

    p = cmd("harmonic", "harmonic initialization from six boundary faces")
    p.add_argument("--out", required=True, help="output volume file")
    p = cmd("bijectify", "max-min optimization until the volume certifies")
    p.add_argument("--out", required=True, help="output volume file")
    p.add_argument("--trace", help="write the per-level trace here")
    p = cmd("refine", "MIPS refinement of a certified volume")
    p.add_argument("--out", required=True, help="output volume file")
    p = cmd("pipeline", "harmonic + max-min + MIPS with all reports")
    p.add_argument("--out", required=True, help="output directory")
    p = cmd("certify", "Jacobian positivity certificate")
    p.add_argument("--out", help="write the certificate JSON here")
    p = cmd("metrics", "quality metrics as a table line")
    p.add_argument("--out", help="write the quality report JSON here")
    p = cmd("export", "legacy VTK structured grid")
    p.add_argument("--out", required=True, help="output .vtk file")
    p.add_argument("--resolution", type=int, default=17)
    p.add_argument("--fields", default="detJ,kappa,orth,dvol", help="comma-separated subset of detJ,kappa,orth,dvol")
    p = sub.add_parser("fixture", help="write a bundled fixture as a model file")
    p.add_argument("name", choices=sorted(FIXTURES))
    p.add_argument("--kind", choices=("volume", "surface_set"), default="surface_set")
    p.add_argument("--out", required=True)
    return parser


def resolve_config(args) -> PipelineConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ModelFileError(f"cannot read config {args.config}: {exc}") from None
    for key in ("delta", "cert_delta", "lam", "sigma", "max_level", "cert_depth", "threads", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    try:
        return PipelineConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def bijectify_params(cfg: PipelineConfig) -> BijectifyParams:
    return BijectifyParams(
        lam=cfg.lam,
        delta=cfg.delta,
        cert_delta=cfg.cert_delta,
        max_level=cfg.max_level,
        max_depth=cfg.cert_depth,
        collocation=CollocationParams(sigma=cfg.sigma, seed=cfg.seed),
        solver_tol=cfg.solver_tol,
        solver_max_iter=cfg.solver_max_iter,
        max_refine_rounds=cfg.max_refine_rounds,
    )


def load_input(source: str):
    """Model file or ``fixture:NAME`` (boundary faces of the fixture)."""
    if source.startswith("fixture:"):
        name = source.split(":", 1)[1]
        try:
            return get_fixture(name)
        except KeyError as exc:
            raise ModelFileError(str(exc.args[0])) from None
    return parse_model(source)


def _load_volume(source: str) -> BSplineVolume:
    model = load_input(source)
    if not isinstance(model, BSplineVolume):
        raise ModelFileError(f"{source}: expected a volume model, got a surface set")
    return model


def skeleton_knots(faces) -> tuple[KnotVector, KnotVector, KnotVector]:
    """Volume knot vectors read off the faces (xi and zeta from eta0, eta from xi0)."""
    return (faces["eta0"].knots[0], faces["xi0"].knots[0], faces["xi0"].knots[1])


def _faces_of(model):
    return model.faces() if isinstance(model, BSplineVolume) else model


def _harmonic(model, cfg: PipelineConfig):
    faces = _faces_of(model)
    return harmonic_map(faces, skeleton_knots(faces), tol=cfg.pcg_tol, order=cfg.quad_order)


def run_pipeline(model, cfg: PipelineConfig, out: Path) -> int:
    """Run all three stages and write the outputs; returns the exit code."""
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    trace = []
    t0 = time.perf_counter()
    h = _harmonic(model, cfg)
    timings["harmonic"] = time.perf_counter() - t0
    trace.append(f"harmonic energy={h.energy:.12e} initial_energy={h.initial_energy:.12e}")

    t0 = time.perf_counter()
    b = bijectify(h.volume, bijectify_params(cfg))
    timings["bijective"] = time.perf_counter() - t0
    trace.append(f"bijective status={b.status} solves={b.solver_calls} {b.message}".rstrip())
    trace += [t.line() for t in b.trace]
    if b.trace:
        trace.append(
            f"collocation_constraints={b.trace[-1].n_constraints} "
            f"alternative_constraints={alternative_constraint_count(h.volume)}"
        )
    vol, report = b.volume, b.report
    code = EXIT_OK
    if b.status == "failed":
        code = EXIT_SOLVER
    elif not report.certified:
        code = EXIT_CERT
    else:
        t0 = time.perf_counter()
        r = refine(vol, max_iter=cfg.mips_max_iter, grad_tol=cfg.mips_grad_tol, order=cfg.quad_order,
                   cert_delta=cfg.cert_delta, cert_depth=cfg.cert_depth, report=report)
        timings["mips"] = time.perf_counter() - t0
        trace.append(
            f"mips status={r.status} iterations={r.iterations} objective {r.initial_objective:.12e} -> {r.objective:.12e}"
        )
        trace += ["mips " + line for line in r.trace_text().splitlines()]
        vol, report = r.volume, r.report

    t0 = time.perf_counter()
    q = quality_report(vol, samples=cfg.samples, grid=cfg.dvol_grid)
    timings["metrics"] = time.perf_counter() - t0
    timings["total"] = sum(timings.values())

    write_model(vol, out / "volume.json")
    (out / "certificate.json").write_text(report.to_json() + "\n")
    (out / "quality.json").write_text(q.to_json() + "\n")
    (out / "config.json").write_text(cfg.to_json())
    (out / "trace.log").write_text("\n".join(trace) + "\n")
    (out / "timings.json").write_text(dumps_json(timings))
    print(f"status={report.status} exit={code}")
    print(TABLE_HEADER)
    print(q.table_line())
    return code


def _dispatch(args) -> int:
    if args.command == "fixture":
        vol = get_fixture(args.name)
        write_model(vol if args.kind == "volume" else vol.faces(), args.out)
        return EXIT_OK
    cfg = resolve_config(args)
    with threadpool_limits(limits=cfg.threads):
        if args.command == "pipeline":
            return run_pipeline(load_input(args.input), cfg, Path(args.out))
        if args.command == "harmonic":
            h = _harmonic(load_input(args.input), cfg)
            write_model(h.volume, args.out)
            print(f"energy={h.energy:.12e}")
            return EXIT_OK
        vol = _load_volume(args.input)
        if args.command == "certify":
            report = certify_volume(vol, cfg.cert_delta, cfg.cert_depth)
            if args.out:
                Path(args.out).write_text(report.to_json() + "\n")
            print(f"status={report.status} certified={report.n_certified}/{len(report.verdicts)}")
            if not report.certified:
                print("failing cells: " + " ".join(str(c) for c in report.failing_cells))
                return EXIT_CERT
            return EXIT_OK
        if args.command == "metrics":
            q = quality_report(vol, samples=cfg.samples, grid=cfg.dvol_grid)
            if args.out:
                Path(args.out).write_text(q.to_json() + "\n")
            print(TABLE_HEADER)
            print(q.table_line())
            return EXIT_OK
        if args.command == "export":
            fields = tuple(f for f in args.fields.split(",") if f)
            try:
                export_vtk(vol, args.out, args.resolution, fields)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            return EXIT_OK
        if args.command == "bijectify":
            if args.trace:
                with open(args.trace, "w") as fh:
                    b = bijectify(vol, bijectify_params(cfg), trace_file=fh)
            else:
                b = bijectify(vol, bijectify_params(cfg))
            write_model(b.volume, args.out)
            print(f"status={b.status} {b.message}".rstrip())
            if b.status == "failed":
                return EXIT_SOLVER
            return EXIT_OK if b.report.certified else EXIT_CERT
        if args.command == "refine":
            r = refine(vol, max_iter=cfg.mips_max_iter, grad_tol=cfg.mips_grad_tol, order=cfg.quad_order,
                       cert_delta=cfg.cert_delta, cert_depth=cfg.cert_depth)
            write_model(r.volume, args.out)
            print(f"status={r.status} objective {r.initial_objective:.12e} -> {r.objective:.12e}")
            return EXIT_OK if r.status == "Certified" else EXIT_CERT
    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"volparam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO, format="%(name)s: %(message)s")
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"volparam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except INPUT_ERRORS as exc:
        print(f"volparam: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SOLVER_ERRORS as exc:
        print(f"volparam: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"volparam: I/O error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
