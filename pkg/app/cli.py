"""Command-line front end: solve, converge, verify-neumann, export and serve."""

from __future__ import annotations

import argparse
import logging
import os
from pathlib import Path
import sys
from typing import Any, Sequence

from pydantic import BaseModel, ValidationError
import yaml

from app.band import build_band_for
from app.errors import (
    CphmError,
    ConfigurationError,
    PipelineStageError,
    SourceConfigurationError,
    ToleranceError,
    UnsupportedOracleError,
)
from app.export import FieldArchive, export_outputs, load_field, save_field, write_summary
from app.operators import assemble_operators, dump_triplets
from app.schemas import RunConfig
from app.solver import (
    CphmConfig,
    NeumannResult,
    convergence_orders,
    cphm_run,
    heat_system,
    measure_error,
    poisson_system,
    verify_neumann_poisson,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_TOLERANCE = 4

NEUMANN_REFERENCE: dict[float, tuple[float, float | None]] = {
    0.1: (6.6396e-3, None),
    0.05: (1.8217e-3, 1.8658),
    0.025: (4.7954e-4, 1.9256),
    0.0125: (1.2362e-4, 1.9557),
}
NEUMANN_ERROR_RTOL = 0.10
NEUMANN_ORDER_ATOL = 0.1

_SURFACE_ALIASES = {"disk": "disk2d", "mesh": "triangle_mesh"}


def _leaf_keys(model: type[BaseModel], prefix: str = "") -> list[str]:
    keys = []
    for name, info in model.model_fields.items():
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            keys.extend(_leaf_keys(annotation, f"{prefix}{name}."))
        elif name != "sources":
            keys.append(f"{prefix}{name}")
    return keys


def _set_dotted(tree: dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def _parse_scalar(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML run configuration")
    parser.add_argument("--surface", help="sphere, hemisphere, disk2d, torus or mesh:<path.obj>")
    parser.add_argument("--dx", help="grid spacing, or `auto` for meshes")
    parser.add_argument("--source", action="append", default=None, help="x,y,z or sph:azimuth,colatitude (repeatable)")
    parser.add_argument("--out", help="output path prefix")
    parser.add_argument("--format", action="append", choices=["csv", "vtk", "summary"], default=None)
    parser.add_argument("--kappa", type=int, choices=[1, 2])
    parser.add_argument("--p", type=int)
    parser.add_argument("--q", type=int)
    parser.add_argument("--H", type=float)
    parser.add_argument("--solver-method", choices=["sparse_direct", "iterative_krylov"])
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="generic dotted override")
    overrides = parser.add_argument_group("dotted overrides")
    for key in _leaf_keys(RunConfig):
        overrides.add_argument(f"--{key}", dest=f"dotted:{key}", metavar="VALUE")


def build_run_config(args: argparse.Namespace) -> RunConfig:
    tree: dict[str, Any] = {}
    if args.config is not None:
        try:
            tree = yaml.safe_load(args.config.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"Cannot read config `{args.config}`: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigurationError(f"Config `{args.config}` must be a mapping.")

    for key, value in vars(args).items():
        if key.startswith("dotted:") and value is not None:
            _set_dotted(tree, key.split(":", 1)[1], _parse_scalar(value))
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"Override `{item}` must look like key=value.")
        _set_dotted(tree, key.strip(), _parse_scalar(value))

    if args.surface is not None:
        kind, _, path = args.surface.partition(":")
        kind = _SURFACE_ALIASES.get(kind, kind)
        _set_dotted(tree, "surface.kind", kind)
        if path:
            _set_dotted(tree, "surface.path", path)
    if args.dx is not None:
        _set_dotted(tree, "numerics.dx", _parse_scalar(args.dx))
    named = {
        "numerics.kappa": args.kappa,
        "numerics.p": args.p,
        "numerics.q": args.q,
        "numerics.H": args.H,
        "numerics.solver.method": args.solver_method,
        "outputs.prefix": args.out,
        "outputs.formats": args.format,
    }
    for key, value in named.items():
        if value is not None:
            _set_dotted(tree, key, value)
    if args.source:
        tree["sources"] = list(args.source)
    for key in ("save_field", "dump_operators"):
        value = getattr(args, key, None)
        if value is not None:
            _set_dotted(tree, f"outputs.{key}", str(value))

    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigurationError(f"Invalid run configuration:\n{exc}") from exc


def _print_report(report: dict[str, Any]) -> None:
    sys.stdout.write(yaml.safe_dump(report, sort_keys=False))


def _dump_operators(run: RunConfig, cfg: CphmConfig, directory: Path) -> None:
    surface = run.surface.build()
    band = build_band_for(surface, cfg.dx, cfg.p, cfg.q)
    ops = assemble_operators(band, surface, cfg.p, cfg.q, float(cfg.kappa))
    named = {"L": ops.L, "E_p": ops.E_p, "E_q": ops.E_q, "heat": heat_system(ops, cfg, band.dim), "poisson": poisson_system(ops, cfg, band.dim)}
    named.update({f"D_x{j + 1}": Dj for j, Dj in enumerate(ops.D)})
    if ops.is_open:
        named.update({"Ebar_p": ops.Ebar_p, "Ebar_q": ops.Ebar_q, "Ebar_g": ops.Ebar_g})
    for name, op in named.items():
        dump_triplets(op, directory / f"{name}.txt")


def cmd_solve(args: argparse.Namespace) -> int:
    run = build_run_config(args)
    surface = run.surface.build()
    cfg = run.numerics.to_config(surface)
    result = cphm_run(surface, run.source_spec(), cfg)
    archive = FieldArchive.from_field(result)
    export_outputs(archive, run.outputs.prefix, [f.value for f in run.outputs.formats])
    if run.outputs.save_field is not None:
        save_field(archive, run.outputs.save_field)
    if run.outputs.dump_operators is not None:
        _dump_operators(run, cfg, run.outputs.dump_operators)
    _print_report(archive.report)
    return EXIT_OK


def _parse_dx_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"Cannot parse dx list `{text}`.") from exc
    if not values or any(v <= 0 for v in values):
        raise ConfigurationError(f"dx list must hold positive values, got `{text}`.")
    return values


def _format_order(order: float | None) -> str:
    return "—" if order is None else f"{order:.4f}"


def format_error_table(dxs: Sequence[float], errors: Sequence[float], orders: Sequence[float | None], counts: Sequence[int]) -> str:
    lines = [f"{'dx':>10} {'N':>10} {'rel_linf':>12} {'order':>8}"]
    for dx, n, err, order in zip(dxs, counts, errors, orders):
        lines.append(f"{dx:>10.5g} {n:>10d} {err:>12.4e} {_format_order(order):>8}")
    return "\n".join(lines)


def cmd_converge(args: argparse.Namespace) -> int:
    run = build_run_config(args)
    surface = run.surface.build()
    if not surface.has_oracle:
        raise UnsupportedOracleError(f"No exact geodesic oracle for surface kind `{surface.kind}`.")
    dxs = _parse_dx_list(args.dx_list)
    spec = run.source_spec()
    errors, counts, reports = [], [], []
    for dx in dxs:
        result = cphm_run(surface, spec, run.numerics.to_config(surface, dx=dx))
        errors.append(measure_error(result, surface))
        counts.append(len(result.band))
        reports.append(result.report.to_dict() if result.report else {})
        logger.info("dx=%g N=%d rel_linf=%.4e", dx, counts[-1], errors[-1])
    orders, slope = convergence_orders(dxs, errors)
    sys.stdout.write(format_error_table(dxs, errors, orders, counts) + "\n")
    sys.stdout.write(f"least-squares order: {_format_order(slope)}\n")
    write_summary(
        {
            "surface": surface.kind,
            "rows": [
                {"dx": dx, "n_points": n, "rel_linf": err, "order": order}
                for dx, n, err, order in zip(dxs, counts, errors, orders)
            ],
            "order": slope,
            "runs": reports,
        },
        Path(f"{run.outputs.prefix}_convergence.yaml"),
    )
    return EXIT_OK


def _reference_for(dx: float) -> tuple[float, float | None] | None:
    for ref_dx, row in NEUMANN_REFERENCE.items():
        if abs(ref_dx - dx) <= 1e-12:
            return row
    return None


def check_neumann_rows(rows: Sequence[NeumannResult]) -> list[str]:
    """Rows outside the reference tolerances, as printable messages."""
    failures = []
    for row in rows:
        ref = _reference_for(row.dx)
        if ref is None:
            continue
        ref_error, ref_order = ref
        if abs(row.rel_error - ref_error) > NEUMANN_ERROR_RTOL * ref_error:
            failures.append(f"dx={row.dx:g}: error {row.rel_error:.4e} vs reference {ref_error:.4e}")
        if row.order is not None and ref_order is not None and abs(row.order - ref_order) > NEUMANN_ORDER_ATOL:
            failures.append(f"dx={row.dx:g}: order {row.order:.4f} vs reference {ref_order:.4f}")
    return failures


def cmd_verify_neumann(args: argparse.Namespace) -> int:
    dxs = _parse_dx_list(args.dx_list)
    overrides = {k: v for k, v in {"kappa": args.kappa, "p": args.p, "q": args.q}.items() if v is not None}
    cfg = CphmConfig(dx=dxs[0], **overrides)
    rows: list[NeumannResult] = []
    for dx in dxs:
        rows.append(verify_neumann_poisson(cfg, dx, rows[-1] if rows else None))
    table = format_error_table(
        [r.dx for r in rows], [r.rel_error for r in rows], [r.order for r in rows], [r.n_points for r in rows]
    )
    sys.stdout.write(table + "\n")
    failures = check_neumann_rows(rows)
    if failures:
        raise ToleranceError("Neumann benchmark outside tolerance: " + "; ".join(failures))
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    archive = load_field(args.field)
    prefix = args.out if args.out is not None else str(Path(args.field).with_suffix(""))
    export_outputs(archive, prefix, args.format or ["csv", "vtk", "summary"])
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    host = args.host or os.getenv("CPHM_HOST", "127.0.0.1")
    port = args.port or int(os.getenv("CPHM_PORT", "8000"))
    reload_enabled = os.getenv("CPHM_RELOAD", "false").strip().lower() == "true"
    uvicorn.run("app.api:app", host=host, port=port, reload=reload_enabled)
    return EXIT_OK


def exit_code_for(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, PipelineStageError) else exc
    if isinstance(cause, ToleranceError):
        return EXIT_TOLERANCE
    if isinstance(cause, (ConfigurationError, SourceConfigurationError, UnsupportedOracleError, ValidationError, OSError)):
        return EXIT_CONFIG
    return EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cphm", description="Geodesic distances on surfaces by the closest point heat method.", allow_abbrev=False)
    parser.add_argument("--log-level", default=os.getenv("CPHM_LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="compute a distance field", allow_abbrev=False)
    _add_run_options(solve)
    solve.add_argument("--save-field", type=Path, help="write an .npz field archive")
    solve.add_argument("--dump-operators", type=Path, help="write operator triplets to this directory")
    solve.set_defaults(handler=cmd_solve)

    converge = sub.add_parser("converge", help="error table over several resolutions", allow_abbrev=False)
    _add_run_options(converge)
    converge.add_argument("--dx-list", required=True, help="comma-separated grid spacings")
    converge.set_defaults(handler=cmd_converge)

    verify = sub.add_parser("verify-neumann", help="inhomogeneous Neumann benchmark on the hemisphere", allow_abbrev=False)
    verify.add_argument("--dx-list", default="0.1,0.05,0.025,0.0125")
    verify.add_argument("--kappa", type=int, choices=[1, 2])
    verify.add_argument("--p", type=int)
    verify.add_argument("--q", type=int)
    verify.set_defaults(handler=cmd_verify_neumann)

    export = sub.add_parser("export", help="re-export a saved field archive", allow_abbrev=False)
    export.add_argument("--field", type=Path, required=True)
    export.add_argument("--format", action="append", choices=["csv", "vtk", "summary"], default=None)
    export.add_argument("--out", help="output path prefix")
    export.set_defaults(handler=cmd_export)

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host")
    serve.add_argument("--port", type=int)
    serve.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except (CphmError, ValidationError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
