"""Heat-then-Poisson geodesic distance pipeline on a closest-point band."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field, replace
import logging
import time
from typing import Any, Iterator, Sequence

import numpy as np
from numpy.typing import ArrayLike
import scipy.sparse as sp

from app.band import Band, bandwidth, build_band_for
from app.errors import CphmError, ConfigurationError, PipelineStageError, SolverError, UnsupportedOracleError
from app.geometry import FloatArray, Hemisphere, Surface
from app.linalg import SolverConfig, apply_nullspace_policy, relative_residual, solve
from app.operators import (
    OperatorSet,
    assemble_operators,
    boundary_flux_vector,
    interpolation_matrix,
    neumann_data_vector,
)
from app.source import SourceSpec, build_delta, snap_sources

logger = logging.getLogger(__name__)

STAGES = ("sources", "band", "operators", "local_reconstruction", "heat_solve", "poisson_solve")


@dataclass(frozen=True)
class CphmConfig:
    dx: float
    dt: float | None = None
    gamma: float | None = None
    p: int = 1
    q: int = 3
    H: float | None = None
    grad_eps: float = 1e-14
    kappa: int = 2
    extend_X: bool = True
    renormalize_delta: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self) -> None:
        if not self.dx > 0:
            raise ConfigurationError(f"dx must be positive, got {self.dx}.")
        for name in ("dt", "gamma", "H"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigurationError(f"{name} must be positive, got {value}.")
        for name in ("p", "q"):
            value = getattr(self, name)
            if value < 1 or value % 2 == 0:
                raise ConfigurationError(f"{name} must be a positive odd degree, got {value}.")
        if self.p > self.q:
            raise ConfigurationError(f"p must not exceed q, got p={self.p}, q={self.q}.")
        if self.kappa not in (1, 2):
            raise ConfigurationError(f"kappa must be 1 or 2, got {self.kappa}.")
        if not self.grad_eps > 0:
            raise ConfigurationError(f"grad_eps must be positive, got {self.grad_eps}.")

    def time_step(self) -> float:
        return self.dt if self.dt is not None else self.dx**2

    def penalty(self, dim: int) -> float:
        return self.gamma if self.gamma is not None else 2.0 * dim / self.dx**2

    def support_radius(self) -> float:
        return self.H if self.H is not None else 2.0 * self.dx


@dataclass
class RunReport:
    surface: str
    dx: float
    n_points: int = 0
    nnz: int = 0
    n_ghost: int = 0
    timings: dict[str, float] = field(default_factory=dict)
    residuals: dict[str, float] = field(default_factory=dict)
    errors: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "surface": self.surface,
            "dx": float(self.dx),
            "n_points": int(self.n_points),
            "nnz": int(self.nnz),
            "n_ghost": int(self.n_ghost),
            "timings": {k: round(float(v), 6) for k, v in self.timings.items()},
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "errors": {k: float(v) for k, v in self.errors.items()},
        }


@dataclass(frozen=True, eq=False)
class HeatField:
    u1: FloatArray
    residual: float = 0.0


@dataclass(eq=False)
class DistanceField:
    phi: FloatArray
    band: Band
    sources: SourceSpec
    surface_samples: tuple[FloatArray, FloatArray] | None = None
    report: RunReport | None = None


def _with_guard(pde: sp.spmatrix, constraint: sp.spmatrix, guard: np.ndarray) -> sp.csr_matrix:
    """Rows flagged in `guard` take the extension constraint instead of the PDE row."""
    if not np.any(guard):
        return sp.csr_matrix(pde)
    g = guard.astype(np.float64)
    return sp.csr_matrix(sp.diags(1.0 - g) @ pde + sp.diags(g) @ constraint)


def heat_system(ops: OperatorSet, cfg: CphmConfig, dim: int) -> sp.csr_matrix:
    n = ops.L.shape[0]
    eye = sp.identity(n, format="csr")
    gamma = cfg.penalty(dim)
    if ops.is_open:
        constraint = eye - ops.Ebar_q - ops.Ebar_g
        pde = ops.Ebar_p @ ops.L - eye / cfg.time_step() - gamma * constraint
    else:
        constraint = eye - ops.E_q
        pde = ops.E_p @ ops.L - eye / cfg.time_step() - gamma * constraint
    return _with_guard(pde, constraint, ops.guard_rows)


def poisson_system(ops: OperatorSet, cfg: CphmConfig, dim: int) -> sp.csr_matrix:
    n = ops.L.shape[0]
    eye = sp.identity(n, format="csr")
    E_p, E_q = (ops.Ebar_p, ops.Ebar_q) if ops.is_open else (ops.E_p, ops.E_q)
    constraint = eye - E_q
    pde = E_p @ ops.L - cfg.penalty(dim) * constraint
    return _with_guard(pde, constraint, ops.guard_rows)


def cp_heat_solve(band: Band, ops: OperatorSet, u0: ArrayLike, cfg: CphmConfig) -> HeatField:
    A = heat_system(ops, cfg, band.dim)
    b = -np.asarray(u0, dtype=np.float64) / cfg.time_step()
    b[ops.guard_rows] = 0.0
    u1 = solve(A, b, cfg.solver)
    residual = relative_residual(A, u1, b)
    logger.info("Heat solve: N=%d nnz=%d residual=%.2e", len(band), A.nnz, residual)
    return HeatField(u1=u1, residual=residual)


def normalize_gradient(grad: ArrayLike | Sequence[ArrayLike], grad_eps: float = 1e-14) -> FloatArray:
    """Unit vectors against the gradient; rows with norm at or below grad_eps shrink toward zero."""
    if isinstance(grad, (list, tuple)):
        G = np.column_stack([np.asarray(g, dtype=np.float64) for g in grad])
    else:
        G = np.atleast_2d(np.asarray(grad, dtype=np.float64))
    norm = np.linalg.norm(G, axis=1)
    return -G / np.maximum(norm, grad_eps)[:, None]


def anchor(phi: ArrayLike, band: Band, sources: SourceSpec, order: int = 3) -> FloatArray:
    """Shift phi so the smallest value interpolated at a source is zero."""
    phi = np.asarray(phi, dtype=np.float64)
    at_sources = interpolation_matrix(band, sources.points, order) @ phi
    return phi - float(np.min(at_sources))


def poisson_pin_row(band: Band, ops: OperatorSet) -> int:
    """Interior row closest to the surface.

    Outer and guard rows carry no weight in the left null vector of the Poisson system, so
    pinning one of them leaves it singular.
    """
    candidates = np.flatnonzero(band.inner & ~ops.guard_rows & ~band.is_ghost)
    if candidates.size == 0:
        raise SolverError("No interior band row is available to pin the Poisson system.", n=len(band))
    return int(candidates[np.argmin(band.cp.dist[candidates])])


def cp_poisson_solve(
    band: Band,
    ops: OperatorSet,
    u1: HeatField,
    cfg: CphmConfig,
    sources: SourceSpec,
) -> DistanceField:
    u = u1.u1
    grad = np.column_stack([Dj @ u for Dj in ops.D])
    # The heat solution decays exponentially away from the sources; dividing by its local
    # magnitude keeps the direction and lifts the gradient clear of the guard.
    magnitude = np.maximum(np.abs(u), np.finfo(np.float64).tiny)
    X = normalize_gradient(grad / magnitude[:, None], cfg.grad_eps)
    E_q = ops.Ebar_q if ops.is_open else ops.E_q
    X_ext = ops.E_q @ X if cfg.extend_X else X
    f = sum(Dj @ X_ext[:, j] for j, Dj in enumerate(ops.D))

    A = poisson_system(ops, cfg, band.dim)
    b = E_q @ f
    if ops.is_open:
        g2 = boundary_flux_vector(ops.ghosts, X, len(band))
        b = b - cfg.penalty(band.dim) * g2
        b[ops.guard_rows] = g2[ops.guard_rows]
    else:
        b[ops.guard_rows] = 0.0

    pinned_cfg = replace(cfg.solver, nullspace_policy="pin_first_unknown", pin_index=poisson_pin_row(band, ops))
    phi = solve(A, b, pinned_cfg)
    A_pin, b_pin = apply_nullspace_policy(A, b, pinned_cfg)
    residual = relative_residual(A_pin, phi, b_pin)
    logger.info("Poisson solve: N=%d nnz=%d residual=%.2e", len(band), A.nnz, residual)

    phi = anchor(phi, band, sources, ops.q)
    field_ = DistanceField(
        phi=phi,
        band=band,
        sources=sources,
        surface_samples=(band.cp.cp.copy(), ops.E_q @ phi),
    )
    field_.report = RunReport(surface="", dx=band.dx, residuals={"poisson_solve": residual})
    return field_


@contextmanager
def _stage(name: str, report: RunReport) -> Iterator[None]:
    started = time.perf_counter()
    try:
        yield
    except PipelineStageError:
        raise
    except CphmError as exc:
        raise PipelineStageError(name, exc) from exc
    finally:
        report.timings[name] = time.perf_counter() - started


def cphm_run(surface: Surface, spec: SourceSpec, cfg: CphmConfig) -> DistanceField:
    report = RunReport(surface=surface.kind, dx=cfg.dx)
    started = time.perf_counter()
    with _stage("sources", report):
        snapped = snap_sources(surface, spec.points, bandwidth(surface.dim, cfg.q, cfg.dx))
        sources = SourceSpec(points=snapped, H=spec.H if spec.H is not None else cfg.support_radius())
    with _stage("band", report):
        band = build_band_for(surface, cfg.dx, cfg.p, cfg.q)
    with _stage("operators", report):
        ops = assemble_operators(band, surface, cfg.p, cfg.q, float(cfg.kappa))
    with _stage("local_reconstruction", report):
        u0 = build_delta(band, surface, sources)
        if cfg.renormalize_delta:
            u0 = u0 / u0.sum()
    with _stage("heat_solve", report):
        heat = cp_heat_solve(band, ops, u0, cfg)
    with _stage("poisson_solve", report):
        result = cp_poisson_solve(band, ops, heat, cfg, sources)

    report.n_points = len(band)
    report.nnz = heat_system(ops, cfg, band.dim).nnz
    report.n_ghost = int(band.is_ghost.sum())
    report.residuals["heat_solve"] = heat.residual
    if result.report is not None:
        report.residuals.update(result.report.residuals)
    report.timings["total"] = time.perf_counter() - started
    if surface.has_oracle:
        report.errors["rel_linf"] = measure_error(result, surface)
    result.report = report
    logger.info(
        "Run on %s at dx=%g: N=%d in %.2fs", surface.kind, cfg.dx, report.n_points, report.timings["total"]
    )
    return result


def oracle_distance(surface: Surface, sources: SourceSpec, points: FloatArray) -> FloatArray:
    if not surface.has_oracle:
        raise UnsupportedOracleError(f"No exact geodesic oracle for surface kind `{surface.kind}`.")
    return np.min([surface.exact_geodesic(x0, points) for x0 in sources.points], axis=0)


def measure_error(field_: DistanceField, surface: Surface) -> float:
    """Relative l-infinity error of phi at every band closest point against the exact distance."""
    if field_.surface_samples is None:
        raise ConfigurationError("Distance field carries no surface samples.")
    points, values = field_.surface_samples
    exact = oracle_distance(surface, field_.sources, points)
    return float(np.max(np.abs(values - exact)) / np.max(np.abs(exact)))


def convergence_orders(dxs: Sequence[float], errors: Sequence[float]) -> tuple[list[float | None], float | None]:
    """Pairwise observed orders (None for the first row) and the least-squares log-log slope."""
    dxs = np.asarray(dxs, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    pairwise: list[float | None] = [None]
    for k in range(1, len(dxs)):
        pairwise.append(float(np.log(errors[k - 1] / errors[k]) / np.log(dxs[k - 1] / dxs[k])))
    slope = float(np.polyfit(np.log(dxs), np.log(errors), 1)[0]) if len(dxs) >= 2 else None
    return pairwise, slope


@dataclass(frozen=True)
class NeumannResult:
    dx: float
    rel_error: float
    order: float | None
    n_points: int
    surface_error: float | None = None


def neumann_exact(points: FloatArray) -> FloatArray:
    """u = x z on the unit sphere, i.e. sin(theta) cos(theta) cos(phi)."""
    return points[:, 0] * points[:, 2]


def verify_neumann_poisson(cfg: CphmConfig, dx: float, previous: NeumannResult | None = None) -> NeumannResult:
    """Screened Poisson problem on the unit upper hemisphere with inhomogeneous Neumann data.

    Solves Lap_S u - u = f with f = -7u and conormal derivative g = -x on the equator.
    """
    cfg = replace(cfg, dx=dx)
    surface = Hemisphere()
    band = build_band_for(surface, dx, cfg.p, cfg.q)
    ops = assemble_operators(band, surface, cfg.p, cfg.q, float(cfg.kappa))
    n = len(band)
    eye = sp.identity(n, format="csr")
    gamma = cfg.penalty(band.dim)
    constraint = eye - ops.Ebar_q
    A = _with_guard(ops.Ebar_p @ ops.L - eye - gamma * constraint, constraint, ops.guard_rows)

    cps = band.cp.cp
    f = -7.0 * neumann_exact(cps)
    g_bar = neumann_data_vector(ops.ghosts, -cps[ops.ghosts.rows, 0], n)
    b = f - gamma * g_bar
    b[ops.guard_rows] = g_bar[ops.guard_rows]
    u = solve(A, b, cfg.solver)

    # Ghost values are boundary data; every other grid value approximates u at its closest point.
    exact = neumann_exact(cps)
    rows = ~band.is_ghost
    scale = float(np.max(np.abs(exact[rows])))
    rel_error = float(np.max(np.abs(u[rows] - exact[rows]))) / scale
    surface_error = float(np.max(np.abs(ops.E_q @ u - exact))) / float(np.max(np.abs(exact)))
    order = None
    if previous is not None:
        order = float(np.log(previous.rel_error / rel_error) / np.log(previous.dx / dx))
    logger.info(
        "Neumann benchmark dx=%g: N=%d grid error %.4e, surface error %.4e", dx, n, rel_error, surface_error
    )
    return NeumannResult(dx=dx, rel_error=rel_error, order=order, n_points=n, surface_error=surface_error)
