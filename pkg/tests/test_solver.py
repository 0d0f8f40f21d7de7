from __future__ import annotations

import numpy as np
import pytest
from scipy.special import eval_legendre

from app.band import build_band_for
from app.errors import ConfigurationError, PipelineStageError, SourceConfigurationError, UnsupportedOracleError
from app.geometry import Disk2d, Hemisphere, Sphere, Torus
from app.linalg import SolverConfig, apply_nullspace_policy
from app.operators import assemble_operators, interpolation_matrix
from app.solver import (
    STAGES,
    CphmConfig,
    HeatField,
    anchor,
    convergence_orders,
    cp_heat_solve,
    cp_poisson_solve,
    cphm_run,
    measure_error,
    normalize_gradient,
    oracle_distance,
    poisson_pin_row,
    poisson_system,
    verify_neumann_poisson,
)
from app.source import SourceSpec, build_delta

NORTH = [0.0, 0.0, 1.0]


@pytest.fixture(scope="module")
def sphere_problem():
    surface = Sphere()
    cfg = CphmConfig(dx=0.1)
    band = build_band_for(surface, cfg.dx, cfg.p, cfg.q)
    ops = assemble_operators(band, surface, cfg.p, cfg.q, float(cfg.kappa))
    sources = SourceSpec(points=[NORTH], H=cfg.support_radius())
    u0 = build_delta(band, surface, sources)
    return surface, cfg, band, ops, sources, u0


@pytest.fixture(scope="module")
def sphere_run():
    return cphm_run(Sphere(), SourceSpec(points=[NORTH]), CphmConfig(dx=0.1))


def test_config_defaults_follow_grid_spacing():
    cfg = CphmConfig(dx=0.1)
    assert cfg.time_step() == pytest.approx(0.01)
    assert cfg.penalty(3) == pytest.approx(600.0)
    assert cfg.penalty(2) == pytest.approx(400.0)
    assert cfg.support_radius() == pytest.approx(0.2)
    assert CphmConfig(dx=0.1, dt=0.5, gamma=7.0, H=0.3).penalty(3) == 7.0


@pytest.mark.parametrize(
    "overrides",
    [{"dx": 0.0}, {"dx": 0.1, "p": 2}, {"dx": 0.1, "p": 5, "q": 3}, {"dx": 0.1, "kappa": 3}, {"dx": 0.1, "dt": -1.0}],
)
def test_config_rejects_invalid_values(overrides):
    with pytest.raises(ConfigurationError):
        CphmConfig(**overrides)


def test_normalize_gradient_cases():
    X = normalize_gradient(np.array([[2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 3.0, 4.0]]))

    np.testing.assert_allclose(X[0], [-1.0, 0.0, 0.0])
    np.testing.assert_allclose(X[1], [0.0, 0.0, 0.0])
    assert np.linalg.norm(X[2]) == pytest.approx(1.0)


def test_normalize_gradient_accepts_components():
    X = normalize_gradient((np.array([1e-20, 1.0]), np.array([0.0, 0.0])), grad_eps=1e-14)
    assert np.linalg.norm(X[0]) < 1e-5
    np.testing.assert_allclose(X[1], [-1.0, 0.0])


def test_heat_step_matches_spherical_harmonic_resolvent(sphere_problem):
    # One backward Euler step from a point source at the pole: sum over l of
    # (2l+1)/(4 pi) P_l(cos theta) / (1 + dt l(l+1)).
    _, _, band, ops, _, u0 = sphere_problem
    cfg = CphmConfig(dx=0.1, dt=0.5)
    u1 = ops.E_q @ cp_heat_solve(band, ops, u0, cfg).u1

    cos_theta = np.clip(band.cp.cp[:, 2], -1.0, 1.0)
    rows = np.arccos(cos_theta) >= 0.5
    exact = sum(
        (2 * l + 1) / (4 * np.pi) * eval_legendre(l, cos_theta[rows]) / (1.0 + cfg.dt * l * (l + 1))
        for l in range(300)
    )
    mass = np.dot(exact, u1[rows]) / np.dot(exact, exact)

    assert np.max(np.abs(u1[rows] - mass * exact)) / np.max(np.abs(u1[rows])) < 0.05


def test_heat_solve_of_zero_data_is_zero(sphere_problem):
    _, cfg, band, ops, _, _ = sphere_problem
    heat = cp_heat_solve(band, ops, np.zeros(len(band)), cfg)
    assert not np.any(heat.u1)


def test_heat_solve_is_linear(sphere_problem):
    _, cfg, band, ops, _, u0 = sphere_problem
    one = cp_heat_solve(band, ops, u0, cfg).u1
    three = cp_heat_solve(band, ops, 3.0 * u0, cfg).u1
    np.testing.assert_allclose(three, 3.0 * one, atol=1e-9 * np.abs(one).max())


def test_heat_decreases_away_from_source(sphere_problem):
    _, cfg, band, ops, _, u0 = sphere_problem
    heat = cp_heat_solve(band, ops, u0, cfg)
    on_surface = ops.E_q @ heat.u1
    colatitude = np.arccos(np.clip(band.cp.cp[:, 2], -1.0, 1.0))

    edges = np.linspace(0.0, 0.6, 7)
    means = [on_surface[(colatitude >= lo) & (colatitude < hi)].mean() for lo, hi in zip(edges[:-1], edges[1:])]

    assert np.all(np.diff(means) < 0.0)
    assert heat.residual <= cfg.solver.rel_tol


def test_constant_heat_gives_zero_distance(sphere_problem):
    _, cfg, band, ops, sources, _ = sphere_problem
    field = cp_poisson_solve(band, ops, HeatField(u1=np.full(len(band), 2.0)), cfg, sources)
    np.testing.assert_allclose(field.phi, 0.0, atol=1e-12)


def test_anchor_cases(sphere_problem):
    _, _, band, _, sources, u0 = sphere_problem
    np.testing.assert_allclose(anchor(np.full(len(band), 4.5), band, sources), 0.0, atol=1e-12)

    once = anchor(u0, band, sources)
    np.testing.assert_allclose(anchor(once, band, sources), once, atol=1e-12)


def test_distance_is_invariant_to_source_scaling(sphere_problem):
    _, cfg, band, ops, sources, u0 = sphere_problem
    base = cp_poisson_solve(band, ops, cp_heat_solve(band, ops, u0, cfg), cfg, sources)
    scaled = cp_poisson_solve(band, ops, cp_heat_solve(band, ops, 10.0 * u0, cfg), cfg, sources)

    assert np.max(np.abs(base.phi - scaled.phi)) <= 10.0 * cfg.solver.rel_tol


def test_sphere_run_report_and_accuracy(sphere_run):
    report = sphere_run.report

    assert report.surface == "sphere"
    assert report.n_points == len(sphere_run.band)
    assert set(STAGES) | {"total"} <= set(report.timings)
    assert report.residuals["heat_solve"] <= 1e-10
    assert report.residuals["poisson_solve"] <= 1e-10
    assert 0.0 < report.errors["rel_linf"] < 0.2
    assert report.to_dict()["n_points"] == report.n_points


def test_sphere_run_is_anchored_at_the_source(sphere_run):
    band = sphere_run.band
    at_source = interpolation_matrix(band, sphere_run.sources.points, 3) @ sphere_run.phi
    assert at_source[0] == pytest.approx(0.0, abs=1e-12)

    points, values = sphere_run.surface_samples
    near = np.arccos(np.clip(points[:, 2], -1.0, 1.0)) <= 4 * band.dx
    assert np.all(values[near] >= -10 * band.dx)


def test_measure_error_matches_report(sphere_run):
    assert measure_error(sphere_run, Sphere()) == pytest.approx(sphere_run.report.errors["rel_linf"])


def test_two_source_oracle_takes_minimum():
    spec = SourceSpec(points=[NORTH, [0.0, 0.0, -1.0]])
    d = oracle_distance(Sphere(), spec, np.array([[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]]))
    np.testing.assert_allclose(d, [np.pi / 2, np.arccos(0.8)])


def test_oracle_is_unsupported_on_torus():
    with pytest.raises(UnsupportedOracleError):
        oracle_distance(Torus(), SourceSpec(points=[[1.4, 0.0, 0.0]]), np.array([[0.0, 1.4, 0.0]]))


def test_pinned_sphere_poisson_system_is_nonsingular():
    surface = Sphere()
    cfg = CphmConfig(dx=0.2)
    band = build_band_for(surface, cfg.dx)
    ops = assemble_operators(band, surface)
    A = poisson_system(ops, cfg, band.dim)
    b = np.zeros(len(band))

    def conditioning(pin: int) -> float:
        pinned, _ = apply_nullspace_policy(A, b, SolverConfig(nullspace_policy="pin_first_unknown", pin_index=pin))
        s = np.linalg.svd(pinned.toarray(), compute_uv=False)
        return s[-1] / s[0]

    row = poisson_pin_row(band, ops)
    assert band.inner[row] and not ops.guard_rows[row]
    assert conditioning(row) > 1e-9
    # The first row lies in the outer layer, where the left null vector vanishes.
    assert not band.inner[0]
    assert conditioning(0) < 1e-12


def test_off_surface_source_is_reported_with_stage():
    with pytest.raises(PipelineStageError) as info:
        cphm_run(Sphere(), SourceSpec(points=[[0.0, 0.0, 3.0]]), CphmConfig(dx=0.2))

    assert info.value.stage == "sources"
    assert isinstance(info.value.cause, SourceConfigurationError)
    assert str(info.value).startswith("[sources]")


def test_disk_run_tracks_euclidean_distance():
    result = cphm_run(Disk2d(), SourceSpec(points=[[-1 / np.pi, -1 / np.e]]), CphmConfig(dx=0.05))

    assert result.band.dim == 2
    assert result.report.n_ghost > 0
    assert result.report.errors["rel_linf"] < 0.2


def test_hemisphere_run_completes_with_boundary():
    result = cphm_run(Hemisphere(), SourceSpec(points=[[0.3, -0.2, 0.933]]), CphmConfig(dx=0.2))

    assert np.all(np.isfinite(result.phi))
    assert result.report.n_ghost > 0
    assert result.report.errors["rel_linf"] < 0.5


def test_torus_run_has_no_error_entry():
    result = cphm_run(Torus(), SourceSpec(points=[[1.4, 0.0, 0.0]]), CphmConfig(dx=0.1))

    assert result.report.errors == {}
    points, values = result.surface_samples
    far = np.argmax(values)
    assert points[far, 0] < 0.0


def test_convergence_orders():
    pairwise, slope = convergence_orders([0.1, 0.05, 0.025], [4e-2, 2e-2, 1e-2])
    assert pairwise[0] is None
    assert pairwise[1:] == [pytest.approx(1.0), pytest.approx(1.0)]
    assert slope == pytest.approx(1.0)
    assert convergence_orders([0.1], [1e-2]) == ([None], None)


def test_neumann_benchmark_tracks_reference_table():
    cfg = CphmConfig(dx=0.2)
    coarse = verify_neumann_poisson(cfg, 0.2)
    finer = verify_neumann_poisson(cfg, 0.1, previous=coarse)

    assert coarse.order is None
    assert finer.rel_error < coarse.rel_error
    assert finer.order == pytest.approx(np.log(coarse.rel_error / finer.rel_error) / np.log(2.0))
    assert finer.rel_error == pytest.approx(6.6396e-3, rel=0.1)
    assert 0.0 < finer.surface_error < 2 * finer.rel_error
