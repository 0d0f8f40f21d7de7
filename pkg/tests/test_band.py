from __future__ import annotations

import math

import numpy as np
import pytest

from app.band import GridSpec, axis_offsets, bandwidth, build_band, build_band_for
from app.errors import ConfigurationError
from app.geometry import Disk2d, Hemisphere, Sphere
from app.operators import stencil_weights


@pytest.fixture(scope="module")
def sphere_band():
    return build_band_for(Sphere(), 0.2)


def test_bandwidth_formula():
    assert bandwidth(3, 3, 0.1) == pytest.approx(0.1 * math.sqrt(17.0))
    assert bandwidth(2, 3, 0.1) == pytest.approx(0.1 * math.sqrt(13.0))
    assert bandwidth(3, 1, 1.0) == pytest.approx(math.sqrt(6.0))


@pytest.mark.parametrize("dim,q,dx", [(4, 3, 0.1), (3, 0, 0.1), (3, 3, 0.0)])
def test_bandwidth_rejects_bad_parameters(dim, q, dx):
    with pytest.raises(ConfigurationError):
        bandwidth(dim, q, dx)


def test_grid_nodes_sit_on_shifted_lattice():
    grid = GridSpec.around(Sphere(), 0.1)
    offset = np.asarray(grid.origin) / grid.dx - 1.0 / math.pi
    np.testing.assert_allclose(offset, np.round(offset), atol=1e-9)


def test_planar_grid_has_one_layer():
    grid = GridSpec.around(Disk2d(), 0.1)
    assert grid.dim == 2
    assert grid.extent[2] == 1
    with pytest.raises(ConfigurationError):
        GridSpec(dim=2, origin=(0.0, 0.0, 0.0), dx=0.1, extent=(3, 3, 2))


def test_band_points_are_within_bandwidth_and_sorted(sphere_band):
    band = sphere_band
    assert np.all(band.cp.dist <= band.bandwidth)
    assert np.all(np.diff(band.linear_index) > 0)
    np.testing.assert_allclose(np.linalg.norm(band.position - band.cp.cp, axis=1), band.cp.dist, atol=1e-12)


def test_index_map_is_a_bijection(sphere_band):
    band = sphere_band
    mapping = band.index_map
    assert sorted(mapping.values()) == list(range(len(band)))
    i = len(band) // 3
    assert mapping[tuple(int(v) for v in band.multi_index[i])] == i


def test_lookup_marks_missing_nodes(sphere_band):
    band = sphere_band
    assert band.lookup(band.multi_index[5:6]).tolist() == [5]
    assert band.lookup([[-1, 0, 0]]).tolist() == [-1]
    centre = np.round((np.zeros(3) - np.asarray(band.grid.origin)) / band.dx).astype(int)
    assert band.lookup(centre[None, :]).tolist() == [-1]


def test_inner_points_have_full_stencils(sphere_band):
    band = sphere_band
    rows = np.flatnonzero(band.inner)
    nb = band.lookup(band.multi_index[rows, None, :] + axis_offsets(3)[None, :, :])
    assert np.all(nb >= 0)
    assert band.inner.sum() < len(band)


def test_interpolation_stencils_at_closest_points_stay_inside(sphere_band):
    band = sphere_band
    stencil = stencil_weights(band.grid, band.cp.cp, 3)
    offsets = np.array(np.meshgrid(*[np.arange(4)] * 3, indexing="ij")).reshape(3, -1).T
    nodes = stencil.base[:, None, :] + offsets[None, :, :]
    assert np.all(band.lookup(nodes) >= 0)


def test_closed_surface_has_no_ghosts(sphere_band):
    assert not sphere_band.is_ghost.any()
    np.testing.assert_array_equal(sphere_band.cp_mirror.cp, sphere_band.cp.cp)


def test_hemisphere_band_flags_ghost_points():
    band = build_band_for(Hemisphere(), 0.2)
    assert band.is_ghost.any()
    ghost = band.point(int(np.argmax(band.is_ghost)))
    assert ghost.is_ghost
    assert ghost.cp.cp[2] == pytest.approx(0.0, abs=1e-9)


def test_band_point_view(sphere_band):
    point = sphere_band.point(0)
    assert point.layer in ("inner", "outer")
    assert point.cp.dist == pytest.approx(float(sphere_band.cp.dist[0]))


def test_build_band_rejects_mismatched_inputs():
    grid = GridSpec.around(Sphere(), 0.2)
    with pytest.raises(ConfigurationError, match="dimension"):
        build_band(Disk2d(), grid, 1, 3)
    with pytest.raises(ConfigurationError, match="degrees"):
        build_band(Sphere(), grid, 3, 1)


def test_grid_too_small_is_reported():
    grid = GridSpec(dim=3, origin=(-1.05, -1.05, -1.05), dx=0.1, extent=(22, 22, 22))
    with pytest.raises(ConfigurationError, match="too small"):
        build_band(Sphere(), grid, 1, 3)


def test_band_far_from_surface_is_empty():
    grid = GridSpec(dim=3, origin=(5.0, 5.0, 5.0), dx=0.1, extent=(4, 4, 4))
    with pytest.raises(ConfigurationError, match="empty"):
        build_band(Sphere(), grid, 1, 3)


@pytest.mark.parametrize("dx,expected", [(0.1, 10_906), (0.05, 41_870)])
def test_unit_sphere_band_size(dx, expected):
    band = build_band_for(Sphere(), dx)
    assert abs(len(band) - expected) <= 0.05 * expected


def test_unit_disk_band_size():
    band = build_band_for(Disk2d(), 0.01)
    assert abs(len(band) - 33_745) <= 0.05 * 33_745


def test_sphere_band_grows_fourfold_under_refinement(sphere_band):
    finer = build_band_for(Sphere(), sphere_band.dx / 2)
    assert 3.6 <= len(finer) / len(sphere_band) <= 4.4
