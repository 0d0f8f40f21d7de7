from __future__ import annotations

import numpy as np
import pytest

from app.errors import (
    AmbiguousClosestPointError,
    ConfigurationError,
    GeometryError,
    MeshFormatError,
    NotOnBoundaryError,
    UnsupportedOracleError,
)
from app.geometry import (
    MESH_TIE_SEPARATION,
    Disk2d,
    Hemisphere,
    Sphere,
    Torus,
    TriangleMesh,
    boundary_frame,
    closest_point,
    closest_point_on_triangles,
    exact_geodesic,
    icosphere,
    load_obj,
    make_surface,
    mirror_closest_point,
)


def _flat_square() -> TriangleMesh:
    vertices = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    return TriangleMesh(vertices, [[0, 1, 2], [0, 2, 3]])


def test_sphere_closest_point_is_radial_projection():
    sphere = Sphere(center=(1.0, 0.0, 0.0), radius=2.0)
    res = closest_point(sphere, [1.0, 0.0, 5.0])

    np.testing.assert_allclose(res.cp, [1.0, 0.0, 2.0])
    assert res.dist == pytest.approx(3.0)
    assert res.on_boundary is False
    np.testing.assert_allclose(res.surface_normal, [0.0, 0.0, 1.0])


def test_sphere_center_is_ambiguous():
    with pytest.raises(AmbiguousClosestPointError) as info:
        closest_point(Sphere(), [0.0, 0.0, 0.0])
    assert info.value.point == (0.0, 0.0, 0.0)


def test_closest_point_is_idempotent_on_every_surface():
    rng = np.random.default_rng(3)
    points = rng.uniform(-1.6, 1.6, size=(200, 3))
    points[:, 2] += 0.05
    for surface in (Sphere(), Hemisphere(), Torus()):
        first = surface.project(points)
        second = surface.project(first.cp)
        np.testing.assert_allclose(second.cp, first.cp, atol=1e-12)
        np.testing.assert_allclose(second.dist, 0.0, atol=1e-12)


def test_hemisphere_projects_lower_points_to_equator():
    res = closest_point(Hemisphere(), [0.5, 0.0, -0.3])

    np.testing.assert_allclose(res.cp, [1.0, 0.0, 0.0])
    assert res.on_boundary is True
    assert res.dist == pytest.approx(np.hypot(0.5, 0.3))


def test_hemisphere_axis_below_equator_is_ambiguous():
    with pytest.raises(AmbiguousClosestPointError, match="axis"):
        closest_point(Hemisphere(), [0.0, 0.0, -0.5])


def test_mirror_closest_point_reflects_across_boundary():
    surface = Hemisphere()
    x = np.array([1.1, 0.0, -0.2])
    standard = closest_point(surface, x)
    mirrored = mirror_closest_point(surface, x)

    reflected = 2.0 * standard.cp - x
    np.testing.assert_allclose(mirrored.cp, reflected / np.linalg.norm(reflected))
    assert mirrored.on_boundary is False


def test_mirror_matches_standard_away_from_boundary():
    surface = Hemisphere()
    x = [0.2, 0.3, 1.1]
    np.testing.assert_allclose(mirror_closest_point(surface, x).cp, closest_point(surface, x).cp)


def test_hemisphere_boundary_frame_is_orthonormal_and_outward():
    frame = boundary_frame(Hemisphere(), [0.0, 1.0, 0.0])

    np.testing.assert_allclose(frame.N, [0.0, 1.0, 0.0])
    np.testing.assert_allclose(frame.n, [0.0, 0.0, -1.0])
    basis = np.stack([frame.T, frame.N, frame.n])
    np.testing.assert_allclose(basis @ basis.T, np.eye(3), atol=1e-12)


def test_boundary_frame_rejects_interior_points():
    with pytest.raises(NotOnBoundaryError):
        boundary_frame(Hemisphere(), [0.0, 0.0, 1.0])
    with pytest.raises(NotOnBoundaryError):
        boundary_frame(Sphere(), [0.0, 0.0, 1.0])


def test_disk_projection_and_frame():
    disk = Disk2d(radius=1.0)
    inside = closest_point(disk, [0.3, -0.2])
    outside = closest_point(disk, [2.0, 0.0])
    frame = boundary_frame(disk, [0.0, -1.0])

    np.testing.assert_allclose(inside.cp, [0.3, -0.2, 0.0])
    assert inside.dist == 0.0
    np.testing.assert_allclose(outside.cp, [1.0, 0.0, 0.0])
    assert outside.on_boundary is True
    np.testing.assert_allclose(frame.n, [0.0, -1.0, 0.0])


def test_torus_closest_point_and_core_ambiguity():
    torus = Torus(R=1.0, r=0.4)
    res = closest_point(torus, [2.0, 0.0, 0.0])
    np.testing.assert_allclose(res.cp, [1.4, 0.0, 0.0])

    with pytest.raises(AmbiguousClosestPointError, match="core"):
        closest_point(torus, [0.0, 1.0, 0.0])


def test_exact_geodesic_values():
    assert exact_geodesic(Sphere(radius=2.0), [0, 0, 2], [2, 0, 0]) == pytest.approx(np.pi)
    assert exact_geodesic(Disk2d(), [0.0, 0.0], [0.3, 0.4]) == pytest.approx(0.5)
    assert exact_geodesic(Hemisphere(), [0, 0, 1], [1, 0, 0]) == pytest.approx(np.pi / 2)
    assert exact_geodesic(Sphere(), [0, 0, 1], [0, 0, 1]) == 0.0


def test_exact_geodesic_is_unsupported_for_torus_and_meshes():
    with pytest.raises(UnsupportedOracleError):
        exact_geodesic(Torus(), [1.4, 0, 0], [0, 1.4, 0])
    with pytest.raises(UnsupportedOracleError):
        exact_geodesic(icosphere(1), [0, 0, 1], [1, 0, 0])


def test_hemisphere_graph_oracle_agrees_with_arc_length():
    # 100 latitude rings of 320 vertices; targets sit on graph vertices of the phi = 0 meridian
    surface = Hemisphere(graph_vertices=32_001)
    x0 = np.array([0.0, 0.0, 1.0])
    targets = np.array([[np.sin(t), 0.0, np.cos(t)] for t in np.array([20, 50, 80]) * np.pi / 200])

    graph = surface.exact_geodesic(x0, targets, method="graph")
    arc = surface.exact_geodesic(x0, targets)

    np.testing.assert_allclose(graph, arc, atol=1e-3)


def test_closest_point_on_triangles_regions():
    a = np.array([[0.0, 0.0, 0.0]] * 3)
    b = np.array([[1.0, 0.0, 0.0]] * 3)
    c = np.array([[0.0, 1.0, 0.0]] * 3)
    p = np.array([[0.2, 0.2, 1.0], [-1.0, -1.0, 0.0], [0.5, -1.0, 0.0]])

    cp, d2, region = closest_point_on_triangles(p, a, b, c)

    np.testing.assert_allclose(cp, [[0.2, 0.2, 0.0], [0.0, 0.0, 0.0], [0.5, 0.0, 0.0]])
    np.testing.assert_allclose(d2, [1.0, 2.0, 1.0])
    assert region.tolist() == [0, 1, 4]


def test_mesh_closest_point_matches_brute_force():
    mesh = icosphere(2)
    rng = np.random.default_rng(7)
    points = rng.normal(size=(300, 3))
    points *= rng.uniform(0.6, 1.4, size=(300, 1)) / np.linalg.norm(points, axis=1, keepdims=True)

    batch = mesh.project(points)

    tri = mesh.vertices[mesh.faces]
    reps = len(mesh.faces)
    _, d2, _ = closest_point_on_triangles(
        np.repeat(points, reps, axis=0),
        np.tile(tri[:, 0], (len(points), 1)),
        np.tile(tri[:, 1], (len(points), 1)),
        np.tile(tri[:, 2], (len(points), 1)),
    )
    brute = np.sqrt(d2.reshape(len(points), reps).min(axis=1))
    np.testing.assert_allclose(batch.dist, brute, atol=1e-12)


def test_mesh_equidistant_parallel_faces_are_ambiguous():
    vertices = [
        [-1, -1, 1], [1, -1, 1], [0, 1, 1],
        [-1, -1, -1], [1, -1, -1], [0, 1, -1],
    ]
    mesh = TriangleMesh(vertices, [[0, 1, 2], [3, 5, 4]])

    with pytest.raises(AmbiguousClosestPointError):
        closest_point(mesh, [0.0, 0.0, 0.0])


def test_icosphere_closest_points_converge_to_sphere():
    rng = np.random.default_rng(11)
    points = rng.normal(size=(2000, 3))
    points /= np.linalg.norm(points, axis=1, keepdims=True)

    errors = [np.max(np.linalg.norm(icosphere(k).project(points).cp - points, axis=1)) for k in (1, 2, 3, 4)]

    assert all(coarse / fine > 2.5 for coarse, fine in zip(errors, errors[1:]))
    assert errors[-1] < 5e-3


def test_mesh_vertex_shared_by_several_faces_is_not_ambiguous():
    mesh = icosphere(1)
    vertex = mesh.vertices[0]

    res = closest_point(mesh, 1.2 * vertex)

    np.testing.assert_allclose(res.cp, vertex, atol=MESH_TIE_SEPARATION * mesh.scale)
    assert res.dist == pytest.approx(0.2)


def test_mesh_boundary_detection_and_frames():
    mesh = _flat_square()

    assert mesh.is_open
    assert len(mesh.boundary_edges) == 4
    assert sorted(mesh.boundary_loops[0]) == [0, 1, 2, 3]

    res = closest_point(mesh, [0.5, -0.3, 0.2])
    assert res.on_boundary is True
    np.testing.assert_allclose(res.cp, [0.5, 0.0, 0.0])

    frame = boundary_frame(mesh, [0.5, 0.0, 0.0])
    np.testing.assert_allclose(frame.n, [0.0, -1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(np.abs(frame.T), [1.0, 0.0, 0.0], atol=1e-12)


def test_closed_mesh_has_no_boundary():
    mesh = icosphere(1)
    assert not mesh.is_open
    assert mesh.boundary_loops == []


def test_mesh_rejects_degenerate_and_nonmanifold_input():
    with pytest.raises(GeometryError, match="degenerate"):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(MeshFormatError, match="out of range"):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])
    with pytest.raises(MeshFormatError, match="manifold"):
        TriangleMesh(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]],
            [[0, 1, 2], [1, 0, 3], [0, 1, 4]],
        )


def test_load_obj_splits_quads_and_rescales(tmp_path):
    path = tmp_path / "square.obj"
    path.write_text("v 0 0 0\nv 4 0 0\nv 4 4 0\nv 0 4 0\nf 1 2 3 4\n", encoding="utf-8")

    mesh = load_obj(path, rescale=True)

    assert len(mesh.faces) == 2
    assert mesh.scale == pytest.approx(1.0)


def test_load_obj_missing_file_is_mesh_format_error(tmp_path):
    with pytest.raises(MeshFormatError):
        load_obj(tmp_path / "missing.obj")


def test_make_surface_validates_kind_and_parameters():
    assert isinstance(make_surface("sphere", radius=2.0), Sphere)
    with pytest.raises(ConfigurationError, match="Unknown surface kind"):
        make_surface("cube")  # type: ignore[arg-type]
    with pytest.raises(ConfigurationError, match="needs a mesh"):
        make_surface("triangle_mesh")
    with pytest.raises(ConfigurationError):
        make_surface("torus", R=0.3, r=0.4)
