"""Surfaces, closest-point queries, boundary frames and exact geodesic oracles."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
import logging
from pathlib import Path
from typing import ClassVar, Literal

import meshio
import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from app.errors import (
    AmbiguousClosestPointError,
    ConfigurationError,
    GeometryError,
    MeshFormatError,
    NotOnBoundaryError,
    UnsupportedOracleError,
)

logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
SurfaceKind = Literal["sphere", "hemisphere", "disk2d", "torus", "triangle_mesh"]

AMBIGUITY_RTOL = 1e-9
BOUNDARY_TOL = 1e-9
_EPS = float(np.finfo(np.float64).eps)
# Tied mesh candidates closer than this (relative to the mesh scale) are the same point.
MESH_TIE_SEPARATION = 1e3 * _EPS


@dataclass(frozen=True)
class CpResult:
    cp: FloatArray
    dist: float
    on_boundary: bool
    surface_normal: FloatArray


@dataclass(frozen=True)
class CpBatch:
    """Closest-point data for a batch of query points, one row per query."""

    cp: FloatArray
    dist: FloatArray
    on_boundary: NDArray[np.bool_]
    normal: FloatArray

    def __len__(self) -> int:
        return int(self.dist.shape[0])

    def item(self, i: int) -> CpResult:
        return CpResult(
            cp=self.cp[i].copy(),
            dist=float(self.dist[i]),
            on_boundary=bool(self.on_boundary[i]),
            surface_normal=self.normal[i].copy(),
        )


@dataclass(frozen=True)
class BoundaryFrame:
    """Orthonormal frame at boundary points; arrays are (3,) or (M, 3)."""

    T: FloatArray
    N: FloatArray
    n: FloatArray


def as_points(x: ArrayLike) -> FloatArray:
    """Return query points as an (M, 3) float array; planar points get x3 = 0."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise GeometryError(f"Expected points with 2 or 3 coordinates, got shape {arr.shape}.")
    if arr.shape[1] == 2:
        arr = np.column_stack([arr, np.zeros(arr.shape[0])])
    if not np.all(np.isfinite(arr)):
        raise GeometryError("Query points must have finite coordinates.")
    return arr


def _normalize(v: FloatArray) -> FloatArray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / norm


def _raise_ambiguous(points: FloatArray, mask: NDArray[np.bool_], detail: str) -> None:
    if np.any(mask):
        raise AmbiguousClosestPointError(points[int(np.argmax(mask))], detail)


class Surface(ABC):
    kind: ClassVar[SurfaceKind]
    dim: ClassVar[int] = 3
    is_open: bool = False

    @abstractmethod
    def project(self, points: ArrayLike) -> CpBatch:
        """Closest points on the closed surface for a batch of query points."""

    @abstractmethod
    def bounds(self) -> tuple[FloatArray, FloatArray]:
        """Axis-aligned bounding box of the surface."""

    def near(self, points: FloatArray, radius: float) -> NDArray[np.bool_]:
        """Cheap superset of the points within `radius` of the surface."""
        return np.ones(len(points), dtype=bool)

    def mirror(self, points: ArrayLike, batch: CpBatch | None = None) -> CpBatch:
        """Closest points of the reflections 2 cp(x) - x across boundary closest points."""
        pts = as_points(points)
        if batch is None:
            batch = self.project(pts)
        cp = batch.cp.copy()
        dist = batch.dist.copy()
        on_boundary = batch.on_boundary.copy()
        normal = batch.normal.copy()
        rows = np.flatnonzero(batch.on_boundary)
        if rows.size:
            reflected = 2.0 * batch.cp[rows] - pts[rows]
            sub = self.project(reflected)
            cp[rows] = sub.cp
            dist[rows] = sub.dist
            on_boundary[rows] = sub.on_boundary
            normal[rows] = sub.normal
        return CpBatch(cp=cp, dist=dist, on_boundary=on_boundary, normal=normal)

    def boundary_frames(self, points: ArrayLike) -> BoundaryFrame:
        raise NotOnBoundaryError(f"A {self.kind} surface has no boundary.")

    def exact_geodesic(self, x0: ArrayLike, y: ArrayLike) -> FloatArray:
        raise UnsupportedOracleError(f"No exact geodesic oracle for surface kind `{self.kind}`.")

    @property
    def has_oracle(self) -> bool:
        return False

    @property
    def scale(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))


class Sphere(Surface):
    kind = "sphere"

    def __init__(self, center: ArrayLike = (0.0, 0.0, 0.0), radius: float = 1.0) -> None:
        if radius <= 0:
            raise ConfigurationError(f"Sphere radius must be positive, got {radius}.")
        self.center = as_points(center)[0]
        self.radius = float(radius)

    def project(self, points: ArrayLike) -> CpBatch:
        pts = as_points(points)
        v = pts - self.center
        r = np.linalg.norm(v, axis=1)
        _raise_ambiguous(pts, r <= AMBIGUITY_RTOL * self.radius, "Point is at the sphere center.")
        normal = v / r[:, None]
        cp = self.center + self.radius * normal
        return CpBatch(
            cp=cp,
            dist=np.abs(r - self.radius),
            on_boundary=np.zeros(len(pts), dtype=bool),
            normal=normal,
        )

    def bounds(self) -> tuple[FloatArray, FloatArray]:
        return self.center - self.radius, self.center + self.radius

    def near(self, points: FloatArray, radius: float) -> NDArray[np.bool_]:
        return np.abs(np.linalg.norm(points - self.center, axis=1) - self.radius) <= radius

    def exact_geodesic(self, x0: ArrayLike, y: ArrayLike) -> FloatArray:
        a = as_points(x0)[0] - self.center
        b = as_points(y) - self.center
        cos_angle = (b @ a) / (np.linalg.norm(a) * np.linalg.norm(b, axis=1))
        return self.radius * np.arccos(np.clip(cos_angle, -1.0, 1.0))

    @property
    def has_oracle(self) -> bool:
        return True


class Hemisphere(Surface):
    """Upper half (x3 >= center x3) of a sphere, boundary on the equator circle."""

    kind = "hemisphere"
    is_open = True

    def __init__(
        self,
        center: ArrayLike = (0.0, 0.0, 0.0),
        radius: float = 1.0,
        *,
        graph_vertices: int = 200_000,
    ) -> None:
        if radius <= 0:
            raise ConfigurationError(f"Hemisphere radius must be positive, got {radius}.")
        self.center = as_points(center)[0]
        self.radius = float(radius)
        self.graph_vertices = int(graph_vertices)

    def project(self, points: ArrayLike) -> CpBatch:
        pts = as_points(points)
        v = pts - self.center
        upper = v[:, 2] >= 0.0
        cp = np.empty_like(pts)
        r = np.linalg.norm(v, axis=1)
        _raise_ambiguous(pts, upper & (r <= AMBIGUITY_RTOL * self.radius), "Point is at the sphere center.")
        cp[upper] = self.center + self.radius * v[upper] / r[upper, None]

        lower = ~upper
        rho = np.linalg.norm(v[:, :2], axis=1)
        _raise_ambiguous(
            pts,
            lower & (rho <= AMBIGUITY_RTOL * self.radius),
            "Point lies on the axis below the equator.",
        )
        ring = np.zeros((int(lower.sum()), 3))
        ring[:, :2] = self.radius * v[lower, :2] / rho[lower, None]
        cp[lower] = self.center + ring

        on_boundary = lower | (cp[:, 2] - self.center[2] <= BOUNDARY_TOL * self.radius)
        return CpBatch(
            cp=cp,
            dist=np.linalg.norm(pts - cp, axis=1),
            on_boundary=on_boundary,
            normal=(cp - self.center) / self.radius,
        )

    def bounds(self) -> tuple[FloatArray, FloatArray]:
        lo = self.center - self.radius
        lo[2] = self.center[2]
        return lo, self.center + self.radius

    def near(self, points: FloatArray, radius: float) -> NDArray[np.bool_]:
        return np.abs(np.linalg.norm(points - self.center, axis=1) - self.radius) <= radius

    def boundary_frames(self, points: ArrayLike) -> BoundaryFrame:
        y = as_points(points)
        v = y - self.center
        off = (np.abs(v[:, 2]) > BOUNDARY_TOL * self.radius) | (
            np.abs(np.linalg.norm(v, axis=1) - self.radius) > BOUNDARY_TOL * self.radius
        )
        if np.any(off):
            raise NotOnBoundaryError(f"Point {y[int(np.argmax(off))]} is not on the hemisphere equator.")
        N = _normalize(v)
        n = np.tile([0.0, 0.0, -1.0], (len(y), 1))
        return BoundaryFrame(T=np.cross(N, n), N=N, n=n)

    def exact_geodesic(
        self,
        x0: ArrayLike,
        y: ArrayLike,
        method: Literal["arc", "graph"] = "arc",
    ) -> FloatArray:
        # Minor great-circle arcs between points of the closed upper half never dip below the
        # equator, so the arc length is the intrinsic distance.
        if method == "graph":
            return hemisphere_graph_distance(self, x0, y, n_vertices=self.graph_vertices)
        a = as_points(x0)[0] - self.center
        b = as_points(y) - self.center
        cos_angle = (b @ a) / (np.linalg.norm(a) * np.linalg.norm(b, axis=1))
        return self.radius * np.arccos(np.clip(cos_angle, -1.0, 1.0))

    @property
    def has_oracle(self) -> bool:
        return True


def hemisphere_graph_distance(
    surface: Hemisphere,
    x0: ArrayLike,
    y: ArrayLike,
    *,
    n_vertices: int = 200_000,
) -> FloatArray:
    """Shortest paths over a latitude-longitude triangulation of the closed upper hemisphere.

    Edges join ring and meridian neighbours plus both cell diagonals, weighted by chord length.
    Endpoints snap to their nearest graph vertices.
    """
    n_theta = max(4, int(round(np.sqrt(n_vertices / 3.2))))
    n_phi = max(8, int(round((n_vertices - 1) / n_theta)))
    theta = np.arange(1, n_theta + 1) * (0.5 * np.pi / n_theta)
    phi = np.arange(n_phi) * (2.0 * np.pi / n_phi)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    ring_pts = np.stack(
        [np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1
    ).reshape(-1, 3)
    verts = surface.center + surface.radius * np.vstack([[0.0, 0.0, 1.0], ring_pts])

    def vid(i: NDArray[np.int64], j: NDArray[np.int64]) -> NDArray[np.int64]:
        return 1 + i * n_phi + (j % n_phi)

    ii, jj = np.meshgrid(np.arange(n_theta), np.arange(n_phi), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    inner = ii < n_theta - 1
    src = [np.zeros(n_phi, dtype=np.int64), vid(ii, jj)]
    dst = [vid(np.zeros(n_phi, dtype=np.int64), np.arange(n_phi)), vid(ii, jj + 1)]
    src += [vid(ii[inner], jj[inner]), vid(ii[inner], jj[inner]), vid(ii[inner], jj[inner] + 1)]
    dst += [vid(ii[inner] + 1, jj[inner]), vid(ii[inner] + 1, jj[inner] + 1), vid(ii[inner] + 1, jj[inner])]
    rows = np.concatenate(src)
    cols = np.concatenate(dst)
    weights = np.linalg.norm(verts[rows] - verts[cols], axis=1)
    graph = coo_matrix((weights, (rows, cols)), shape=(len(verts), len(verts))).tocsr()

    tree = cKDTree(verts)
    _, start = tree.query(as_points(x0)[0])
    _, targets = tree.query(as_points(y))
    distances = dijkstra(graph, directed=False, indices=int(start))
    return distances[np.asarray(targets)]


class Disk2d(Surface):
    """Planar disk in the x3 = 0 plane, treated as a two-dimensional domain."""

    kind = "disk2d"
    dim = 2
    is_open = True

    def __init__(self, center: ArrayLike = (0.0, 0.0), radius: float = 1.0) -> None:
        if radius <= 0:
            raise ConfigurationError(f"Disk radius must be positive, got {radius}.")
        c = as_points(center)[0]
        c[2] = 0.0
        self.center = c
        self.radius = float(radius)

    def project(self, points: ArrayLike) -> CpBatch:
        pts = as_points(points)
        v = pts[:, :2] - self.center[:2]
        rho = np.linalg.norm(v, axis=1)
        outside = rho > self.radius
        cp = np.column_stack([pts[:, :2], np.zeros(len(pts))])
        cp[outside, :2] = self.center[:2] + self.radius * v[outside] / rho[outside, None]
        on_boundary = outside | (rho >= self.radius * (1.0 - BOUNDARY_TOL))
        normal = np.tile([0.0, 0.0, 1.0], (len(pts), 1))
        return CpBatch(
            cp=cp,
            dist=np.linalg.norm(pts - cp, axis=1),
            on_boundary=on_boundary,
            normal=normal,
        )

    def bounds(self) -> tuple[FloatArray, FloatArray]:
        r = np.array([self.radius, self.radius, 0.0])
        return self.center - r, self.center + r

    def boundary_frames(self, points: ArrayLike) -> BoundaryFrame:
        y = as_points(points)
        v = y - self.center
        v[:, 2] = 0.0
        off = np.abs(np.linalg.norm(v, axis=1) - self.radius) > BOUNDARY_TOL * self.radius
        if np.any(off):
            raise NotOnBoundaryError(f"Point {y[int(np.argmax(off))]} is not on the disk rim.")
        n = _normalize(v)
        N = np.tile([0.0, 0.0, 1.0], (len(y), 1))
        return BoundaryFrame(T=np.cross(N, n), N=N, n=n)

    def exact_geodesic(self, x0: ArrayLike, y: ArrayLike) -> FloatArray:
        return np.linalg.norm(as_points(y) - as_points(x0)[0], axis=1)

    @property
    def has_oracle(self) -> bool:
        return True


class Torus(Surface):
    """Torus around the x3 axis with major radius R and tube radius r."""

    kind = "torus"

    def __init__(self, center: ArrayLike = (0.0, 0.0, 0.0), R: float = 1.0, r: float = 0.4) -> None:
        if R <= 0 or r <= 0:
            raise ConfigurationError(f"Torus radii must be positive, got R={R}, r={r}.")
        if r >= R:
            raise ConfigurationError(f"Torus tube radius must be below the major radius, got R={R}, r={r}.")
        self.center = as_points(center)[0]
        self.R = float(R)
        self.r = float(r)

    def project(self, points: ArrayLike) -> CpBatch:
        pts = as_points(points)
        v = pts - self.center
        rho = np.linalg.norm(v[:, :2], axis=1)
        _raise_ambiguous(pts, rho <= AMBIGUITY_RTOL * self.R, "Point lies on the torus axis.")
        ring = np.zeros_like(v)
        ring[:, :2] = self.R * v[:, :2] / rho[:, None]
        w = v - ring
        wn = np.linalg.norm(w, axis=1)
        _raise_ambiguous(pts, wn <= AMBIGUITY_RTOL * self.r, "Point lies on the tube core circle.")
        normal = w / wn[:, None]
        return CpBatch(
            cp=self.center + ring + self.r * normal,
            dist=np.abs(wn - self.r),
            on_boundary=np.zeros(len(pts), dtype=bool),
            normal=normal,
        )

    def bounds(self) -> tuple[FloatArray, FloatArray]:
        ext = np.array([self.R + self.r, self.R + self.r, self.r])
        return self.center - ext, self.center + ext

    def near(self, points: FloatArray, radius: float) -> NDArray[np.bool_]:
        v = points - self.center
        core = np.hypot(np.linalg.norm(v[:, :2], axis=1) - self.R, v[:, 2])
        return np.abs(core - self.r) <= radius


def closest_point_on_triangles(
    p: FloatArray,
    a: FloatArray,
    b: FloatArray,
    c: FloatArray,
) -> tuple[FloatArray, FloatArray, NDArray[np.int8]]:
    """Closest points of p[k] on triangles (a[k], b[k], c[k]).

    Returns the closest points, squared distances and a region code: 0 face interior,
    1/2/3 vertex a/b/c, 4/5/6 edge ab/bc/ca.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    bp = p - b
    cp_ = p - c
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    d5 = np.einsum("ij,ij->i", ab, cp_)
    d6 = np.einsum("ij,ij->i", ac, cp_)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    in_c = (d6 >= 0) & (d5 <= d6)
    in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    in_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    region = np.select([in_a, in_b, in_ab, in_c, in_ac, in_bc], [1, 2, 4, 3, 6, 5], default=0).astype(np.int8)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_face = vb * denom
        w_face = vc * denom

    out = a + ab * v_face[:, None] + ac * w_face[:, None]
    out = np.where((region == 1)[:, None], a, out)
    out = np.where((region == 2)[:, None], b, out)
    out = np.where((region == 3)[:, None], c, out)
    out = np.where((region == 4)[:, None], a + ab * t_ab[:, None], out)
    out = np.where((region == 5)[:, None], b + (c - b) * t_bc[:, None], out)
    out = np.where((region == 6)[:, None], a + ac * t_ac[:, None], out)
    diff = p - out
    return out, np.einsum("ij,ij->i", diff, diff), region


class TriangleMesh(Surface):
    """Triangulated surface with an axis-aligned bounding-box hierarchy for closest points."""

    kind = "triangle_mesh"

    def __init__(
        self,
        vertices: ArrayLike,
        faces: ArrayLike,
        *,
        smooth_normals: bool = False,
        leaf_size: int = 8,
    ) -> None:
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshFormatError(f"Mesh vertices must be (V, 3), got {self.vertices.shape}.")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3 or len(self.faces) == 0:
            raise MeshFormatError(f"Mesh faces must be a non-empty (F, 3) array, got {self.faces.shape}.")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise MeshFormatError("Mesh faces reference vertices out of range.")
        self.smooth_normals = smooth_normals

        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        cross = np.cross(b - a, c - a)
        area2 = np.linalg.norm(cross, axis=1)
        lo, hi = self.bounds()
        self._scale = float(np.linalg.norm(hi - lo))
        slivers = area2 <= (_EPS * self._scale) ** 2
        if np.any(slivers):
            raise GeometryError(f"Mesh has {int(slivers.sum())} degenerate faces; first is face {int(np.argmax(slivers))}.")
        self.face_normals = cross / area2[:, None]
        self.centroids = (a + b + c) / 3.0
        self.vertex_normals = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(self.vertex_normals, self.faces[:, k], cross)
        self.vertex_normals = _normalize(self.vertex_normals)

        self._find_boundary()
        self._build_bvh(leaf_size)
        self._vertex_tree = cKDTree(self.vertices)
        logger.debug(
            "Mesh with %d vertices, %d faces, %d boundary edges, %d hierarchy nodes",
            len(self.vertices),
            len(self.faces),
            len(self.boundary_edges),
            len(self._node_lo),
        )

    def _find_boundary(self) -> None:
        local = np.array([[0, 1], [1, 2], [2, 0]])
        directed = self.faces[:, local].reshape(-1, 2)
        keys = np.sort(directed, axis=1)
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        degree = counts[inverse.ravel()]
        if np.any(degree > 2):
            raise MeshFormatError("Mesh is not a manifold: an edge has more than two faces.")
        on_rim = degree == 1
        self._edge_on_boundary = on_rim.reshape(-1, 3)
        self.boundary_edges = directed[on_rim]
        self._vertex_on_boundary = np.zeros(len(self.vertices), dtype=bool)
        self._vertex_on_boundary[self.boundary_edges.ravel()] = True
        tangent = np.zeros_like(self.vertices)
        if len(self.boundary_edges):
            direction = _normalize(self.vertices[self.boundary_edges[:, 1]] - self.vertices[self.boundary_edges[:, 0]])
            np.add.at(tangent, self.boundary_edges[:, 0], direction)
            np.add.at(tangent, self.boundary_edges[:, 1], direction)
        self._vertex_tangent = tangent
        self.is_open = bool(len(self.boundary_edges))

    @property
    def boundary_loops(self) -> list[list[int]]:
        """Boundary vertex loops, following the face winding of the boundary edges."""
        successor = {int(u): int(v) for u, v in self.boundary_edges}
        loops: list[list[int]] = []
        seen: set[int] = set()
        for start in successor:
            if start in seen:
                continue
            loop = [start]
            seen.add(start)
            nxt = successor.get(start)
            while nxt is not None and nxt != start and nxt not in seen:
                loop.append(nxt)
                seen.add(nxt)
                nxt = successor.get(nxt)
            loops.append(loop)
        return loops

    def _build_bvh(self, leaf_size: int) -> None:
        tri = self.vertices[self.faces]
        tri_lo = tri.min(axis=1)
        tri_hi = tri.max(axis=1)
        order = np.arange(len(self.faces))
        node_lo: list[FloatArray] = []
        node_hi: list[FloatArray] = []
        left: list[int] = []
        right: list[int] = []
        start: list[int] = []
        count: list[int] = []

        def new_node(s: int, e: int) -> int:
            idx = order[s:e]
            node_lo.append(tri_lo[idx].min(axis=0))
            node_hi.append(tri_hi[idx].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(0)
            return len(node_lo) - 1

        stack = [(new_node(0, len(order)), 0, len(order))]
        while stack:
            node, s, e = stack.pop()
            if e - s <= leaf_size:
                count[node] = e - s
                continue
            idx = order[s:e]
            cen = self.centroids[idx]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            mid = (s + e) // 2
            order[s:e] = idx[np.argpartition(cen[:, axis], mid - s)]
            lnode = new_node(s, mid)
            rnode = new_node(mid, e)
            left[node] = lnode
            right[node] = rnode
            stack.append((lnode, s, mid))
            stack.append((rnode, mid, e))

        self._order = order
        self._node_lo = np.array(node_lo)
        self._node_hi = np.array(node_hi)
        self._left = np.array(left, dtype=np.int64)
        self._right = np.array(right, dtype=np.int64)
        self._start = np.array(start, dtype=np.int64)
        self._count = np.array(count, dtype=np.int64)

    def _query(self, pts: FloatArray) -> tuple[FloatArray, FloatArray, NDArray[np.int64], NDArray[np.int8]]:
        """Batched hierarchy descent; returns cp, squared distance, face and region per point."""
        m = len(pts)
        upper, _ = self._vertex_tree.query(pts)
        ub2 = upper**2
        slack = (MESH_TIE_SEPARATION * self._scale) ** 2
        q = np.arange(m)
        nodes = np.zeros(m, dtype=np.int64)
        found_q, found_t, found_cp, found_d2, found_region = [], [], [], [], []
        while q.size:
            p = pts[q]
            gap = np.maximum(self._node_lo[nodes] - p, 0.0) + np.maximum(p - self._node_hi[nodes], 0.0)
            keep = np.einsum("ij,ij->i", gap, gap) <= ub2[q] * (1.0 + 1e-8) + slack
            q, nodes = q[keep], nodes[keep]
            leaf = self._count[nodes] > 0
            if np.any(leaf):
                counts = self._count[nodes[leaf]]
                offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
                rep_q = np.repeat(q[leaf], counts)
                tris = self._order[np.repeat(self._start[nodes[leaf]], counts) + offsets]
                f = self.faces[tris]
                cp, d2, region = closest_point_on_triangles(
                    pts[rep_q], self.vertices[f[:, 0]], self.vertices[f[:, 1]], self.vertices[f[:, 2]]
                )
                np.minimum.at(ub2, rep_q, d2)
                found_q.append(rep_q)
                found_t.append(tris)
                found_cp.append(cp)
                found_d2.append(d2)
                found_region.append(region)
            inner = ~leaf
            q = np.concatenate([q[inner], q[inner]])
            nodes = np.concatenate([self._left[nodes[inner]], self._right[nodes[inner]]])

        cand_q = np.concatenate(found_q)
        cand_t = np.concatenate(found_t)
        cand_cp = np.concatenate(found_cp)
        cand_d2 = np.concatenate(found_d2)
        cand_region = np.concatenate(found_region)
        ranked = np.lexsort((cand_d2, cand_q))
        first = ranked[np.unique(cand_q[ranked], return_index=True)[1]]
        best_cp = cand_cp[first]
        best_d = np.sqrt(cand_d2[first])

        dist = np.sqrt(cand_d2)
        tie = dist <= best_d[cand_q] * (1.0 + AMBIGUITY_RTOL) + np.sqrt(slack)
        apart = np.linalg.norm(cand_cp - best_cp[cand_q], axis=1) > MESH_TIE_SEPARATION * self._scale
        clash = np.zeros(m, dtype=bool)
        clash[cand_q[tie & apart]] = True
        _raise_ambiguous(pts, clash, "Two mesh faces give equally close points.")
        return best_cp, best_d, cand_t[first], cand_region[first]

    def _on_boundary(self, tris: NDArray[np.int64], region: NDArray[np.int8]) -> NDArray[np.bool_]:
        flags = np.zeros(len(tris), dtype=bool)
        edge = region >= 4
        flags[edge] = self._edge_on_boundary[tris[edge], region[edge] - 4]
        vert = (region >= 1) & (region <= 3)
        flags[vert] = self._vertex_on_boundary[self.faces[tris[vert], region[vert] - 1]]
        return flags

    def _normals(self, cp: FloatArray, tris: NDArray[np.int64]) -> FloatArray:
        if not self.smooth_normals:
            return self.face_normals[tris]
        f = self.faces[tris]
        a, b, c = (self.vertices[f[:, k]] for k in range(3))
        total = np.linalg.norm(np.cross(b - a, c - a), axis=1)
        wa = np.linalg.norm(np.cross(b - cp, c - cp), axis=1) / total
        wb = np.linalg.norm(np.cross(c - cp, a - cp), axis=1) / total
        wc = 1.0 - wa - wb
        vn = self.vertex_normals
        return _normalize(wa[:, None] * vn[f[:, 0]] + wb[:, None] * vn[f[:, 1]] + wc[:, None] * vn[f[:, 2]])

    def project(self, points: ArrayLike) -> CpBatch:
        pts = as_points(points)
        cp, dist, tris, region = self._query(pts)
        return CpBatch(cp=cp, dist=dist, on_boundary=self._on_boundary(tris, region), normal=self._normals(cp, tris))

    def bounds(self) -> tuple[FloatArray, FloatArray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def scale(self) -> float:
        return self._scale

    def near(self, points: FloatArray, radius: float) -> NDArray[np.bool_]:
        # Every surface point lies within the longest edge of some vertex.
        f = self.faces
        edges = self.vertices[f[:, [1, 2, 0]]] - self.vertices[f]
        reach = float(np.linalg.norm(edges, axis=2).max())
        d, _ = self._vertex_tree.query(points, distance_upper_bound=radius + reach)
        return np.isfinite(d)

    def boundary_frames(self, points: ArrayLike) -> BoundaryFrame:
        y = as_points(points)
        cp, dist, tris, region = self._query(y)
        on_rim = self._on_boundary(tris, region) & (dist <= BOUNDARY_TOL * self._scale)
        if not np.all(on_rim):
            raise NotOnBoundaryError(f"Point {y[int(np.argmin(on_rim))]} is not on the mesh boundary.")
        f = self.faces[tris]
        T = np.empty_like(y)
        edge = region >= 4
        local = region[edge] - 4
        tail = f[edge, local]
        head = f[edge, (local + 1) % 3]
        T[edge] = self.vertices[head] - self.vertices[tail]
        vert = ~edge
        T[vert] = self._vertex_tangent[f[vert, region[vert] - 1]]
        N = self._normals(cp, tris)
        T = _normalize(T - np.einsum("ij,ij->i", T, N)[:, None] * N)
        n = np.cross(T, N)
        inward = np.einsum("ij,ij->i", n, cp - self.centroids[tris]) < 0
        T[inward] *= -1.0
        n[inward] *= -1.0
        return BoundaryFrame(T=T, N=N, n=n)


def load_obj(path: str | Path, *, rescale: bool = False, smooth_normals: bool = False) -> TriangleMesh:
    """Read a triangulated OBJ file; quads are split, other polygons are rejected."""
    path = Path(path)
    try:
        mesh = meshio.read(path, file_format="obj")
    except (OSError, ValueError, meshio.ReadError) as exc:
        raise MeshFormatError(f"Could not read mesh `{path}`: {exc}") from exc
    blocks = []
    for block in mesh.cells:
        if block.type == "triangle":
            blocks.append(block.data)
        elif block.type == "quad":
            quads = block.data
            blocks.append(np.vstack([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]]))
        else:
            raise MeshFormatError(f"Mesh `{path}` contains unsupported `{block.type}` cells.")
    if not blocks:
        raise MeshFormatError(f"Mesh `{path}` has no triangles.")
    vertices = np.asarray(mesh.points, dtype=np.float64)[:, :3]
    if rescale:
        lo, hi = vertices.min(axis=0), vertices.max(axis=0)
        mid = 0.5 * (lo + hi)
        vertices = mid + (vertices - mid) / np.linalg.norm(hi - lo)
    logger.info("Loaded mesh %s with %d vertices", path, len(vertices))
    return TriangleMesh(vertices, np.vstack(blocks), smooth_normals=smooth_normals)


def icosphere(subdivisions: int = 2, radius: float = 1.0, center: ArrayLike = (0.0, 0.0, 0.0)) -> TriangleMesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts = _normalize(verts)
    for _ in range(subdivisions):
        edges = np.sort(faces[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1)
        unique, inverse = np.unique(edges, axis=0, return_inverse=True)
        mids = _normalize(0.5 * (verts[unique[:, 0]] + verts[unique[:, 1]]))
        e = (inverse.ravel() + len(verts)).reshape(-1, 3)
        verts = np.vstack([verts, mids])
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        ab, bc, ca = e[:, 0], e[:, 1], e[:, 2]
        faces = np.vstack(
            [
                np.column_stack([a, ab, ca]),
                np.column_stack([b, bc, ab]),
                np.column_stack([c, ca, bc]),
                np.column_stack([ab, bc, ca]),
            ]
        )
    return TriangleMesh(as_points(center)[0] + radius * verts, faces)


def make_surface(kind: SurfaceKind, **params: object) -> Surface:
    """Build a surface from its kind name and keyword parameters."""
    factories = {
        "sphere": Sphere,
        "hemisphere": Hemisphere,
        "disk2d": Disk2d,
        "torus": Torus,
    }
    if kind == "triangle_mesh":
        path = params.pop("path", None)
        if path is None:
            raise ConfigurationError("A triangle_mesh surface needs a mesh `path`.")
        return load_obj(path, **params)  # type: ignore[arg-type]
    try:
        factory = factories[kind]
    except KeyError as exc:
        raise ConfigurationError(f"Unknown surface kind `{kind}`.") from exc
    try:
        return factory(**params)  # type: ignore[arg-type]
    except TypeError as exc:
        raise ConfigurationError(f"Invalid parameters for {kind}: {exc}") from exc


def closest_point(surface: Surface, x: ArrayLike) -> CpResult:
    return surface.project(x).item(0)


def mirror_closest_point(surface: Surface, x: ArrayLike) -> CpResult:
    return surface.mirror(x).item(0)


def boundary_frame(surface: Surface, y: ArrayLike) -> BoundaryFrame:
    frames = surface.boundary_frames(y)
    return BoundaryFrame(T=frames.T[0], N=frames.N[0], n=frames.n[0])


def exact_geodesic(surface: Surface, x0: ArrayLike, y: ArrayLike) -> float:
    return float(surface.exact_geodesic(x0, y)[0])
