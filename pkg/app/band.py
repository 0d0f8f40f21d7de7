"""Narrow-band Cartesian grid around a surface."""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
import time
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from app.errors import ConfigurationError
from app.geometry import CpBatch, CpResult, FloatArray, Surface

logger = logging.getLogger(__name__)

IndexArray = NDArray[np.int64]

_SLAB_NODES = 1 << 21


def bandwidth(dim: int, q: int, dx: float) -> float:
    if dim not in (2, 3):
        raise ConfigurationError(f"Grid dimension must be 2 or 3, got {dim}.")
    if q < 1:
        raise ConfigurationError(f"Interpolation degree must be at least 1, got {q}.")
    if dx <= 0:
        raise ConfigurationError(f"Grid spacing must be positive, got {dx}.")
    half = (q + 1) / 2
    return dx * math.sqrt((dim - 1) * half**2 + (1 + half) ** 2)


@dataclass(frozen=True)
class GridSpec:
    dim: int
    origin: tuple[float, float, float]
    dx: float
    extent: tuple[int, int, int]

    def __post_init__(self) -> None:
        if self.dim not in (2, 3):
            raise ConfigurationError(f"Grid dimension must be 2 or 3, got {self.dim}.")
        if self.dx <= 0:
            raise ConfigurationError(f"Grid spacing must be positive, got {self.dx}.")
        if any(e < 1 for e in self.extent) or (self.dim == 2 and self.extent[2] != 1):
            raise ConfigurationError(f"Invalid grid extent {self.extent} for dim={self.dim}.")

    @classmethod
    def around(cls, surface: Surface, dx: float, q: int = 3) -> GridSpec:
        """Grid covering the surface plus the band and one interpolation stencil of margin.

        Nodes sit on the lattice dx * (k + 1/pi) along each active axis.
        """
        dim = surface.dim
        pad = bandwidth(dim, q, dx) + (q + 2) * dx
        lo, hi = surface.bounds()
        origin = [float(lo[2])] * 3
        extent = [1, 1, 1]
        for k in range(dim):
            origin[k] = dx * (math.floor((lo[k] - pad) / dx) + 1.0 / math.pi)
            extent[k] = int(math.ceil((hi[k] + pad - origin[k]) / dx)) + 1
        return cls(dim=dim, origin=(origin[0], origin[1], origin[2]), dx=float(dx), extent=(extent[0], extent[1], extent[2]))

    @property
    def size(self) -> int:
        return int(np.prod(self.extent))

    def position(self, multi_index: ArrayLike) -> FloatArray:
        return np.asarray(self.origin) + np.asarray(multi_index, dtype=np.float64) * self.dx

    def linear(self, multi_index: ArrayLike) -> IndexArray:
        mi = np.asarray(multi_index, dtype=np.int64)
        return (mi[..., 0] * self.extent[1] + mi[..., 1]) * self.extent[2] + mi[..., 2]

    def contains(self, multi_index: ArrayLike) -> NDArray[np.bool_]:
        mi = np.asarray(multi_index, dtype=np.int64)
        return np.all((mi >= 0) & (mi < np.asarray(self.extent)), axis=-1)


@dataclass(frozen=True)
class BandPoint:
    multi_index: tuple[int, int, int]
    position: FloatArray
    cp: CpResult
    cp_mirror: CpResult
    is_ghost: bool
    layer: Literal["inner", "outer"]


@dataclass(frozen=True, eq=False)
class Band:
    """Band points in lexicographic multi-index order with cached closest points."""

    grid: GridSpec
    bandwidth: float
    multi_index: IndexArray
    linear_index: IndexArray
    position: FloatArray
    cp: CpBatch
    cp_mirror: CpBatch
    inner: NDArray[np.bool_]

    def __len__(self) -> int:
        return int(self.linear_index.shape[0])

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def dx(self) -> float:
        return self.grid.dx

    @property
    def is_ghost(self) -> NDArray[np.bool_]:
        return self.cp.on_boundary

    def lookup(self, multi_index: ArrayLike) -> IndexArray:
        """Band index of each multi-index, -1 where the node is not in the band."""
        mi = np.asarray(multi_index, dtype=np.int64)
        valid = self.grid.contains(mi)
        lin = self.grid.linear(np.where(valid[..., None], mi, 0))
        pos = np.minimum(np.searchsorted(self.linear_index, lin), len(self) - 1)
        hit = valid & (self.linear_index[pos] == lin)
        return np.where(hit, pos, -1)

    @property
    def index_map(self) -> dict[tuple[int, int, int], int]:
        return {tuple(int(v) for v in mi): i for i, mi in enumerate(self.multi_index)}

    def point(self, i: int) -> BandPoint:
        return BandPoint(
            multi_index=tuple(int(v) for v in self.multi_index[i]),
            position=self.position[i].copy(),
            cp=self.cp.item(i),
            cp_mirror=self.cp_mirror.item(i),
            is_ghost=bool(self.cp.on_boundary[i]),
            layer="inner" if self.inner[i] else "outer",
        )


def axis_offsets(dim: int) -> IndexArray:
    """Unit offsets +e_k and -e_k for the active axes, shape (2 * dim, 3)."""
    eye = np.eye(3, dtype=np.int64)[:dim]
    return np.concatenate([eye, -eye])


def build_band(surface: Surface, grid: GridSpec, p: int, q: int) -> Band:
    if grid.dim != surface.dim:
        raise ConfigurationError(f"Grid dimension {grid.dim} does not match surface dimension {surface.dim}.")
    if not 1 <= p <= q:
        raise ConfigurationError(f"Interpolation degrees must satisfy 1 <= p <= q, got p={p}, q={q}.")
    started = time.perf_counter()
    bw = bandwidth(grid.dim, q, grid.dx)
    nx, ny, nz = grid.extent
    rows_per_slab = max(1, _SLAB_NODES // (ny * nz))
    jj, kk = np.meshgrid(np.arange(ny), np.arange(nz), indexing="ij")
    plane = np.column_stack([jj.ravel(), kk.ravel()])

    kept_index: list[IndexArray] = []
    kept_cp: list[CpBatch] = []
    for i0 in range(0, nx, rows_per_slab):
        i1 = min(nx, i0 + rows_per_slab)
        rows = np.repeat(np.arange(i0, i1), len(plane))
        mi = np.column_stack([rows, np.tile(plane, (i1 - i0, 1))])
        pts = grid.position(mi)
        near = surface.near(pts, bw)
        if not np.any(near):
            continue
        mi, pts = mi[near], pts[near]
        batch = surface.project(pts)
        inside = batch.dist <= bw
        if not np.any(inside):
            continue
        kept_index.append(mi[inside])
        kept_cp.append(
            CpBatch(
                cp=batch.cp[inside],
                dist=batch.dist[inside],
                on_boundary=batch.on_boundary[inside],
                normal=batch.normal[inside],
            )
        )
    if not kept_index:
        raise ConfigurationError(f"Band is empty: no grid node within {bw:.6g} of the {surface.kind} surface.")

    multi_index = np.concatenate(kept_index)
    position = grid.position(multi_index)
    cp = CpBatch(
        cp=np.concatenate([b.cp for b in kept_cp]),
        dist=np.concatenate([b.dist for b in kept_cp]),
        on_boundary=np.concatenate([b.on_boundary for b in kept_cp]),
        normal=np.concatenate([b.normal for b in kept_cp]),
    )
    edge = (multi_index[:, : grid.dim] == 0) | (multi_index[:, : grid.dim] == np.asarray(grid.extent[: grid.dim]) - 1)
    if np.any(edge):
        raise ConfigurationError("Grid extent is too small: band points touch the grid edge.")
    cp_mirror = surface.mirror(position, cp)

    band = Band(
        grid=grid,
        bandwidth=bw,
        multi_index=multi_index,
        linear_index=grid.linear(multi_index),
        position=position,
        cp=cp,
        cp_mirror=cp_mirror,
        inner=np.ones(len(multi_index), dtype=bool),
    )
    neighbours = band.lookup(multi_index[:, None, :] + axis_offsets(grid.dim)[None, :, :])
    inner = np.all(neighbours >= 0, axis=1)
    band = Band(
        grid=grid,
        bandwidth=bw,
        multi_index=multi_index,
        linear_index=band.linear_index,
        position=position,
        cp=cp,
        cp_mirror=cp_mirror,
        inner=inner,
    )
    logger.info(
        "Band for %s at dx=%g: N=%d (inner=%d, ghost=%d, bandwidth=%.5g) in %.2fs",
        surface.kind,
        grid.dx,
        len(band),
        int(inner.sum()),
        int(cp.on_boundary.sum()),
        bw,
        time.perf_counter() - started,
    )
    return band


def build_band_for(surface: Surface, dx: float, p: int = 1, q: int = 3) -> Band:
    return build_band(surface, GridSpec.around(surface, dx, q), p, q)
