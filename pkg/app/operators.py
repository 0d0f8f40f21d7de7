"""Sparse finite-difference, extension and boundary operators on a band."""

from __future__ import annotations

from dataclasses import dataclass
import itertools
import logging
from pathlib import Path
import time
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
import scipy.sparse as sp

from app.band import Band, GridSpec, IndexArray, axis_offsets
from app.errors import BandClosureError
from app.geometry import FloatArray, Surface

logger = logging.getLogger(__name__)

SparseOperator = sp.csr_matrix
ExtensionTargets = Literal["standard", "mirror"]

_ROW_CHUNK = 1 << 16


@dataclass(frozen=True)
class StencilWeights:
    """Lower cube corner and per-axis Lagrange weights for each target."""

    base: IndexArray
    weights: FloatArray

    @property
    def order(self) -> int:
        return self.weights.shape[2] - 1


def lagrange_weights(local: FloatArray, order: int) -> FloatArray:
    """Weights of the degree-`order` Lagrange basis on nodes 0..order evaluated at `local`."""
    nodes = np.arange(order + 1, dtype=np.float64)
    out = np.ones(local.shape + (order + 1,))
    for m in range(order + 1):
        for j in range(order + 1):
            if j != m:
                out[..., m] *= (local - nodes[j]) / (nodes[m] - nodes[j])
    return out


def stencil_weights(grid: GridSpec, targets: ArrayLike, order: int) -> StencilWeights:
    """The target sits in the central cell of its (order + 1)-wide cube along each active axis."""
    pts = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    s = (pts[:, : grid.dim] - np.asarray(grid.origin[: grid.dim])) / grid.dx
    base = np.zeros((len(pts), 3), dtype=np.int64)
    base[:, : grid.dim] = np.floor(s).astype(np.int64) - (order - 1) // 2
    local = s - base[:, : grid.dim]
    return StencilWeights(base=base, weights=lagrange_weights(local, order))


def _cube_offsets(dim: int, order: int) -> IndexArray:
    cube = np.array(list(itertools.product(range(order + 1), repeat=dim)), dtype=np.int64)
    offsets = np.zeros((len(cube), 3), dtype=np.int64)
    offsets[:, :dim] = cube
    return offsets


def interpolation_matrix(band: Band, targets: ArrayLike, order: int) -> SparseOperator:
    """Rows of tensor-product Lagrange weights interpolating band values at `targets`."""
    pts = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    dim = band.dim
    offsets = _cube_offsets(dim, order)
    width = len(offsets)
    rows_out, cols_out, vals_out = [], [], []
    for r0 in range(0, len(pts), _ROW_CHUNK):
        chunk = pts[r0 : r0 + _ROW_CHUNK]
        stencil = stencil_weights(band.grid, chunk, order)
        nodes = stencil.base[:, None, :] + offsets[None, :, :]
        cols = band.lookup(nodes)
        missing = cols < 0
        if np.any(missing):
            row = int(np.argmax(missing.any(axis=1)))
            raise BandClosureError(
                f"Interpolation stencil of degree {order} at target {chunk[row]} leaves the band."
            )
        vals = np.ones((len(chunk), width))
        for k in range(dim):
            vals *= stencil.weights[:, k, offsets[:, k]]
        rows_out.append(np.repeat(np.arange(r0, r0 + len(chunk)), width))
        cols_out.append(cols.ravel())
        vals_out.append(vals.ravel())
    return sp.csr_matrix(
        (np.concatenate(vals_out), (np.concatenate(rows_out), np.concatenate(cols_out))),
        shape=(len(pts), len(band)),
    )


def assemble_extension(band: Band, order: int, targets: ExtensionTargets = "standard") -> SparseOperator:
    if targets == "standard":
        points = band.cp.cp
    elif targets == "mirror":
        points = band.cp_mirror.cp
    else:
        raise ValueError(f"Unknown extension targets `{targets}`.")
    return interpolation_matrix(band, points, order)


def _neighbours(band: Band) -> IndexArray:
    """Band indices of the +e_k then -e_k neighbours, -1 where absent; shape (N, 2 * dim)."""
    return band.lookup(band.multi_index[:, None, :] + axis_offsets(band.dim)[None, :, :])


def _inner_rows(band: Band) -> tuple[IndexArray, IndexArray]:
    rows = np.flatnonzero(band.inner)
    nb = _neighbours(band)[rows]
    if np.any(nb < 0):
        raise BandClosureError("An inner band point is missing an axis neighbour.")
    return rows, nb


def assemble_laplacian(band: Band) -> SparseOperator:
    rows, nb = _inner_rows(band)
    dim = band.dim
    h2 = band.dx**2
    r = np.concatenate([rows, np.repeat(rows, 2 * dim)])
    c = np.concatenate([rows, nb.ravel()])
    v = np.concatenate([np.full(len(rows), -2.0 * dim / h2), np.full(nb.size, 1.0 / h2)])
    return sp.csr_matrix((v, (r, c)), shape=(len(band), len(band)))


def assemble_derivatives(band: Band) -> tuple[SparseOperator, ...]:
    rows, nb = _inner_rows(band)
    dim = band.dim
    scale = 0.5 / band.dx
    ops = []
    for k in range(dim):
        r = np.concatenate([rows, rows])
        c = np.concatenate([nb[:, k], nb[:, dim + k]])
        v = np.concatenate([np.full(len(rows), scale), np.full(len(rows), -scale)])
        ops.append(sp.csr_matrix((v, (r, c)), shape=(len(band), len(band))))
    return tuple(ops)


@dataclass(frozen=True)
class GhostGeometry:
    """Ghost rows with their outward conormals and extrapolation scale kappa * <x_g - cp, n>."""

    rows: IndexArray
    conormal: FloatArray
    scale: FloatArray
    interpolation: SparseOperator


def ghost_geometry(band: Band, surface: Surface, order: int, kappa: float) -> GhostGeometry:
    rows = np.flatnonzero(band.is_ghost)
    if rows.size == 0:
        return GhostGeometry(
            rows=rows,
            conormal=np.zeros((0, 3)),
            scale=np.zeros(0),
            interpolation=sp.csr_matrix((0, len(band))),
        )
    cp = band.cp.cp[rows]
    frames = surface.boundary_frames(cp)
    offset = np.einsum("ij,ij->i", band.position[rows] - cp, frames.n)
    return GhostGeometry(
        rows=rows,
        conormal=frames.n,
        scale=kappa * offset,
        interpolation=interpolation_matrix(band, cp, order),
    )


def _embed_rows(rows: IndexArray, block: sp.spmatrix, n: int) -> SparseOperator:
    select = sp.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))), shape=(n, len(rows)))
    return sp.csr_matrix(select @ block)


def assemble_neumann_heat(
    band: Band,
    surface: Surface,
    D: tuple[SparseOperator, ...],
    order: int = 3,
    kappa: float = 2.0,
    ghosts: GhostGeometry | None = None,
) -> SparseOperator:
    n = len(band)
    if not surface.is_open:
        return sp.csr_matrix((n, n))
    if ghosts is None:
        ghosts = ghost_geometry(band, surface, order, kappa)
    if ghosts.rows.size == 0:
        return sp.csr_matrix((n, n))
    block = sp.csr_matrix((len(ghosts.rows), n))
    for j, Dj in enumerate(D):
        weight = sp.diags(ghosts.scale * ghosts.conormal[:, j])
        block = block + weight @ (ghosts.interpolation @ Dj)
    return _embed_rows(ghosts.rows, block, n)


def assemble_neumann_poisson_rhs(
    band: Band,
    surface: Surface,
    X: FloatArray,
    order: int = 3,
    kappa: float = 2.0,
    ghosts: GhostGeometry | None = None,
) -> FloatArray:
    """Boundary vector kappa * <x_g - cp, n> * <n, X(cp)> at ghost rows, zero elsewhere."""
    g2 = np.zeros(len(band))
    if not surface.is_open:
        return g2
    if ghosts is None:
        ghosts = ghost_geometry(band, surface, order, kappa)
    return boundary_flux_vector(ghosts, X, len(band))


def boundary_flux_vector(ghosts: GhostGeometry, X: FloatArray, n: int) -> FloatArray:
    out = np.zeros(n)
    if ghosts.rows.size == 0:
        return out
    X_at_cp = ghosts.interpolation @ np.asarray(X).reshape(n, -1)
    flux = np.einsum("ij,ij->i", ghosts.conormal[:, : X_at_cp.shape[1]], X_at_cp)
    out[ghosts.rows] = ghosts.scale * flux
    return out


def neumann_data_vector(ghosts: GhostGeometry, g: FloatArray, n: int) -> FloatArray:
    """Boundary vector for prescribed Neumann data g given at the ghost closest points."""
    out = np.zeros(n)
    out[ghosts.rows] = ghosts.scale * np.asarray(g)
    return out


@dataclass(frozen=True, eq=False)
class OperatorSet:
    L: SparseOperator
    D: tuple[SparseOperator, ...]
    E_p: SparseOperator
    E_q: SparseOperator
    Ebar_p: SparseOperator
    Ebar_q: SparseOperator
    Ebar_g: SparseOperator
    ghosts: GhostGeometry
    guard_rows: NDArray[np.bool_]
    is_open: bool
    p: int
    q: int
    kappa: float


def assemble_operators(band: Band, surface: Surface, p: int = 1, q: int = 3, kappa: float = 2.0) -> OperatorSet:
    started = time.perf_counter()
    L = assemble_laplacian(band)
    D = assemble_derivatives(band)
    E_p = assemble_extension(band, p, "standard")
    E_q = assemble_extension(band, q, "standard")
    if surface.is_open:
        Ebar_p = assemble_extension(band, p, "mirror")
        Ebar_q = assemble_extension(band, q, "mirror")
    else:
        Ebar_p, Ebar_q = E_p, E_q
    ghosts = ghost_geometry(band, surface, q, kappa)
    Ebar_g = assemble_neumann_heat(band, surface, D, q, kappa, ghosts=ghosts)

    outer = (~band.inner).astype(np.float64)
    guard = (abs(Ebar_p) @ outer > 0) | (abs(E_p) @ outer > 0)
    if np.any(guard):
        logger.warning("%d rows reach outer band points; they keep only the extension constraint", int(guard.sum()))
    logger.info(
        "Assembled operators (N=%d, nnz L=%d, E_q=%d, ghost rows=%d) in %.2fs",
        len(band),
        L.nnz,
        E_q.nnz,
        ghosts.rows.size,
        time.perf_counter() - started,
    )
    return OperatorSet(
        L=L,
        D=D,
        E_p=E_p,
        E_q=E_q,
        Ebar_p=Ebar_p,
        Ebar_q=Ebar_q,
        Ebar_g=Ebar_g,
        ghosts=ghosts,
        guard_rows=np.asarray(guard),
        is_open=surface.is_open,
        p=p,
        q=q,
        kappa=kappa,
    )


def dump_triplets(op: sp.spmatrix, path: str | Path) -> Path:
    """Write `row col value` lines for every stored entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coo = sp.coo_matrix(op)
    table = np.column_stack([coo.row, coo.col, coo.data])
    np.savetxt(path, table, fmt=["%d", "%d", "%.17g"], delimiter=" ")
    logger.debug("Wrote %d triplets to %s", coo.nnz, path)
    return path
