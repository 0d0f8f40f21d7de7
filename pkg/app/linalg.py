"""Sparse linear solves with a residual contract."""

from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Literal

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import bicgstab, spilu, splu, LinearOperator

from app.errors import ConfigurationError, SolverError
from app.geometry import FloatArray

logger = logging.getLogger(__name__)

SolverMethod = Literal["sparse_direct", "iterative_krylov"]
NullspacePolicy = Literal["pin_first_unknown", "none"]

_REFINEMENT_STEPS = 2


@dataclass(frozen=True)
class SolverConfig:
    method: SolverMethod = "sparse_direct"
    rel_tol: float = 1e-10
    max_iter: int | None = None
    nullspace_policy: NullspacePolicy = "none"
    ilu_drop_tol: float = 1e-5
    ilu_fill_factor: float = 20.0
    pin_index: int = 0

    def __post_init__(self) -> None:
        if self.method not in ("sparse_direct", "iterative_krylov"):
            raise ConfigurationError(f"Unknown solver method `{self.method}`.")
        if self.nullspace_policy not in ("pin_first_unknown", "none"):
            raise ConfigurationError(f"Unknown nullspace policy `{self.nullspace_policy}`.")
        if not self.rel_tol > 0:
            raise ConfigurationError(f"rel_tol must be positive, got {self.rel_tol}.")
        if self.max_iter is not None and self.max_iter < 1:
            raise ConfigurationError(f"max_iter must be at least 1, got {self.max_iter}.")
        if self.pin_index < 0:
            raise ConfigurationError(f"pin_index must be non-negative, got {self.pin_index}.")

    def iteration_limit(self, n: int) -> int:
        return self.max_iter if self.max_iter is not None else 10 * n


def apply_nullspace_policy(A: sp.spmatrix, b: FloatArray, cfg: SolverConfig) -> tuple[sp.csr_matrix, FloatArray]:
    """Replace equation k by x[k] = 0 when pinning is requested, k = cfg.pin_index (0 by default).

    The replaced equation must carry weight in the left null vector of A, otherwise the
    pinned system stays singular.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=np.float64)
    if cfg.nullspace_policy != "pin_first_unknown":
        return A, b
    n = A.shape[0]
    k = cfg.pin_index
    if k >= n:
        raise SolverError(f"Pin index {k} is outside a system of size {n}.")
    keep = np.ones(n)
    keep[k] = 0.0
    pinned = sp.diags(keep) @ A + sp.csr_matrix(([1.0], ([k], [k])), shape=A.shape)
    pinned = sp.csr_matrix(pinned)
    pinned.eliminate_zeros()
    b_pinned = b.copy()
    b_pinned[k] = 0.0
    return pinned, b_pinned


def relative_residual(A: sp.spmatrix, x: FloatArray, b: FloatArray) -> float:
    r = float(np.linalg.norm(A @ x - b))
    scale = float(np.linalg.norm(b))
    return r / scale if scale > 0 else r


def _solve_direct(A: sp.csr_matrix, b: FloatArray, cfg: SolverConfig) -> FloatArray:
    try:
        lu = splu(A.tocsc(), permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SolverError(f"Sparse factorization failed: {exc}.", n=A.shape[0], nnz=A.nnz) from exc
    x = lu.solve(b)
    for _ in range(_REFINEMENT_STEPS):
        if not np.all(np.isfinite(x)) or relative_residual(A, x, b) <= cfg.rel_tol:
            break
        x = x + lu.solve(b - A @ x)
    return x


def _solve_iterative(A: sp.csr_matrix, b: FloatArray, cfg: SolverConfig) -> FloatArray:
    n = A.shape[0]
    try:
        ilu = spilu(A.tocsc(), drop_tol=cfg.ilu_drop_tol, fill_factor=cfg.ilu_fill_factor)
        M = LinearOperator((n, n), matvec=ilu.solve)
    except RuntimeError as exc:
        logger.warning("Incomplete factorization failed (%s); running BiCGSTAB unpreconditioned", exc)
        M = None
    x, info = bicgstab(A, b, rtol=cfg.rel_tol, atol=0.0, maxiter=cfg.iteration_limit(n), M=M)
    if info != 0:
        raise SolverError(
            f"BiCGSTAB did not converge (info={info}).",
            residual=relative_residual(A, x, b),
            n=n,
            nnz=A.nnz,
        )
    return x


def solve(A: sp.spmatrix, b: FloatArray, cfg: SolverConfig | None = None) -> FloatArray:
    cfg = cfg or SolverConfig()
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=np.float64)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise SolverError(f"System shapes do not match: A is {A.shape}, b has {b.shape[0]} entries.")
    A, b = apply_nullspace_policy(A, b, cfg)
    if not np.any(b):
        return np.zeros_like(b)
    if cfg.method == "sparse_direct":
        x = _solve_direct(A, b, cfg)
    else:
        x = _solve_iterative(A, b, cfg)
    if not np.all(np.isfinite(x)):
        raise SolverError("Solution has non-finite entries.", n=A.shape[0], nnz=A.nnz)
    residual = relative_residual(A, x, b)
    if residual > cfg.rel_tol:
        raise SolverError("Residual above tolerance.", residual=residual, n=A.shape[0], nnz=A.nnz)
    logger.debug("Solved N=%d nnz=%d (%s) residual=%.3e", A.shape[0], A.nnz, cfg.method, residual)
    return x
