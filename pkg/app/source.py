"""Regularized point sources: local surface reconstruction and a compact cosine kernel."""

from __future__ import annotations

from dataclasses import dataclass, replace
import logging
import warnings

import numpy as np
from numpy.typing import ArrayLike

from app.band import Band
from app.errors import GeodesicFallbackWarning, GeometryError, PatchFitError, SourceConfigurationError
from app.geometry import FloatArray, Surface, as_points

logger = logging.getLogger(__name__)

SHOOT_TOL = 1e-10
SHOOT_MAX_ITER = 100
SHOOT_BRACKET = 0.5
RK4_STEPS = 32
_GAUSS_NODES, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(16)


@dataclass(frozen=True)
class LocalFrame:
    origin: FloatArray
    t1: FloatArray
    t2: FloatArray
    N: FloatArray

    def to_local(self, points: ArrayLike) -> FloatArray:
        """Coordinates (xi, eta, height) of points relative to the frame."""
        rel = as_points(points) - self.origin
        return np.column_stack([rel @ self.t1, rel @ self.t2, rel @ self.N])


@dataclass(frozen=True)
class QuadraticPatch:
    """Height field z = a0 + a1 xi + a2 eta + a3 xi^2 + a4 xi eta + a5 eta^2 over a frame."""

    a0: float
    a1: float
    a2: float
    a3: float
    a4: float
    a5: float
    residual: float = 0.0
    n_samples: int = 0

    def height(self, xi: FloatArray, eta: FloatArray) -> FloatArray:
        return self.a0 + self.a1 * xi + self.a2 * eta + self.a3 * xi**2 + self.a4 * xi * eta + self.a5 * eta**2

    def gradient(self, xi: FloatArray, eta: FloatArray) -> tuple[FloatArray, FloatArray]:
        return (
            self.a1 + 2.0 * self.a3 * xi + self.a4 * eta,
            self.a2 + self.a4 * xi + 2.0 * self.a5 * eta,
        )


@dataclass(frozen=True, eq=False)
class SourceSpec:
    points: FloatArray
    H: float | None = None

    def __post_init__(self) -> None:
        pts = as_points(self.points)
        if len(pts) == 0:
            raise SourceConfigurationError("At least one source point is required.")
        object.__setattr__(self, "points", pts)
        if self.H is not None and self.H <= 0:
            raise SourceConfigurationError(f"Source support radius must be positive, got {self.H}.")

    def with_support(self, H: float) -> SourceSpec:
        return replace(self, H=float(H))


def local_frame(surface: Surface, x0: ArrayLike) -> LocalFrame:
    batch = surface.project(x0)
    origin = batch.cp[0]
    N = batch.normal[0]
    length = float(np.linalg.norm(N))
    if not np.isfinite(length) or abs(length - 1.0) > 1e-6:
        raise GeometryError(f"Degenerate surface normal at {origin}.")
    N = N / length
    axis = np.eye(3)[int(np.argmin(np.abs(N)))]
    t1 = axis - (axis @ N) * N
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(N, t1)
    return LocalFrame(origin=origin, t1=t1, t2=t2, N=N)


def fit_patch(frame: LocalFrame, samples: ArrayLike) -> QuadraticPatch:
    local = frame.to_local(samples)
    if len(local) < 6:
        raise PatchFitError(f"Quadratic fit needs at least 6 samples, got {len(local)}; increase H.")
    xi, eta, z = local.T
    rho = float(np.max(np.hypot(xi, eta)))
    if rho == 0.0:
        raise PatchFitError("All patch samples coincide with the source; increase H.")
    u, v = xi / rho, eta / rho
    design = np.column_stack([np.ones_like(u), u, v, u * u, u * v, v * v])
    coef, _, rank, sv = np.linalg.lstsq(design, z, rcond=None)
    if rank < 6 or sv[-1] < 1e-10 * sv[0]:
        raise PatchFitError(f"Quadratic fit is rank deficient (rank {rank}) over {len(local)} samples; increase H.")
    residual = float(np.sqrt(np.mean((design @ coef - z) ** 2)))
    return QuadraticPatch(
        a0=float(coef[0]),
        a1=float(coef[1] / rho),
        a2=float(coef[2] / rho),
        a3=float(coef[3] / rho**2),
        a4=float(coef[4] / rho**2),
        a5=float(coef[5] / rho**2),
        residual=residual,
        n_samples=len(local),
    )


def _shoot(patch: QuadraticPatch, alpha: FloatArray, direction: FloatArray, reach: FloatArray, steps: int) -> tuple[FloatArray, FloatArray]:
    """Integrate unit-speed geodesics with launch angles `alpha` until <p, direction> = reach.

    The independent variable is the progress along `direction`; returns end points and arc lengths
    (NaN where a geodesic stops advancing).
    """
    zu0, zv0 = patch.gradient(np.zeros_like(alpha), np.zeros_like(alpha))
    w = np.column_stack([np.cos(alpha), np.sin(alpha)])
    grad0 = np.column_stack([zu0, zv0])
    speed = np.sqrt(1.0 + np.einsum("ij,ij->i", grad0, w) ** 2)
    state = np.column_stack([np.zeros((len(alpha), 2)), w / speed[:, None], np.zeros(len(alpha))])
    h = reach / steps

    def rate(y: FloatArray) -> FloatArray:
        p, dp = y[:, 0:2], y[:, 2:4]
        zu, zv = patch.gradient(p[:, 0], p[:, 1])
        quad = 2.0 * patch.a3 * dp[:, 0] ** 2 + 2.0 * patch.a4 * dp[:, 0] * dp[:, 1] + 2.0 * patch.a5 * dp[:, 1] ** 2
        factor = quad / (1.0 + zu**2 + zv**2)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / np.einsum("ij,ij->i", dp, direction)
            inv = np.where(inv > 0, inv, np.nan)
        out = np.empty_like(y)
        out[:, 0:2] = dp * inv[:, None]
        out[:, 2] = -zu * factor * inv
        out[:, 3] = -zv * factor * inv
        out[:, 4] = inv
        return out

    for _ in range(steps):
        k1 = rate(state)
        k2 = rate(state + 0.5 * h[:, None] * k1)
        k3 = rate(state + 0.5 * h[:, None] * k2)
        k4 = rate(state + h[:, None] * k3)
        state = state + (h / 6.0)[:, None] * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return state[:, 0:2], state[:, 4]


def lifted_segment_length(patch: QuadraticPatch, targets: FloatArray) -> FloatArray:
    """Length of the lift of the straight parameter segment from the origin to each target."""
    t = 0.5 * (_GAUSS_NODES + 1.0)
    xi = targets[:, 0:1] * t
    eta = targets[:, 1:2] * t
    zu, zv = patch.gradient(xi, eta)
    climb = zu * targets[:, 0:1] + zv * targets[:, 1:2]
    plane = np.einsum("ij,ij->i", targets, targets)[:, None]
    return 0.5 * np.sqrt(plane + climb**2) @ _GAUSS_WEIGHTS


def patch_geodesics(
    patch: QuadraticPatch,
    targets: ArrayLike,
    *,
    steps: int = RK4_STEPS,
    max_iter: int = SHOOT_MAX_ITER,
    tol: float = SHOOT_TOL,
) -> FloatArray:
    """Geodesic distances on the patch graph from the frame origin to parameter targets (K, 2)."""
    tgt = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    reach = np.hypot(tgt[:, 0], tgt[:, 1])
    out = np.zeros(len(tgt))
    live = np.flatnonzero(reach > 0)
    if live.size == 0:
        return out
    tgt, reach = tgt[live], reach[live]
    direction = tgt / reach[:, None]
    across = np.column_stack([-direction[:, 1], direction[:, 0]])
    theta = np.arctan2(direction[:, 1], direction[:, 0])

    def miss(alpha: FloatArray, rows: np.ndarray) -> tuple[FloatArray, FloatArray]:
        end, length = _shoot(patch, alpha, direction[rows], reach[rows], steps)
        return np.einsum("ij,ij->i", end, across[rows]), length

    length = np.full(len(tgt), np.nan)
    done = np.zeros(len(tgt), dtype=bool)
    if max_iter > 0:
        rows = np.arange(len(tgt))
        f_mid, s_mid = miss(theta, rows)
        hit = np.abs(f_mid) <= tol
        length[hit] = s_mid[hit]
        done |= hit

        lo = theta - SHOOT_BRACKET
        hi = theta + SHOOT_BRACKET
        f_lo, _ = miss(lo, rows)
        f_hi, _ = miss(hi, rows)
        bracketed = np.isfinite(f_lo) & np.isfinite(f_hi) & (np.sign(f_lo) != np.sign(f_hi))
        for _ in range(max_iter):
            active = np.flatnonzero(~done & bracketed)
            if active.size == 0:
                break
            mid = 0.5 * (lo[active] + hi[active])
            f_mid, s_mid = miss(mid, active)
            hit = np.abs(f_mid) <= tol
            length[active[hit]] = s_mid[hit]
            done[active[hit]] = True
            same = np.sign(f_mid) == np.sign(f_lo[active])
            lo[active] = np.where(same, mid, lo[active])
            f_lo[active] = np.where(same, f_mid, f_lo[active])
            hi[active] = np.where(same, hi[active], mid)
            bracketed[active] &= np.isfinite(f_mid)

    failed = ~done | ~np.isfinite(length)
    if np.any(failed):
        length[failed] = lifted_segment_length(patch, tgt[failed])
        message = f"Geodesic shooting did not converge for {int(failed.sum())} targets; using lifted segment lengths."
        logger.warning(message)
        warnings.warn(message, GeodesicFallbackWarning, stacklevel=2)
    out[live] = length
    return out


def patch_geodesic(
    patch: QuadraticPatch,
    target: ArrayLike,
    *,
    steps: int = RK4_STEPS,
    max_iter: int = SHOOT_MAX_ITER,
    tol: float = SHOOT_TOL,
) -> float:
    point = np.asarray(target, dtype=np.float64)[None, :2]
    return float(patch_geodesics(patch, point, steps=steps, max_iter=max_iter, tol=tol)[0])


def delta_kernel(phi: ArrayLike, H: float) -> FloatArray:
    """Compact cosine bump of radius H; its flat integral is 2."""
    phi = np.asarray(phi, dtype=np.float64)
    peak = 2.0 * np.pi / ((np.pi**2 - 4.0) * H**2)
    return np.where(phi <= H, peak * (1.0 + np.cos(np.pi * phi / H)), 0.0)


def snap_sources(surface: Surface, points: ArrayLike, max_distance: float) -> FloatArray:
    """Project sources onto the surface; reject those farther than `max_distance`."""
    pts = as_points(points)
    batch = surface.project(pts)
    for point, cp, dist in zip(pts, batch.cp, batch.dist):
        if dist > max_distance:
            raise SourceConfigurationError(
                f"Source {tuple(np.round(point, 6))} is {dist:.4g} off the surface, beyond the band "
                f"half-width {max_distance:.4g}; cannot snap it."
            )
        logger.info("Snapped source %s to %s (distance %.3e)", np.round(point, 6), np.round(cp, 6), dist)
    return batch.cp


def check_separation(points: FloatArray, H: float) -> None:
    if len(points) < 2:
        return
    gaps = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    gaps[np.diag_indices(len(points))] = np.inf
    i, j = np.unravel_index(int(np.argmin(gaps)), gaps.shape)
    if gaps[i, j] < 2.0 * H:
        raise SourceConfigurationError(
            f"Sources {i} and {j} are {gaps[i, j]:.4g} apart; kernel supports need at least 2H = {2.0 * H:.4g}."
        )


def build_delta(band: Band, surface: Surface, spec: SourceSpec) -> FloatArray:
    H = spec.H if spec.H is not None else 2.0 * band.dx
    sources = surface.project(spec.points).cp
    check_separation(sources, H)
    sample_radius = max(H, 3.0 * band.dx)
    u0 = np.zeros(len(band))
    cps = band.cp.cp
    for x0 in sources:
        frame = local_frame(surface, x0)
        gap = np.linalg.norm(cps - frame.origin, axis=1)
        patch = fit_patch(frame, cps[gap <= sample_radius])
        rows = np.flatnonzero(gap <= H)
        phi = patch_geodesics(patch, frame.to_local(cps[rows])[:, :2])
        u0[rows] += delta_kernel(phi, H)
        logger.debug(
            "Source at %s: %d samples, fit rms %.2e, %d support points",
            np.round(frame.origin, 6),
            patch.n_samples,
            patch.residual,
            rows.size,
        )
    return u0
