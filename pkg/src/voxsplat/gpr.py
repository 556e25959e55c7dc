"""Per-voxel Gaussian process regression over a surface-aligned coordinate split.

Each voxel's points are split into a scalar target (the coordinate along the
axis most parallel to the local surface normal, found by PCA) and a 2D input
(the remaining two axes). The posterior over a uniform query grid in the
input plane is the standard GP conditional

    mu*    = Ks^T (K + diag(noise))^-1 f
    Sigma* = Kss - Ks^T (K + diag(noise))^-1 Ks

with the squared-exponential kernel k(a, b) = exp(-lambda * ||a - b||^2).
The noise term is a full diagonal so refined voxels can mix sensor noise
with per-point posterior variances from the previous iteration.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import (DegenerateGeometryError, InputDomainError,
                     NumericalDegeneracyError)
from .voxel_map import (FrameUpdateSet, VoxelKey, VoxelMap, VoxelPrediction,
                        VoxelState, voxel_bounds)

log = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-10

# Value axis -> ordered pair of parameter axes. The split follows the axis
# case arms (X takes (y, z), Y takes (z, x), Z takes (x, y)).
PARAMETER_AXES = {0: (1, 2), 1: (2, 0), 2: (0, 1)}


# ---------------------------------------------------------------------------
# Axis selection
# ---------------------------------------------------------------------------

@dataclass
class AxisSelection:
    """A re-coordinatization of 3D points into GP targets and inputs.

    ``value_axis`` is 0, 1 or 2 for x, y, z. ``f`` holds the projections onto
    the value axis; ``x`` the (n, 2) projections onto the two parameter axes
    in the order given by :data:`PARAMETER_AXES`.
    """

    value_axis: int
    f: np.ndarray
    x: np.ndarray


def select_value_axis(points: np.ndarray) -> AxisSelection:
    """Pick the coordinate axis closest to the surface normal of ``points``.

    The normal is the eigenvector of the smallest eigenvalue of the centered
    covariance; the chosen axis is the one with the smallest angle to it
    (ties prefer z, then y, then x, matching ground-dominant scenes).

    Raises :class:`DegenerateGeometryError` when the points are coincident or
    collinear, in which case no function graph exists over any axis pair.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateGeometryError(f"need at least 3 points, got {len(pts)}")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    if evals[2] <= 1e-18 or evals[1] <= 1e-9 * evals[2]:
        raise DegenerateGeometryError("points are coincident or collinear")
    normal = evecs[:, 0]
    weights = np.abs(normal)
    axis = 2 - int(np.argmax(weights[::-1]))  # argmax with z > y > x tie-break
    return split_by_axis(pts, axis)


def split_by_axis(points: np.ndarray, value_axis: int) -> AxisSelection:
    pa, pb = PARAMETER_AXES[value_axis]
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return AxisSelection(value_axis=value_axis,
                         f=pts[:, value_axis].copy(),
                         x=np.stack([pts[:, pa], pts[:, pb]], axis=1))


def assemble_points(value_axis: int, x: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Inverse of the axis split: rebuild (m, 3) points from inputs and targets."""
    pa, pb = PARAMETER_AXES[value_axis]
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    out = np.empty((len(x), 3))
    out[:, value_axis] = np.asarray(f, dtype=float).reshape(-1)
    out[:, pa] = x[:, 0]
    out[:, pb] = x[:, 1]
    return out


# ---------------------------------------------------------------------------
# Query grids and kernels
# ---------------------------------------------------------------------------

def make_mesh_grid(extent, n_s: int, n_r: int) -> np.ndarray:
    """Uniform prediction grid over a 2D extent, shape ((n_s*n_r)^2, 2).

    The extent is split into n_s x n_s subgrids, each holding an n_r x n_r
    fine grid at cell centers. Row-major ordering by (subgrid row, subgrid
    col, fine row, fine col); downstream subgrid partitioning relies on this
    ordering, so it is a contract, not an implementation detail.
    """
    if n_s < 1 or n_r < 1:
        raise InputDomainError("n_s and n_r must be at least 1")
    (lo0, hi0), (lo1, hi1) = extent
    m = n_s * n_r
    c0 = lo0 + (np.arange(m) + 0.5) * (hi0 - lo0) / m
    c1 = lo1 + (np.arange(m) + 0.5) * (hi1 - lo1) / m
    sr, sc, fr, fc = np.unravel_index(np.arange(n_s * n_s * n_r * n_r),
                                      (n_s, n_s, n_r, n_r))
    return np.stack([c0[sr * n_r + fr], c1[sc * n_r + fc]], axis=1)


def kernel_matrix(xa: np.ndarray, xb: np.ndarray, lam: float) -> np.ndarray:
    """Squared-exponential kernel, entry (i, j) = exp(-lam * ||xa_i - xb_j||^2)."""
    if lam <= 0:
        raise InputDomainError("kernel constant must be positive")
    xa = np.asarray(xa, dtype=float).reshape(-1, 2)
    xb = np.asarray(xb, dtype=float).reshape(-1, 2)
    d2 = ((xa[:, None, :] - xb[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-lam * d2)


# ---------------------------------------------------------------------------
# Posterior solve
# ---------------------------------------------------------------------------

@dataclass
class GprProblem:
    """One voxel's regression instance."""

    x: np.ndarray          # (n, 2) training inputs
    f: np.ndarray          # (n,) training targets
    noise_diag: np.ndarray  # (n,) per-point observation variance
    x_star: np.ndarray     # (m, 2) query grid
    lam: float = 1.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1, 2)
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        self.noise_diag = np.asarray(self.noise_diag, dtype=float).reshape(-1)
        self.x_star = np.asarray(self.x_star, dtype=float).reshape(-1, 2)
        n = len(self.x)
        if n < 1:
            raise InputDomainError("need at least one training point")
        if len(self.f) != n or len(self.noise_diag) != n:
            raise InputDomainError("x, f and noise_diag must agree in length")
        if np.any(self.noise_diag < 0):
            raise InputDomainError("noise variances must be nonnegative")
        if self.lam <= 0:
            raise InputDomainError("kernel constant must be positive")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.f))
                and np.all(np.isfinite(self.x_star))):
            raise InputDomainError("problem data must be finite")


@dataclass
class GprResult:
    mu_star: np.ndarray          # (m,) posterior mean
    sigma_star_diag: np.ndarray  # (m,) posterior variance diagonal
    sigma_star_full: np.ndarray | None = None  # (m, m), debug/oracle mode only


def gpr_solve(problem: GprProblem, return_full: bool = False,
              jitter: float = DEFAULT_JITTER) -> GprResult:
    """Posterior mean and variance at the query grid.

    Factorizes K + diag(noise) with a Cholesky decomposition; when that
    fails, ``jitter`` is added to the diagonal and the factorization is
    retried once. A second failure raises
    :class:`NumericalDegeneracyError`. Targets are used as given; centering
    is the caller's business (``densify_frame`` subtracts the mean target
    and adds it back).
    """
    K = kernel_matrix(problem.x, problem.x, problem.lam)
    A = K + np.diag(problem.noise_diag)
    try:
        factor = cho_factor(A, lower=True, check_finite=False)
    except LinAlgError:
        A = A + jitter * np.eye(len(A))
        try:
            factor = cho_factor(A, lower=True, check_finite=False)
        except LinAlgError as exc:
            raise NumericalDegeneracyError(
                f"kernel matrix not positive definite even with jitter {jitter}") from exc
    Ks = kernel_matrix(problem.x, problem.x_star, problem.lam)
    alpha = cho_solve(factor, problem.f, check_finite=False)
    mu = Ks.T @ alpha
    V = cho_solve(factor, Ks, check_finite=False)
    # k(q, q) = 1 for the SE kernel, so the prior variance diagonal is ones
    diag = 1.0 - np.einsum("ij,ij->j", Ks, V)
    full = None
    if return_full:
        Kss = kernel_matrix(problem.x_star, problem.x_star, problem.lam)
        full = Kss - Ks.T @ V
    return GprResult(mu_star=mu, sigma_star_diag=diag, sigma_star_full=full)


@dataclass
class GprBatchResult:
    """gpr_solve mapped over independent problems, with per-index errors.

    ``results[i]`` is None exactly when ``(i, exception)`` appears in
    ``errors``; the batch never aborts on a single bad problem.
    """

    results: list[GprResult | None]
    errors: list[tuple[int, Exception]]

    @property
    def ok(self) -> bool:
        return not self.errors


def gpr_solve_batch(problems: list[GprProblem], workers: int = 0,
                    return_full: bool = False,
                    jitter: float = DEFAULT_JITTER) -> GprBatchResult:
    """Solve many independent problems, preserving order.

    Runs sequentially by default; ``workers > 1`` uses a thread pool. Each
    problem is solved by exactly the same code path as :func:`gpr_solve`, so
    batch output is bitwise identical to a sequential map regardless of the
    worker count.
    """
    def solve_one(idx_problem):
        idx, problem = idx_problem
        try:
            return idx, gpr_solve(problem, return_full=return_full, jitter=jitter), None
        except Exception as exc:  # collected per index, never aborts the batch
            return idx, None, exc

    items = list(enumerate(problems))
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(solve_one, items))
    else:
        outcomes = [solve_one(item) for item in items]

    results: list[GprResult | None] = [None] * len(problems)
    errors: list[tuple[int, Exception]] = []
    for idx, result, exc in outcomes:
        if exc is None:
            results[idx] = result
        else:
            errors.append((idx, exc))
    return GprBatchResult(results=results, errors=errors)


# ---------------------------------------------------------------------------
# Frame densification
# ---------------------------------------------------------------------------

def voxel_parameter_extent(key: VoxelKey, voxel_size: float, value_axis: int):
    """The voxel's bounds along the two parameter axes of ``value_axis``."""
    bounds = voxel_bounds(key, voxel_size)
    pa, pb = PARAMETER_AXES[value_axis]
    return (bounds[0, pa], bounds[1, pa]), (bounds[0, pb], bounds[1, pb])


def densify_frame(update_set: FrameUpdateSet, vmap: VoxelMap,
                  config) -> list[VoxelPrediction]:
    """Solve every READY or ACTIVE voxel touched by the latest frame.

    Per cell: select the value axis, center the targets by their mean, build
    the query grid over the voxel's parameter-plane extent, solve, reassemble
    3D points (mean added back), color each predicted point from the nearest
    training point in the parameter plane, and fold the result back into the
    cell. UNREADY and CONVERGED cells are skipped; degenerate or numerically
    failing cells are skipped with a logged warning and stay unsolved.
    """
    predictions: list[VoxelPrediction] = []
    for key in update_set:
        cell = vmap.cells[key]
        if cell.state not in (VoxelState.READY, VoxelState.ACTIVE):
            continue
        train = cell.training_cloud()
        try:
            selection = select_value_axis(train.positions)
        except DegenerateGeometryError as exc:
            log.warning("voxel %s skipped: %s", key, exc)
            continue
        mean_f = selection.f.mean()
        extent = voxel_parameter_extent(key, vmap.voxel_size, selection.value_axis)
        x_star = make_mesh_grid(extent, config.n_s, config.n_r)
        problem = GprProblem(x=selection.x, f=selection.f - mean_f,
                             noise_diag=train.noise_var, x_star=x_star,
                             lam=config.kernel_lambda)
        try:
            result = gpr_solve(problem, jitter=config.jitter)
        except NumericalDegeneracyError as exc:
            exc.key = key
            log.warning("voxel %s skipped: %s", key, exc)
            continue
        points = assemble_points(selection.value_axis, x_star, result.mu_star + mean_f)
        d2 = ((x_star[:, None, :] - selection.x[None, :, :]) ** 2).sum(axis=2)
        colors = train.colors[np.argmin(d2, axis=1)]
        prediction = VoxelPrediction(key=key, positions=points, colors=colors,
                                     variances=np.clip(result.sigma_star_diag, 0.0, None))
        cell.value_axis = selection.value_axis
        vmap.apply_prediction(prediction)
        predictions.append(prediction)
    return predictions
