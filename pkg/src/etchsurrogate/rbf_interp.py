"""Multiquadric radial basis function interpolation in arbitrary dimension.

One kernel serves three jobs: gridding scattered metrology points (d=2),
resampling a grid back to metrology coordinates (d=2), and mapping latent
coordinates over sensor space (d=3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.spatial.distance import cdist, pdist

from .errors import ConditioningError, ValidationError
from .wafer_data import WaferGrid, cell_centers

# Pivot guard: a factorization pivot below this fraction of the largest pivot
# is treated as numerically singular.
PIVOT_RATIO_GUARD = 1e-12

# Node residual tolerance relative to max|values|.
RESIDUAL_RTOL = 1e-8

# Heuristic-epsilon escalation on an ill-conditioned system: multiply epsilon
# by this factor and refit, at most ESCALATION_LIMIT times. Dense regular
# grids (hundreds of near-coincident-scale centers) need this; sparse
# metrology/sensor sets never trigger it. Applies only when epsilon was not
# given explicitly.
ESCALATION_FACTOR = 4.0
ESCALATION_LIMIT = 8

# Dense-system size cap for grid resampling; beyond this the masked cells are
# subsampled on a uniform stride.
MAX_GRID_CENTERS = 4096

_EVAL_CHUNK_ELEMS = 1 << 22  # cap the distance-matrix workspace at ~32 MB


def multiquadric(r: float | np.ndarray, epsilon: float) -> float | np.ndarray:
    """Kernel value sqrt(1 + (epsilon * r)^2); >= 1 and nondecreasing in r."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0.0):
        raise ValidationError("multiquadric distance must be nonnegative")
    out = np.sqrt(1.0 + (epsilon * r) ** 2)
    return float(out) if out.ndim == 0 else out


def default_epsilon(centers: np.ndarray) -> float:
    """Shape-parameter heuristic: reciprocal of the mean pairwise center distance."""
    centers = _as_points(centers)
    if centers.shape[0] < 2:
        return 1.0
    return float(1.0 / pdist(centers).mean())


def _as_points(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValidationError(f"expected a (k, d) point array, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class RbfModel:
    """A fitted multiquadric interpolant: centers, solved weights, shape parameter."""

    dim: int
    centers: np.ndarray
    weights: np.ndarray
    epsilon: float

    def __post_init__(self):
        if self.centers.shape != (self.weights.shape[0], self.dim):
            raise ValidationError(
                f"inconsistent model shapes: centers {self.centers.shape}, "
                f"weights {self.weights.shape}, dim {self.dim}"
            )
        for name in ("centers", "weights"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def k(self) -> int:
        return self.weights.shape[0]


def fit(centers: np.ndarray, values: np.ndarray, epsilon: float | None = None) -> RbfModel:
    """Solve the dense collocation system so the model interpolates values at centers.

    With epsilon=None the heuristic value is escalated geometrically while the
    system is ill-conditioned; an explicit epsilon is used as-is. Raises
    ConditioningError when a factorization pivot falls below PIVOT_RATIO_GUARD
    of the largest pivot, or when the solved node residual exceeds
    RESIDUAL_RTOL relative to max|values|.
    """
    centers = _as_points(centers)
    values = np.asarray(values, dtype=float).ravel()
    k, dim = centers.shape
    if values.shape[0] != k:
        raise ValidationError(f"{k} centers but {values.shape[0]} values")
    if k == 0:
        raise ValidationError("cannot fit an RBF on zero centers")
    if not (np.all(np.isfinite(centers)) and np.all(np.isfinite(values))):
        raise ValidationError("centers and values must be finite")
    if k >= 2 and pdist(centers).min() == 0.0:
        raise ValidationError("RBF centers must be pairwise distinct")
    attempts = ESCALATION_LIMIT if epsilon is None else 0
    if epsilon is None:
        epsilon = default_epsilon(centers)

    dists = cdist(centers, centers)
    cond = np.inf
    for attempt in range(attempts + 1):
        if attempt > 0:
            epsilon *= ESCALATION_FACTOR
        phi = multiquadric(dists, epsilon)
        lu, piv = lu_factor(phi)
        diag = np.abs(np.diagonal(lu))
        largest, smallest = diag.max(), diag.min()
        cond = np.inf if smallest == 0.0 else largest / smallest
        if smallest > PIVOT_RATIO_GUARD * largest:
            break
    else:
        raise ConditioningError(
            f"RBF system of {k} centers is numerically singular (epsilon={epsilon:g})",
            condition_estimate=cond,
        )
    weights = lu_solve((lu, piv), values)

    residual = np.abs(phi @ weights - values).max()
    scale = np.abs(values).max()
    if residual > RESIDUAL_RTOL * scale:
        raise ConditioningError(
            f"RBF node residual {residual:.3e} exceeds {RESIDUAL_RTOL:g} * max|values|",
            condition_estimate=cond,
        )
    return RbfModel(dim=dim, centers=centers, weights=weights, epsilon=float(epsilon))


def evaluate(model: RbfModel, queries: np.ndarray) -> np.ndarray:
    """Weighted kernel sum at each query point; valid inside and outside the hull."""
    queries = _as_points(queries)
    if queries.shape[1] != model.dim:
        raise ValidationError(
            f"query dimension {queries.shape[1]} does not match model dimension {model.dim}"
        )
    q = queries.shape[0]
    out = np.empty(q, dtype=float)
    chunk = max(1, _EVAL_CHUNK_ELEMS // max(model.k, 1))
    for start in range(0, q, chunk):
        stop = min(start + chunk, q)
        phi = multiquadric(cdist(queries[start:stop], model.centers), model.epsilon)
        out[start:stop] = phi @ model.weights
    return out


def scattered_to_grid(
    points: np.ndarray,
    values: np.ndarray,
    n: int,
    radius: float,
    epsilon: float | None = None,
) -> WaferGrid:
    """Grid scattered measurements onto n-by-n cell centers and apply the circular mask."""
    points = _as_points(points)
    if points.shape[0] < 3:
        raise ValidationError(f"gridding needs at least 3 points, got {points.shape[0]}")
    if points.shape[1] != 2:
        raise ValidationError("gridding expects 2-D points")
    model = fit(points, values, epsilon=epsilon)
    c = cell_centers(n, radius)
    xx, yy = np.meshgrid(c, c, indexing="xy")
    grid_values = evaluate(model, np.column_stack([xx.ravel(), yy.ravel()])).reshape(n, n)
    grid = WaferGrid.from_values(grid_values, radius=radius)
    from .wafer_data import apply_mask

    return apply_mask(grid)


def grid_to_scattered(
    grid: WaferGrid, targets: np.ndarray, epsilon: float | None = None
) -> np.ndarray:
    """Resample a masked grid at scattered target coordinates inside the wafer.

    Fits an RBF over the masked-in cell centers (uniformly strided down when
    their count exceeds MAX_GRID_CENTERS) and evaluates it at the targets.
    """
    targets = _as_points(targets)
    if targets.shape[1] != 2:
        raise ValidationError("targets must be 2-D points")
    r2 = (targets**2).sum(axis=1)
    if np.any(r2 > grid.radius**2):
        worst = float(np.sqrt(r2.max()))
        raise ValidationError(
            f"target at radius {worst:.3f} lies outside the wafer radius {grid.radius}"
        )
    centers = grid.masked_cell_centers()
    cell_values = grid.masked_values()
    if centers.shape[0] > MAX_GRID_CENTERS:
        step = -(-centers.shape[0] // MAX_GRID_CENTERS)  # ceil division
        centers = centers[::step]
        cell_values = cell_values[::step]
    model = fit(centers, cell_values, epsilon=epsilon)
    return evaluate(model, targets)
