"""Point-cloud containers, the half-squared-Euclidean cost, and small
linear-algebra utilities shared by every other module.

All functions here are pure: they never mutate their inputs, and the
arrays stored inside :class:`PointCloud` are marked read-only, so values
can be shared freely between concurrent workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

__all__ = [
    "PointCloud",
    "half_sq_cost_matrix",
    "check_spd",
    "spd_sqrt",
]

_WEIGHT_SUM_TOL = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of ``n`` points in ``R^d`` with probability weights.

    Weights default to uniform ``1/n``.  Construction validates that all
    coordinates are finite, weights are nonnegative and sum to one within
    ``1e-12``, and ``n, d >= 1``.  Duplicate points are allowed and are
    treated as distinct atoms.
    """

    points: np.ndarray
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError(f"points must be a (n, d) array with n, d >= 1, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must all be finite")
        if self.weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (pts.shape[0],):
            raise ValueError(f"weights must have shape ({pts.shape[0]},), got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > _WEIGHT_SUM_TOL:
            raise ValueError(f"weights must sum to 1 within {_WEIGHT_SUM_TOL}, got sum {w.sum()!r}")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "weights", _readonly(w))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def to_csv(self, path, include_weights: bool = False) -> None:
        """Write one row per point: d coordinate columns, optionally a
        trailing weight column."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for i in range(self.n):
                row = [repr(x) for x in self.points[i]]
                if include_weights:
                    row.append(repr(self.weights[i]))
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path, has_weights: bool = False) -> "PointCloud":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.reader(fh):
                if rec:
                    rows.append([float(x) for x in rec])
        a = np.asarray(rows, dtype=np.float64)
        if has_weights:
            return cls(a[:, :-1], a[:, -1])
        return cls(a)


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    a = np.asarray(x, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def half_sq_cost_matrix(X, Y) -> np.ndarray:
    """Pairwise cost ``c(x, y) = ||x - y||^2 / 2`` between two clouds.

    Parameters
    ----------
    X, Y : PointCloud or (n, d) array
        Clouds sharing the same dimension ``d``.

    Returns
    -------
    (n, m) ndarray
        Entry ``(i, j)`` equals ``0.5 * ||X_i - Y_j||^2``.  All entries
        are nonnegative and the matrix is symmetric when ``X is Y``.
    """
    px, py = _as_points(X), _as_points(Y)
    if px.shape[1] != py.shape[1]:
        raise ValueError(f"dimension mismatch: X has d={px.shape[1]}, Y has d={py.shape[1]}")
    # cdist computes the squared differences pair by pair, which keeps the
    # result exactly nonnegative (no a^2 + b^2 - 2ab cancellation).
    return 0.5 * cdist(px, py, "sqeuclidean")


def check_spd(a, rtol: float = 1e-10) -> np.ndarray:
    """Validate that ``a`` is symmetric positive definite.

    Symmetry is required within ``rtol`` relative to the largest entry,
    and all eigenvalues must be strictly positive.  Returns the
    symmetrized float64 matrix.
    """
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.T).max() > rtol * scale:
        raise ValueError("matrix is not symmetric within 1e-10 relative tolerance")
    sym = 0.5 * (m + m.T)
    if np.linalg.eigvalsh(sym).min() <= 0.0:
        raise ValueError("matrix is not positive definite (eigenvalue <= 0)")
    return sym


def spd_sqrt(a) -> np.ndarray:
    """Symmetric positive definite square root via eigendecomposition.

    The returned ``B`` is SPD and satisfies ``B @ B == a`` to high
    relative accuracy.  Eigenvalues are floored at ``1e-12`` before the
    square root, which is adequate for the moderate dimensions (d <= 25)
    this library targets.  Raises ``ValueError`` on non-SPD input.
    """
    sym = check_spd(a)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.maximum(vals, 1e-12)
    return (vecs * np.sqrt(vals)) @ vecs.T
