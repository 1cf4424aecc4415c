"""Finite empirical measures and the quadratic Wasserstein distance between them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import NonFiniteInput, ShapeMismatch, UnsupportedSize

MAX_ASSIGNMENT_SIZE = 4096


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted point cloud ``sum_k w_k delta_{x_k}``.

    ``weights=None`` means uniform ``1/n``. The points array is referenced,
    not copied, so building a measure over a particle cloud is free.
    """

    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ShapeMismatch(f"measure support must be a nonempty (n, d) array, got {pts.shape}")
        object.__setattr__(self, "points", pts)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (pts.shape[0],):
                raise ShapeMismatch("weights must have one entry per support point")
            if np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
                raise ValueError("weights must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def w(self) -> np.ndarray:
        """Weights as an explicit array."""
        if self.weights is None:
            return np.full(self.size, 1.0 / self.size)
        return self.weights

    def mean(self) -> np.ndarray:
        if self.weights is None:
            return self.points.mean(axis=0)
        return self.weights @ self.points

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate per-point values (leading axis = support points)."""
        if self.weights is None:
            return values.mean(axis=0)
        return np.tensordot(self.weights, values, axes=(0, 0))

    def check_finite(self):
        if not np.all(np.isfinite(self.points)):
            raise NonFiniteInput("measure support contains non-finite points")

    @classmethod
    def dirac(cls, x) -> EmpiricalMeasure:
        return cls(np.atleast_2d(np.asarray(x, dtype=float)))


def _w2_1d(x, wx, y, wy) -> float:
    """Quantile coupling on the real line; exact for any two discrete laws."""
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    x, wx, y, wy = x[ix], wx[ix], y[iy], wy[iy]
    cx, cy = np.cumsum(wx), np.cumsum(wy)
    cx[-1] = cy[-1] = 1.0
    levels = np.union1d(cx, cy)
    du = np.diff(np.concatenate(([0.0], levels)))
    # quantile index on each level interval (left-continuous inverse CDF)
    qx = np.minimum(np.searchsorted(cx, levels, side="left"), len(x) - 1)
    qy = np.minimum(np.searchsorted(cy, levels, side="left"), len(y) - 1)
    return float(np.sqrt(np.sum(du * (x[qx] - y[qy]) ** 2)))


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """W2 distance between two empirical measures.

    d = 1: exact via sorted samples, any sizes and weights.
    d >= 2: exact optimal assignment, uniform weights and equal sizes only.
    """
    if mu.dim != nu.dim:
        raise ShapeMismatch(f"dimension mismatch {mu.dim} vs {nu.dim}")
    if mu.dim == 1:
        return _w2_1d(mu.points[:, 0], mu.w, nu.points[:, 0], nu.w)
    if mu.size != nu.size or mu.weights is not None or nu.weights is not None:
        raise UnsupportedSize("d >= 2 requires equal-size uniformly weighted measures")
    if mu.size > MAX_ASSIGNMENT_SIZE:
        raise UnsupportedSize(f"exact assignment limited to N <= {MAX_ASSIGNMENT_SIZE}; subsample first")
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))
