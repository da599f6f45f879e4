"""Classical iterative closest point over an exact k-d tree.

Alternates nearest-neighbor correspondence with the closed-form alignment
solve; the recorded objective (mean squared matched residual) is
non-increasing by construction. Also provides polishing: the same loop
seeded from an externally estimated transform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import geometry as geo
from .errors import DegenerateCorrespondenceError, InsufficientDataError

DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-8
# Relative transform change below which the iteration counts as stalled.
TRANSFORM_TOL = 1e-10


class SpatialIndex:
    """Exact nearest-neighbor index over target points.

    Backed by a balanced k-d tree; distance ties are broken toward the
    lowest point index so queries match an exhaustive scan exactly.
    """

    def __init__(self, points, leaf_size: int = 16):
        pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise InsufficientDataError(f"index needs a non-empty (M, 3) array, got {pts.shape}")
        self.points = pts
        self.leaf_size = leaf_size
        self._tree = cKDTree(pts, leafsize=leaf_size)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, point) -> tuple[int, float]:
        idx, dist = self.query_many(np.asarray(point, dtype=np.float64).reshape(1, 3))
        return int(idx[0]), float(dist[0])

    def query_many(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Nearest target index and distance for each query row."""
        q = np.asarray(queries, dtype=np.float64)
        k = min(4, len(self))
        dist, idx = self._tree.query(q, k=k)
        if k == 1:
            return idx.astype(np.int64).reshape(-1), dist.reshape(-1)
        # Among equal-distance candidates, keep the lowest index.
        best = dist[:, :1]
        tied = dist <= best  # exact equality; query returns sorted distances
        masked = np.where(tied, idx, np.iinfo(np.int64).max)
        return masked.min(axis=1).astype(np.int64), best.reshape(-1)


def nearest_neighbor(index: SpatialIndex, query) -> tuple[int, float]:
    return index.query(query)


@dataclass(frozen=True)
class IcpState:
    iteration: int
    transform: geo.RigidTransform
    objective: float
    correspondence: np.ndarray


def correspondence_step(x: np.ndarray, index: SpatialIndex, transform: geo.RigidTransform):
    """Match each transformed source point to its nearest target."""
    moved = geo.apply_transform(transform, x)
    idx, dist = index.query_many(moved)
    objective = float(np.mean(dist**2))
    return idx, objective


def alignment_step(x: np.ndarray, y: np.ndarray, correspondence: np.ndarray) -> geo.RigidTransform:
    """One alignment update: the closed-form solve on the matched pairs."""
    return geo.procrustes_solve(x, y[correspondence])


def registration_objective(x, y, transform: geo.RigidTransform, index: SpatialIndex | None = None) -> float:
    """Mean squared nearest-neighbor residual of ``transform`` aligning x to y."""
    xp = np.asarray(getattr(x, "points", x), dtype=np.float64)
    if index is None:
        index = SpatialIndex(y)
    _, objective = correspondence_step(xp, index, transform)
    return objective


def icp_register(
    x,
    y,
    init: geo.RigidTransform | None = None,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> tuple[geo.RigidTransform, list[IcpState]]:
    """Register x onto y starting from ``init`` (identity by default).

    Returns the final transform and the per-iteration history. Stops when
    the objective decrease falls below ``tol``, the transform stalls, or
    ``max_iters`` is reached.
    """
    xp = np.asarray(getattr(x, "points", x), dtype=np.float64)
    yp = np.asarray(getattr(y, "points", y), dtype=np.float64)
    if xp.shape[0] < 3 or yp.shape[0] < 3:
        raise InsufficientDataError("both clouds need at least 3 points")
    transform = init if init is not None else geo.RigidTransform.identity()
    index = SpatialIndex(yp)

    history: list[IcpState] = []
    prev_objective = np.inf
    for k in range(max_iters):
        corr, objective = correspondence_step(xp, index, transform)
        history.append(IcpState(k, transform, objective, corr))
        if np.unique(corr).size == 1:
            raise DegenerateCorrespondenceError(
                "all source points matched a single target point", history=history
            )
        if prev_objective - objective < tol:
            break
        new_transform = alignment_step(xp, yp, corr)
        delta = np.linalg.norm(new_transform.rotation - transform.rotation) + np.linalg.norm(
            new_transform.translation - transform.translation
        )
        transform = new_transform
        prev_objective = objective
        if delta < TRANSFORM_TOL:
            corr, objective = correspondence_step(xp, index, transform)
            history.append(IcpState(k + 1, transform, objective, corr))
            break
    else:
        corr, objective = correspondence_step(xp, index, transform)
        history.append(IcpState(max_iters, transform, objective, corr))

    return history[-1].transform, history


def polish_with_icp(
    x,
    y,
    init_from_dcp: geo.RigidTransform,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> geo.RigidTransform:
    """Refine an externally estimated transform by local ICP iterations."""
    transform, _ = icp_register(x, y, init=init_from_dcp, max_iters=max_iters, tol=tol)
    return transform
