"""Plain k-means (k-means++ seeding, Lloyd's iterations) with deterministic
restart selection. Used to group users and items in scaled feature space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass
class Clustering:
    k: int
    centroids: np.ndarray  # (k, d)
    assignments: np.ndarray  # (n,) ints in [0, k)
    inertia: float


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (
        (points * points).sum(axis=1)[:, None]
        - 2.0 * points @ centers.T
        + (centers * centers).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _plus_plus_seed(points: np.ndarray, k: int, rng: np.random.Generator):
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    best = _sq_dists(points, centers[:1])[:, 0]
    for j in range(1, k):
        total = best.sum()
        if total <= 0.0:
            # all remaining points coincide with a center; any distinct row works
            centers[j] = points[int(np.argmax(best))]
        else:
            centers[j] = points[rng.choice(n, p=best / total)]
        best = np.minimum(best, _sq_dists(points, centers[j : j + 1])[:, 0])
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int):
    assign = np.argmin(_sq_dists(points, centers), axis=1)
    for _ in range(max_iter):
        moved = False
        for c in range(len(centers)):
            members = assign == c
            if members.any():
                centers[c] = points[members].mean(axis=0)
            else:
                # empty cluster: reseed at the point farthest from its centroid
                d = np.sqrt(((points - centers[assign]) ** 2).sum(axis=1))
                centers[c] = points[int(np.argmax(d))]
                moved = True
        new_assign = np.argmin(_sq_dists(points, centers), axis=1)
        if not moved and np.array_equal(new_assign, assign):
            break
        assign = new_assign
    inertia = float(((points - centers[assign]) ** 2).sum())
    return centers, assign, inertia


def kmeans(
    points: np.ndarray, k: int, seed: int, restarts: int = 10, max_iter: int = 300
) -> Clustering:
    """Best-of-``restarts`` k-means; ties in inertia keep the earlier restart.

    Requires 1 <= k <= number of distinct rows. Deterministic for a fixed
    seed; assignment ties go to the lowest cluster index.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValidationError("kmeans needs a non-empty 2-d point array")
    n_distinct = len(np.unique(points, axis=0))
    if not 1 <= k <= n_distinct:
        raise ValidationError(
            f"k={k} must lie in [1, {n_distinct}] (number of distinct points)"
        )
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centers = _plus_plus_seed(points, k, rng)
        centers, assign, inertia = _lloyd(points, centers, max_iter)
        if best is None or inertia < best[2]:
            best = (centers, assign, inertia)
    centers, assign, inertia = best
    return Clustering(k, centers, assign.astype(np.int64), inertia)


def assign_cluster(point: np.ndarray, clustering: Clustering) -> int:
    """Nearest-centroid label; equidistant ties go to the lowest index."""
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (clustering.centroids.shape[1],):
        raise ValidationError(
            f"point has dimension {point.shape}, centroids expect "
            f"{clustering.centroids.shape[1]}"
        )
    return int(np.argmin(((clustering.centroids - point) ** 2).sum(axis=1)))
