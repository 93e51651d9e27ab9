"""k-means on voxel intensities or on standardized diffusion features."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: float
    iterations: int
    history: list[float] = field(default_factory=list)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    if points.shape[0] * centroids.shape[0] * points.shape[1] <= 4_000_000:
        return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    d2 = (points**2).sum(axis=1)[:, None] - 2.0 * points @ centroids.T + (centroids**2).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = [points[rng.integers(n)]]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centroids.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centroids, dtype=np.float64)


def lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int = 300, tol: float = 1e-6) -> KMeansResult:
    centroids = centroids.copy()
    k = len(centroids)
    history: list[float] = []
    labels = np.zeros(len(points), dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(points, centroids)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(points)), labels].sum()))
        if len(history) > 1 and history[-1] > history[-2] * (1 + 1e-9) + 1e-12:
            raise AssertionError(f"k-means objective increased at iteration {it}: {history[-2]} -> {history[-1]}")
        new = centroids.copy()
        taken: set[int] = set()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = points[members].mean(axis=0)
        for j in range(k):
            if not (labels == j).any():
                # Reseed an empty cluster at the point farthest from its centroid.
                far = d2[np.arange(len(points)), labels]
                for i in np.argsort(-far, kind="stable"):
                    if int(i) not in taken:
                        taken.add(int(i))
                        new[j] = points[i]
                        break
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        if shift < tol:
            break
    d2 = _sq_dists(points, centroids)
    labels = d2.argmin(axis=1)
    final = float(d2[np.arange(len(points)), labels].sum())
    history.append(final)
    return KMeansResult(centroids=centroids, labels=labels, objective=final, iterations=it, history=history)


def kmeans(points: np.ndarray, k: int, seed=0, max_iter: int = 300, tol: float = 1e-6,
           restarts: int = 5) -> KMeansResult:
    """k-means++ seeded Lloyd iterations; best of ``restarts`` runs.

    ``objective`` is the total (not mean) within-cluster squared distance.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if not 1 <= k <= len(points):
        raise ValueError(f"need 1 <= K <= N, got K={k}, N={len(points)}")
    rng = np.random.default_rng(seed)
    best: KMeansResult | None = None
    for _ in range(max(1, restarts)):
        res = lloyd(points, kmeans_pp_init(points, k, rng), max_iter, tol)
        if best is None or res.objective < best.objective:
            best = res
    return best


def standardize_channels(features: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Zero-mean, unit-variance per channel over the volume ([p, ...] input)."""
    f = np.asarray(features, dtype=np.float64)
    axes = tuple(range(1, f.ndim))
    return (f - f.mean(axis=axes, keepdims=True)) / (f.std(axis=axes, keepdims=True) + eps)


def kmeans_segment(volume: np.ndarray, k: int, seed=0, standardize: bool = True, **kw) -> np.ndarray:
    """Cluster voxels of a 3-D intensity volume or a [p, D, H, W] feature volume."""
    volume = np.asarray(volume)
    if volume.ndim == 3:
        points = volume.reshape(-1, 1)
        spatial = volume.shape
    elif volume.ndim == 4:
        f = standardize_channels(volume) if standardize else volume
        points = f.reshape(f.shape[0], -1).T
        spatial = volume.shape[1:]
    else:
        raise ValueError(f"expected a 3-D volume or 4-D feature volume, got shape {volume.shape}")
    return kmeans(points, k, seed=seed, **kw).labels.reshape(spatial)
