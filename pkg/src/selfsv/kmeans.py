"""Exact Lloyd k-means with k-means++ seeding.

Deterministic under seed, single-threaded, float64 accumulation.  The
objective is asserted non-increasing across iterations; empty clusters
are reseeded to the farthest point from its assigned centroid.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .store import read_arrays, write_arrays


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, D) float32
    feature_kind: str = "mfcc"  # or "latent:<layer>"

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ValueError(f"centroids must be (K, D), got {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids contain non-finite values")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _plusplus_init(points, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(0, n)]
    _, sqd = _kernels.nearest_centroid(points, centroids[:1])
    for j in range(1, k):
        total = sqd.sum()
        if total <= 0:
            centroids[j] = points[rng.integers(0, n)]
        else:
            centroids[j] = points[rng.choice(n, p=sqd / total)]
        _, d_new = _kernels.nearest_centroid(points, centroids[j : j + 1])
        sqd = np.minimum(sqd, d_new)
    return centroids


def kmeans_fit(
    points: np.ndarray,
    k: int,
    max_iters: int = 50,
    seed: int = 0,
    feature_kind: str = "mfcc",
) -> Codebook:
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(points, k, rng)

    labels, sqd = _kernels.nearest_centroid(points, centroids)
    objective = sqd.sum()
    for _ in range(max_iters):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros((k, points.shape[1]))
        np.add.at(sums, labels, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            far = int(np.argmax(sqd))
            centroids[j] = points[far]
            sqd[far] = 0.0

        new_labels, sqd = _kernels.nearest_centroid(points, centroids)
        new_objective = sqd.sum()
        assert new_objective <= objective * (1 + 1e-9) + 1e-9, (
            f"k-means objective increased: {objective} -> {new_objective}"
        )
        converged = np.array_equal(new_labels, labels)
        labels, objective = new_labels, new_objective
        if converged:
            break
    return Codebook(centroids.astype(np.float32), feature_kind)


def kmeans_assign(points: np.ndarray, codebook: Codebook) -> np.ndarray:
    points = np.ascontiguousarray(points)
    if points.ndim != 2 or points.shape[1] != codebook.dim:
        raise ValueError(
            f"points dim {points.shape} does not match codebook dim {codebook.dim}"
        )
    labels, _ = _kernels.nearest_centroid(points, codebook.centroids)
    return labels


def save_codebook(path, codebook: Codebook) -> None:
    write_arrays(
        path,
        {"centroids": codebook.centroids},
        meta={"k": codebook.k, "feature_kind": codebook.feature_kind},
    )


def load_codebook(path) -> Codebook:
    arrays, meta = read_arrays(path)
    return Codebook(arrays["centroids"], meta["feature_kind"])
