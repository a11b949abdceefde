"""Weighted K-nearest-neighbor density estimation and the density->scale link.

Each primitive's local density is derived from its K nearest neighbors: the
weighted mean neighbor distance R~ (weights fall off with the gap to the
nearest neighbor, normalized by the scene's median nearest-neighbor distance)
gives density D = K / (pi R~^2) in 2D or K / (4/3 pi R~^3) in 3D. The link
constrains the absolute scale to s_a = theta * R~; `rescale_cloud` enforces it
in place after every structural change while leaving the relative shape
vector, rotation, opacity and color untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

# floor for R~ relative to the scene scale, guards duplicate-point degeneracy
R_TILDE_FLOOR_FACTOR = 1e-8


@dataclass
class SceneScaleFactor:
    """Median nearest-neighbor distance over all primitives."""

    median_nn: float


@dataclass
class DensityEstimate:
    r_tilde: float
    density: float
    neighbor_ids: np.ndarray
    neighbor_dists: np.ndarray
    weights: np.ndarray


def knn(points, K: int):
    """Exact K nearest Euclidean neighbors per point, self excluded.

    Returns (ids[n, K], dists[n, K]) sorted by ascending distance, built via a
    KD-tree. Raises if the point count is not strictly greater than K; callers
    that can tolerate truncation should clamp K themselves (see rescale_cloud).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n <= K:
        raise ValueError(
            f"need more than K={K} points for KNN, got {n}; clamp K to at most n-1"
        )
    tree = cKDTree(pts)
    dists, ids = tree.query(pts, k=K + 1, workers=1)
    return ids[:, 1:].copy(), dists[:, 1:].copy()


def scene_scale(nn_dists: np.ndarray) -> SceneScaleFactor:
    return SceneScaleFactor(median_nn=float(np.median(nn_dists)))


def _weights(dists: np.ndarray, median_nn: float) -> np.ndarray:
    d1 = dists[..., :1]
    return np.exp(-(((dists - d1) / median_nn) ** 2))


def estimate_density(g_index: int, neighbor_dists: np.ndarray, scene: SceneScaleFactor,
                     dim: int = 2, neighbor_ids: np.ndarray | None = None) -> DensityEstimate:
    """Density estimate for one primitive from its sorted neighbor distances."""
    if scene.median_nn <= 0:
        raise ValueError("median nearest-neighbor distance must be positive")
    dists = np.asarray(neighbor_dists, dtype=np.float64)
    w = _weights(dists, scene.median_nn)
    r = float((w * dists).sum() / w.sum())
    r = max(r, R_TILDE_FLOOR_FACTOR * scene.median_nn)
    K = dists.shape[0]
    d = _density_from_r(r, K, dim)
    if neighbor_ids is None:
        neighbor_ids = np.arange(K)
    return DensityEstimate(r_tilde=r, density=d, neighbor_ids=neighbor_ids,
                           neighbor_dists=dists, weights=w)


def _density_from_r(r_tilde, K: int, dim: int):
    if dim == 3:
        return K / ((4.0 / 3.0) * np.pi * r_tilde**3)
    if dim == 2:
        return K / (np.pi * r_tilde**2)
    raise ValueError(f"dim must be 2 or 3, got {dim}")


def scale_from_density(est: DensityEstimate, theta: float) -> float:
    """The linked absolute scale s_a = theta * R~."""
    if est.r_tilde <= 0:
        raise ValueError("r_tilde must be positive")
    return theta * est.r_tilde


def density_stats(points, K: int, dim: int | None = None):
    """Vectorized R~ and D for a whole point set.

    Returns (r_tilde[n], density[n], scene). K is clamped to n-1 with a
    warning when the set is too small.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if dim is None:
        dim = pts.shape[1]
    K_eff = min(K, n - 1)
    if K_eff < K:
        log.warning("clamping K from %d to %d for a %d-point cloud", K, K_eff, n)
    if K_eff < 1:
        raise ValueError(f"cannot estimate density for a {n}-point cloud")
    _, dists = knn(pts, K_eff)
    scene = scene_scale(dists[:, 0])
    if scene.median_nn <= 0:
        # fully duplicated cloud; fall back to a unit scene scale
        scene = SceneScaleFactor(median_nn=1.0)
        log.warning("median nearest-neighbor distance is zero; using unit scene scale")
    w = _weights(dists, scene.median_nn)
    r = (w * dists).sum(axis=1) / w.sum(axis=1)
    np.maximum(r, R_TILDE_FLOOR_FACTOR * scene.median_nn, out=r)
    d = _density_from_r(r, K_eff, dim)
    return r, d, scene


def rescale_cloud(cloud, K: int, theta: float) -> None:
    """Enforce s_a = theta * R~ on every primitive of a 2D cloud, in place.

    Only the absolute scale changes; s_r, rot, alpha, color and mu are
    untouched. The computed (R~, D) pair is cached on the cloud.
    """
    r, d, _ = density_stats(cloud.mu, K, dim=2)
    cloud.set_s_a(theta * r)
    cloud.r_tilde = r
    cloud.density = d
