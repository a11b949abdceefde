"""Multi-view photometric consistency scoring and the scale-based filter.

Each primitive is scored on the views where it contributes most: 49 sample
points (8 directions x 6 radii plus the projected center) are placed by
S = r * D @ Sigma' + mu' on every selected view, weighted by the projected
Gaussian's value at each point, and a weighted SSIM between the reference
view's samples and every other selected view's samples gives the confidence.
Primitives scoring below tau_c are deleted; primitives visible in fewer than
two views are unscorable and always retained.
"""

from __future__ import annotations

import csv
import heapq
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .cloud import GaussianCloud
from .core import Gaussian2D, Projected2D, ViewSpec, project
from .metrics import C1, C2
from .render import footprint, project_cloud

log = logging.getLogger(__name__)

DIRECTIONS = np.array(
    [
        [np.sqrt(2.0) / 2.0, np.sqrt(2.0) / 2.0],
        [np.sqrt(2.0) / 2.0, -np.sqrt(2.0) / 2.0],
        [-np.sqrt(2.0) / 2.0, np.sqrt(2.0) / 2.0],
        [-np.sqrt(2.0) / 2.0, -np.sqrt(2.0) / 2.0],
        [1.0, 0.0],
        [-1.0, 0.0],
        [0.0, 1.0],
        [0.0, -1.0],
    ]
)
RADII = np.array([0.5, 1.0, 1.5, 2.0, 2.5, 3.0])


@dataclass
class SamplePattern:
    directions: np.ndarray = field(default_factory=lambda: DIRECTIONS.copy())
    radii: np.ndarray = field(default_factory=lambda: RADII.copy())

    @property
    def n_points(self) -> int:
        return self.directions.shape[0] * self.radii.shape[0] + 1


@dataclass
class ViewSamples:
    points: np.ndarray   # (49, 2) pixel coordinates
    weights: np.ndarray  # (49,) Gaussian values in (0, 1]


@dataclass
class ConfidenceScore:
    value: float
    contributing_views: list[int]


def sample_footprint(p: Projected2D, pattern: SamplePattern | None = None) -> ViewSamples:
    """Ellipse-aligned sample points r * (d @ Sigma') + mu' plus the center.

    The direction rows multiply Sigma' itself (not a square root), so the
    sample spread grows quadratically with the projected extent; weights are
    the projected Gaussian's values at the points (1 at the center).
    """
    pattern = pattern or SamplePattern()
    offsets = pattern.radii[:, None, None] * (pattern.directions @ p.sigma_p)[None, :, :]
    pts = offsets.reshape(-1, 2) + p.mu_p
    pts = np.concatenate([pts, p.mu_p[None, :]], axis=0)
    d = pts - p.mu_p
    Q = np.linalg.inv(p.sigma_p)
    q = np.einsum("ni,ij,nj->n", d, Q, d)
    return ViewSamples(points=pts, weights=np.exp(-0.5 * q))


def bilinear_read(image: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Edge-clamped bilinear color reads; points[..., 0] is x, [..., 1] is y."""
    H, W = image.shape[0], image.shape[1]
    x = np.clip(points[..., 0], 0.0, W - 1.0)
    y = np.clip(points[..., 1], 0.0, H - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    v00 = image[y0, x0]
    v01 = image[y0, x1]
    v10 = image[y1, x0]
    v11 = image[y1, x1]
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def view_contribution(g: Gaussian2D, view: ViewSpec) -> float:
    """Sum of alpha * G'(x) over the primitive's clipped footprint pixels."""
    p = project(g, view)
    box = footprint(p, (view.height, view.width))
    if box is None:
        return 0.0
    x0, x1, y0, y1 = box
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    dx = xs[None, :] - p.mu_p[0]
    dy = ys[:, None] - p.mu_p[1]
    Q = np.linalg.inv(p.sigma_p)
    q = Q[0, 0] * dx**2 + 2.0 * Q[0, 1] * dx * dy + Q[1, 1] * dy**2
    return float(g.alpha * np.exp(-0.5 * q).sum())


def cloud_contributions(cloud: GaussianCloud, views: list[ViewSpec]) -> np.ndarray:
    """(n, n_views) footprint contribution sums, via the batched kernel."""
    n = len(cloud)
    out = np.zeros((n, len(views)), dtype=np.float64)
    for vi, view in enumerate(views):
        mu_p, _, q3, boxes = project_cloud(cloud, view)
        col = np.zeros(n, dtype=np.float64)
        _kernels.footprint_sums(mu_p, q3, cloud.alpha, boxes,
                                view.height, view.width, col)
        out[:, vi] = col
    return out


def top_m_views(contributions, M: int) -> list[int]:
    """Ids of the M largest contributions, descending; ties favor lower ids."""
    c = np.asarray(contributions, dtype=np.float64)
    if M > c.size:
        log.warning("top_m_views: clamping M from %d to %d views", M, c.size)
        M = c.size
    return heapq.nlargest(M, range(c.size), key=lambda i: (c[i], -i))


def _weighted_moments(colors: np.ndarray, weights: np.ndarray):
    """Weighted mean and clamped variance over the sample axis.

    colors: (..., n_pts, 3); weights: (..., n_pts). Returns (mean, var)."""
    wsum = weights.sum(axis=-1)[..., None]
    mean = (weights[..., None] * colors).sum(axis=-2) / wsum
    second = (weights[..., None] * colors**2).sum(axis=-2) / wsum
    var = np.maximum(second - mean**2, 0.0)
    return mean, var


def weighted_ssim_batch(w1, col1, wi, coli) -> np.ndarray:
    """Vectorized weighted SSIM; leading axes broadcast, returns (...) floats.

    w1/wi: (..., n_pts) sample weights of the reference / other view;
    col1/coli: (..., n_pts, 3) color reads. The covariance term pairs samples
    positionally and is normalized by the reference weights only.
    """
    mu1, var1 = _weighted_moments(col1, w1)
    mui, vari = _weighted_moments(coli, wi)
    w1sum = w1.sum(axis=-1)[..., None]
    cross = (w1[..., None] * col1 * coli).sum(axis=-2) / w1sum
    cov = cross - mu1 * mui
    s = ((2.0 * mu1 * mui + C1) * (2.0 * cov + C2)) / (
        (mu1**2 + mui**2 + C1) * (var1 + vari + C2))
    return s.mean(axis=-1)


def weighted_ssim(s1: ViewSamples, s_i: ViewSamples, img1, img_i) -> float:
    """Weighted SSIM between two views' sample sets, averaged over channels."""
    if s1.points.shape != s_i.points.shape:
        raise ValueError("sample sets must have the same size")
    img1 = np.asarray(img1, dtype=np.float64)
    img_i = np.asarray(img_i, dtype=np.float64)
    col1 = bilinear_read(img1, s1.points)
    coli = bilinear_read(img_i, s_i.points)
    return float(weighted_ssim_batch(s1.weights, col1, s_i.weights, coli))


def confidence(g: Gaussian2D, views: list[ViewSpec], M: int,
               pattern: SamplePattern | None = None) -> ConfidenceScore | None:
    """Average weighted SSIM of the reference view against the other top views.

    Returns None (unscorable) when fewer than two views have positive
    contribution; such primitives are exempt from filtering.
    """
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    contribs = np.array([view_contribution(g, v) for v in views])
    positive = np.nonzero(contribs > 0)[0]
    if positive.size < 2:
        return None
    ranked_pos = top_m_views(contribs[positive], min(M, positive.size))
    ranked = [int(positive[i]) for i in ranked_pos]
    p_ref = project(g, views[ranked[0]])
    ref = sample_footprint(p_ref, pattern)
    terms = []
    for vid in ranked[1:]:
        p_i = project(g, views[vid])
        s_i = sample_footprint(p_i, pattern)
        terms.append(weighted_ssim(ref, s_i, views[ranked[0]].gt, views[vid].gt))
    return ConfidenceScore(value=float(np.mean(terms)), contributing_views=ranked)


def cloud_confidences(cloud: GaussianCloud, views: list[ViewSpec], M: int,
                      pattern: SamplePattern | None = None):
    """Batched confidence scores for a whole cloud.

    Returns (scores[n], scorable[n], ref_view[n]); scores are NaN where
    unscorable, ref_view is -1 there.
    """
    pattern = pattern or SamplePattern()
    n = len(cloud)
    n_views = len(views)
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    M = min(M, n_views)
    contribs = cloud_contributions(cloud, views)
    positive = contribs > 0
    scorable = positive.sum(axis=1) >= 2
    # rank views per primitive: by contribution descending, ties by lower id;
    # zero-contribution views are pushed to the back
    ids = np.arange(n_views)[None, :].repeat(n, axis=0)
    rank_key = np.where(positive, contribs, -np.inf)
    order = np.lexsort((ids, -rank_key), axis=1)

    # per-view sample geometry, computed once per (view, primitive)
    pts_all = np.zeros((n_views, n, pattern.n_points, 2))
    w_all = np.zeros((n_views, n, pattern.n_points))
    reads = np.zeros((n_views, n, pattern.n_points, 3))
    for vi, view in enumerate(views):
        mu_p, sigma_p, q3, _ = project_cloud(cloud, view)
        offs = np.einsum("r,dj,njk->nrdk", pattern.radii, pattern.directions, sigma_p)
        pts = offs.reshape(n, -1, 2) + mu_p[:, None, :]
        pts = np.concatenate([pts, mu_p[:, None, :]], axis=1)
        d = pts - mu_p[:, None, :]
        q = (q3[:, None, 0] * d[:, :, 0] ** 2
             + 2.0 * q3[:, None, 1] * d[:, :, 0] * d[:, :, 1]
             + q3[:, None, 2] * d[:, :, 1] ** 2)
        pts_all[vi] = pts
        w_all[vi] = np.exp(-0.5 * q)
        reads[vi] = bilinear_read(np.asarray(view.gt, dtype=np.float64), pts)

    scores = np.full(n, np.nan)
    ref_view = np.full(n, -1, dtype=np.int64)
    g_idx = np.arange(n)
    ref = order[:, 0]
    ref_view[scorable] = ref[scorable]
    acc = np.zeros(n)
    cnt = np.zeros(n)
    for pos in range(1, M):
        other = order[:, pos]
        valid = scorable & (rank_key[g_idx, other] > -np.inf)
        if not np.any(valid):
            continue
        gi = g_idx[valid]
        r = ref[gi]
        o = other[gi]
        s = weighted_ssim_batch(w_all[r, gi], reads[r, gi], w_all[o, gi], reads[o, gi])
        acc[gi] += s
        cnt[gi] += 1
    ok = scorable & (cnt > 0)
    scores[ok] = acc[ok] / cnt[ok]
    return scores, ok, ref_view


@dataclass
class FilterReport:
    n_deleted: int
    n_unscorable: int
    scores: np.ndarray
    ref_view: np.ndarray


def apply_filter(cloud: GaussianCloud, views: list[ViewSpec], M: int, tau_c: float,
                 accum=None, pattern: SamplePattern | None = None) -> FilterReport:
    """Delete scorable primitives with confidence < tau_c, in place.

    Unscorable primitives (seen in fewer than 2 views) are always retained;
    survivors are never mutated. A GradAccumulator may be passed to stay
    aligned with the compacted cloud.
    """
    if len(cloud) == 0:
        return FilterReport(0, 0, np.zeros(0), np.zeros(0, dtype=np.int64))
    scores, scorable, ref_view = cloud_confidences(cloud, views, M, pattern)
    remove = scorable & (scores < tau_c)
    report = FilterReport(
        n_deleted=int(remove.sum()),
        n_unscorable=int((~scorable).sum()),
        scores=scores,
        ref_view=ref_view,
    )
    if report.n_deleted:
        cloud.keep(~remove)
        if accum is not None:
            accum.keep(~remove)
    return report


def write_confidence_csv(path, scores: np.ndarray, ref_view: np.ndarray) -> None:
    """Per-primitive confidence dump: id, score (empty if unscorable), ref view."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "score", "reference_view"])
        for i, (s, r) in enumerate(zip(scores, ref_view)):
            w.writerow([i, "" if np.isnan(s) else f"{s:.17g}", int(r)])
