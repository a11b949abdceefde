"""Gradient-statistics-driven density control: dynamic threshold, clone/split,
opacity reset and pruning.

The densification threshold is recomputed from the live gradient distribution:
histogram the per-primitive mean positional gradients over [grad_min,
3*grad_mean], walk bins from the largest downward until 25% of the population
is covered, and take that bin's lower edge, floored by the preset. Primitives
above the threshold are cloned when small (relative to the scene extent) or
split in two when large, mirroring the usual splatting control loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import GaussianCloud
from .core import inverse_sigmoid, rotation_matrix

HISTOGRAM_BINS = 256
SPLIT_CHILDREN = 2
SPLIT_SCALE_DIVISOR = 1.6  # 0.8 * number of children, as in the reference loop
PERCENT_DENSE = 0.01
EPS_ALPHA = 0.005
OPACITY_RESET_CEILING = 0.01


class GradAccumulator:
    """Running sums of projected positional-gradient norms and view counts."""

    def __init__(self, n: int):
        self.grad_sum = np.zeros(n, dtype=np.float64)
        self.count = np.zeros(n, dtype=np.int64)

    def __len__(self) -> int:
        return self.grad_sum.shape[0]

    def add(self, pos_grad_norm: np.ndarray, seen: np.ndarray) -> None:
        self.grad_sum[seen] += pos_grad_norm[seen]
        self.count[seen] += 1

    def mean_grads(self) -> np.ndarray:
        """Mean gradient per primitive; primitives never seen contribute 0."""
        out = np.zeros_like(self.grad_sum)
        m = self.count > 0
        out[m] = self.grad_sum[m] / self.count[m]
        return out

    def reset(self, n: int | None = None) -> None:
        if n is None:
            n = len(self)
        self.grad_sum = np.zeros(n, dtype=np.float64)
        self.count = np.zeros(n, dtype=np.int64)

    def keep(self, mask: np.ndarray) -> None:
        self.grad_sum = self.grad_sum[mask]
        self.count = self.count[mask]


@dataclass
class ThresholdStats:
    grad_min: float
    grad_mean: float
    grad_25: float
    tau_pos: float
    histogram: np.ndarray = field(repr=False)


def dynamic_threshold(mean_grads, grad_preset: float) -> ThresholdStats:
    """Histogram-quantile densification threshold tau_pos = max(grad_25, preset).

    grad_25 is the lower edge of the bin at which the cumulative count, walked
    from the largest bin downward, first reaches 25% of the population. Values
    above the histogram's upper edge (3 * mean) are clamped into the last bin.
    """
    g = np.asarray(mean_grads, dtype=np.float64)
    if g.size == 0:
        raise ValueError("empty gradient list")
    if np.any(g < 0):
        raise ValueError("gradients must be non-negative")
    gmin = float(g.min())
    gmean = float(g.mean())
    hi = 3.0 * gmean
    if hi <= gmin:
        # degenerate range (all zeros); the quantile is the common value
        hist = np.zeros(HISTOGRAM_BINS, dtype=np.int64)
        hist[0] = g.size
        g25 = gmin
        return ThresholdStats(gmin, gmean, g25, max(g25, grad_preset), hist)
    width = (hi - gmin) / HISTOGRAM_BINS
    idx = np.floor((g - gmin) / width).astype(np.int64)
    np.clip(idx, 0, HISTOGRAM_BINS - 1, out=idx)
    hist = np.bincount(idx, minlength=HISTOGRAM_BINS)
    target = 0.25 * g.size
    cum = 0
    g25 = gmin
    for b in range(HISTOGRAM_BINS - 1, -1, -1):
        cum += hist[b]
        if cum >= target:
            g25 = gmin + b * width
            break
    return ThresholdStats(gmin, gmean, float(g25), float(max(g25, grad_preset)), hist)


@dataclass
class DensifyReport:
    n_cloned: int
    n_split: int
    n_before: int
    n_after: int
    # mask over the grown array (originals + clones + children) that was kept;
    # lets callers remap any state aligned with the cloud (optimizer moments)
    keep_mask: np.ndarray = field(default=None, repr=False)


def densify(cloud: GaussianCloud, stats: ThresholdStats, accum: GradAccumulator,
            scene_extent: float, rng: np.random.Generator,
            max_gaussians: int | None = None) -> DensifyReport:
    """Clone/split primitives whose mean gradient exceeds tau_pos, in place.

    Small primitives (s_a * max(s_r) below PERCENT_DENSE * scene_extent) are
    cloned verbatim; large ones are replaced by SPLIT_CHILDREN children with
    positions drawn from the parent's own distribution and s_a divided by
    SPLIT_SCALE_DIVISOR. New primitives get fresh compositing keys, untouched
    primitives keep every attribute bitwise. The accumulator is reset after
    the pass.
    """
    n_before = len(cloud)
    mean_grads = accum.mean_grads()
    hot = mean_grads > stats.tau_pos
    if max_gaussians is not None and n_before + hot.sum() > max_gaussians:
        # safety valve: densify only the highest-gradient primitives
        budget = max(0, max_gaussians - n_before)
        order = np.argsort(-mean_grads, kind="stable")
        keep_hot = order[:budget]
        limited = np.zeros_like(hot)
        limited[keep_hot] = hot[keep_hot]
        hot = limited
    size = cloud.s_a * cloud.s_r.max(axis=1)
    small = size < PERCENT_DENSE * scene_extent
    clone_mask = hot & small
    split_mask = hot & ~small

    clone_idx = np.nonzero(clone_mask)[0]
    split_idx = np.nonzero(split_mask)[0]

    if clone_idx.size:
        cloud.append(
            cloud.mu[clone_idx], cloud.rot[clone_idx], cloud.log_sa[clone_idx],
            cloud.sr_raw[clone_idx], cloud.alpha_raw[clone_idx], cloud.color[clone_idx],
        )
    if split_idx.size:
        reps = np.repeat(split_idx, SPLIT_CHILDREN)
        scales = cloud.scales[reps]
        z = rng.standard_normal((reps.size, 2))
        c, s = np.cos(cloud.rot[reps]), np.sin(cloud.rot[reps])
        # x = mu + R diag(s) z  draws from N(mu, Sigma)
        local = scales * z
        dx = c * local[:, 0] - s * local[:, 1]
        dy = s * local[:, 0] + c * local[:, 1]
        mu_new = cloud.mu[reps] + np.stack([dx, dy], axis=1)
        log_sa_new = cloud.log_sa[reps] - np.log(SPLIT_SCALE_DIVISOR)
        cloud.append(mu_new, cloud.rot[reps], log_sa_new, cloud.sr_raw[reps],
                     cloud.alpha_raw[reps], cloud.color[reps])
    # drop split parents (their indices are in the original range)
    keep = np.ones(len(cloud), dtype=bool)
    keep[split_idx] = False
    cloud.keep(keep)
    accum.reset(len(cloud))
    return DensifyReport(
        n_cloned=int(clone_idx.size),
        n_split=int(split_idx.size),
        n_before=n_before,
        n_after=len(cloud),
        keep_mask=keep,
    )


@dataclass
class MaintenanceReport:
    n_pruned: int
    reset_applied: bool


def opacity_maintenance(cloud: GaussianCloud, iteration: int, eps_alpha: float = EPS_ALPHA,
                        reset_interval: int = 3000,
                        reset_ceiling: float = OPACITY_RESET_CEILING,
                        accum: GradAccumulator | None = None,
                        prune: bool = True) -> MaintenanceReport:
    """Opacity reset on its interval plus pruning of near-transparent primitives.

    At every `reset_interval` boundary the activated opacities are clamped
    down to `reset_ceiling` (stored via the inverse activation). At every call
    with prune=True, primitives with activated alpha below eps_alpha are
    removed; any passed accumulator is compacted alongside.
    """
    reset = reset_interval > 0 and iteration > 0 and iteration % reset_interval == 0
    if reset:
        alpha = cloud.alpha
        cloud.set_alpha(np.minimum(alpha, reset_ceiling))
    n_pruned = 0
    if prune:
        keep = cloud.alpha >= eps_alpha
        n_pruned = int((~keep).sum())
        if n_pruned:
            cloud.keep(keep)
            if accum is not None:
                accum.keep(keep)
    return MaintenanceReport(n_pruned=n_pruned, reset_applied=reset)
