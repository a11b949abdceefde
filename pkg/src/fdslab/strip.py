"""The 1D color-strip experiment: uniform Gaussians fitting a striped band.

A ground-truth band of K colors (each occupying N/K positions) is rendered by
M uniformly placed Gaussians of fixed standard deviation S whose only
learnable parameter is a color vector. Colors live in the physical [0, 255]
box and are optimized by projected subgradient descent on the mean absolute
color difference, warm-started from the bounded least-squares solution.
Sweeping (M, S) and recording the converged loss reproduces the
density/scale trade-off heatmap: too few or too narrow Gaussians cannot
cover the band, too wide ones blur the color boundaries.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np
from scipy.optimize import lsq_linear

from .core import Gaussian1D
from .render import StripImage, render_strip, strip_loss


def strip_palette(k_colors: int) -> np.ndarray:
    """K maximally separated hues, quantized to [0, 255]."""
    cols = []
    for i in range(k_colors):
        r, g, b = colorsys.hsv_to_rgb(i / k_colors, 1.0, 1.0)
        cols.append([round(r * 255), round(g * 255), round(b * 255)])
    return np.array(cols, dtype=np.float64)


def make_strip_gt(k_colors: int, N: int) -> StripImage:
    """Piecewise-constant striped band: color j covers positions [j*N/K, (j+1)*N/K)."""
    palette = strip_palette(k_colors)
    idx = np.minimum((np.arange(N) * k_colors) // N, k_colors - 1)
    return StripImage(values=palette[idx])


def uniform_means(M: int, N: int) -> np.ndarray:
    """Uniform placement over the full band [0, N], endpoints included.

    A single Gaussian sits at the band center.
    """
    if M == 1:
        return np.array([N / 2.0])
    return np.linspace(0.0, float(N), M)


def make_strip_gaussians(M: int, S: float, N: int, colors: np.ndarray) -> list[Gaussian1D]:
    means = uniform_means(M, N)
    return [Gaussian1D(mean=float(means[m]), std=float(S), color=colors[m]) for m in range(M)]


@dataclass
class StripFitResult:
    loss: float
    colors: np.ndarray
    iterations: int
    converged: bool


def fit_strip_colors(gt: StripImage, M: int, S: float, lr: float = 0.5,
                     max_iters: int = 5000, check_every: int = 200,
                     loss_tol: float = 1e-4, lr_decay_tau: float = 1000.0,
                     channel_mode: str = "sum") -> StripFitResult:
    """Optimize only the colors of M uniform Gaussians against a target strip.

    Projected subgradient descent on the L1 loss with harmonically decayed
    learning rate lr / (1 + t / tau), colors clipped to [0, 255] after every
    step. Starts from the per-channel bounded least-squares solution, which
    lands near the optimum for any overlap regime; the subgradient phase then
    polishes toward the L1 optimum. Stops once the loss moved by less than
    loss_tol over check_every iterations. Fully deterministic.
    """
    N = gt.n
    means = uniform_means(M, N)
    pos = np.arange(N, dtype=np.float64)
    basis = np.exp(-((pos[:, None] - means[None, :]) ** 2) / (2.0 * S**2))  # (N, M)
    colors = np.empty((M, 3), dtype=np.float64)
    for ch in range(3):
        colors[:, ch] = lsq_linear(basis, gt.values[:, ch], bounds=(0.0, 255.0)).x

    denom = N if channel_mode == "sum" else N * 3
    prev_loss = np.inf
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        resid = basis @ colors - gt.values
        loss = float(np.abs(resid).sum(axis=1).mean()) if channel_mode == "sum" \
            else float(np.abs(resid).mean())
        if it % check_every == 0:
            if abs(prev_loss - loss) < loss_tol:
                converged = True
                break
            prev_loss = loss
        grad = basis.T @ np.sign(resid) / denom
        colors = np.clip(colors - (lr / (1.0 + it / lr_decay_tau)) * grad, 0.0, 255.0)

    rendered = basis @ colors
    final = strip_loss(StripImage(rendered), gt, channel_mode)
    return StripFitResult(loss=final, colors=colors, iterations=it, converged=converged)


@dataclass
class SweepResult:
    m_values: np.ndarray
    s_values: np.ndarray
    losses: np.ndarray       # (len(m), len(s))
    colors: list             # per-cell converged color arrays, row-major
    iterations: np.ndarray   # (len(m), len(s))


def strip_sweep(m_values, s_values, k_colors: int = 5, N: int = 100,
                max_iters: int = 5000, lr: float = 0.5,
                channel_mode: str = "sum", workers: int = 1) -> SweepResult:
    """Converged loss for every (M, S) cell; cells are independent."""
    m_values = np.asarray(list(m_values), dtype=np.int64)
    s_values = np.asarray(list(s_values), dtype=np.float64)
    gt = make_strip_gt(k_colors, N)
    losses = np.zeros((m_values.size, s_values.size))
    iters = np.zeros((m_values.size, s_values.size), dtype=np.int64)
    colors: list = [None] * (m_values.size * s_values.size)

    cells = [(mi, si) for mi in range(m_values.size) for si in range(s_values.size)]
    args = [(gt.values, int(m_values[mi]), float(s_values[si]), lr, max_iters, channel_mode)
            for mi, si in cells]

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_cell_worker, args, chunksize=8))
    else:
        results = [_cell_worker(a) for a in args]

    for (mi, si), res in zip(cells, results):
        losses[mi, si] = res.loss
        iters[mi, si] = res.iterations
        colors[mi * s_values.size + si] = res.colors
    return SweepResult(m_values=m_values, s_values=s_values, losses=losses,
                       colors=colors, iterations=iters)


def _cell_worker(args):
    values, M, S, lr, max_iters, channel_mode = args
    return fit_strip_colors(StripImage(values), M, S, lr=lr, max_iters=max_iters,
                            channel_mode=channel_mode)
