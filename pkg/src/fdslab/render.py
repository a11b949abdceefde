"""Forward rendering and analytic gradients.

Two render paths:

* 1D additive strips: colors of fixed Gaussians superimpose per position,
  `C(i) = sum_m c_m exp(-(i - mean_m)^2 / (2 std_m^2))`.
* 2D rasters: front-to-back alpha compositing `C = sum_k c_k a_k G'_k T_k`
  with transmittance `T_k = prod_{j<k} (1 - a_j G'_j)`, primitives ordered by
  their fixed compositing key, each contributing only inside its footprint
  (the 3-sigma bounding box of the projected covariance), and the background
  composited with the residual transmittance.

The training loss is `(1 - lam) * L1 + lam * (1 - SSIM)` where L1 is the mean
absolute difference over all pixel channels; `backward` returns analytic
gradients with respect to every stored parameter plus the projected-center
gradient norm consumed by density control. The subgradient of |.| at zero is
taken as 0, so a zero-residual scene has exactly zero L1 gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .cloud import GaussianCloud
from .core import Gaussian1D, NumericalError, Projected2D, ViewSpec, rotation_matrix
from .metrics import ssim_and_grad

TILE = _kernels.TILE


# ---------------------------------------------------------------------------
# image containers


@dataclass
class StripImage:
    """A 1D color strip: values[N, 3], channels in target range [0, 255]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != 3 or self.values.shape[0] < 1:
            raise ValueError(f"strip must be [N>=1, 3], got {self.values.shape}")

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class RasterImage:
    """A 2D raster: pixels[H, W, 3], channel values in [0, 255]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"raster must be [H, W, 3], got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class RenderOutput:
    image: RasterImage
    per_gaussian_blend_weight: np.ndarray
    transmittance: np.ndarray
    n_contrib: np.ndarray


@dataclass
class RenderConfig:
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t_min: float = 1e-4
    dtype: type = np.float64


@dataclass
class LossConfig:
    lam: float = 0.2  # weight of the (1 - SSIM) term


@dataclass
class Gradients:
    """d loss / d (stored parameters), aligned with the cloud arrays."""

    mu: np.ndarray
    rot: np.ndarray
    log_sa: np.ndarray
    sr_raw: np.ndarray
    alpha_raw: np.ndarray
    color: np.ndarray
    pos_grad_norm: np.ndarray  # ||dL/d mu_p||2 per primitive, projected space
    seen: np.ndarray           # footprint intersected the image


@dataclass
class BackwardResult:
    loss: float
    image: RasterImage
    grads: Gradients


# ---------------------------------------------------------------------------
# 1D strip path


def render_strip(gaussians: list[Gaussian1D], N: int) -> StripImage:
    """Additive superposition of 1D Gaussians sampled at i = 0..N-1."""
    if N < 1:
        raise ValueError(f"strip length must be >= 1, got {N}")
    pos = np.arange(N, dtype=np.float64)
    values = np.zeros((N, 3), dtype=np.float64)
    if gaussians:
        means = np.array([g.mean for g in gaussians], dtype=np.float64)
        stds = np.array([g.std for g in gaussians], dtype=np.float64)
        colors = np.stack([g.color for g in gaussians])
        basis = np.exp(-((pos[:, None] - means[None, :]) ** 2) / (2.0 * stds[None, :] ** 2))
        values = basis @ colors
    return StripImage(values=values)


def strip_loss(rendered: StripImage, gt: StripImage, channel_mode: str = "sum") -> float:
    """Mean over positions of per-position absolute color difference.

    channel_mode "sum" sums the 3 channel differences per position before
    averaging over N; "mean" averages them instead.
    """
    if rendered.values.shape != gt.values.shape:
        raise ValueError(f"shape mismatch: {rendered.values.shape} vs {gt.values.shape}")
    diff = np.abs(gt.values - rendered.values)
    if channel_mode == "sum":
        return float(diff.sum(axis=1).mean())
    if channel_mode == "mean":
        return float(diff.mean())
    raise ValueError(f"unknown channel_mode {channel_mode!r}")


# ---------------------------------------------------------------------------
# footprints and projection plumbing


def footprint(p: Projected2D, image_bounds: tuple[int, int]):
    """Clipped inclusive pixel box (x0, x1, y0, y1) of the 3-sigma ellipse.

    image_bounds is (height, width); pixel centers sit on integer coordinates.
    Returns None when the box misses the image entirely.
    """
    H, W = image_bounds
    sx = float(np.sqrt(p.sigma_p[0, 0]))
    sy = float(np.sqrt(p.sigma_p[1, 1]))
    x0 = int(np.floor(p.mu_p[0] - 3.0 * sx))
    x1 = int(np.ceil(p.mu_p[0] + 3.0 * sx))
    y0 = int(np.floor(p.mu_p[1] - 3.0 * sy))
    y1 = int(np.ceil(p.mu_p[1] + 3.0 * sy))
    x0, x1 = max(x0, 0), min(x1, W - 1)
    y0, y1 = max(y0, 0), min(y1, H - 1)
    if x1 < x0 or y1 < y0:
        return None
    return (x0, x1, y0, y1)


def footprint_pixel_count(box) -> int:
    if box is None:
        return 0
    x0, x1, y0, y1 = box
    return (x1 - x0 + 1) * (y1 - y0 + 1)


def project_cloud(cloud: GaussianCloud, view: ViewSpec):
    """Projected centers, covariances, inverse covariances and footprint boxes.

    Returns (mu_p[n,2], sigma_p[n,2,2], q3[n,3], boxes[n,4]); q3 packs the
    inverse covariance as (qa, qb, qc) for [[qa, qb], [qb, qc]]. Boxes are
    unclipped inclusive pixel bounds (x0, x1, y0, y1).
    """
    n = len(cloud)
    A = view.A
    cov = cloud.covariances()
    sigma_p = np.einsum("ij,njk,lk->nil", A, cov, A)
    sigma_p = 0.5 * (sigma_p + np.transpose(sigma_p, (0, 2, 1)))
    mu_p = cloud.mu @ A.T + view.t
    sa = sigma_p[:, 0, 0]
    sb = sigma_p[:, 0, 1]
    sc = sigma_p[:, 1, 1]
    det = sa * sc - sb * sb
    bad = ~(det > 0) | ~np.isfinite(det)
    if np.any(bad):
        idx = np.nonzero(bad)[0][:5]
        raise NumericalError(
            f"projected covariance singular/indefinite for primitives {idx.tolist()} "
            f"(det min={det.min():.3e})"
        )
    q3 = np.empty((n, 3), dtype=np.float64)
    q3[:, 0] = sc / det
    q3[:, 1] = -sb / det
    q3[:, 2] = sa / det
    sx = np.sqrt(sa)
    sy = np.sqrt(sc)
    boxes = np.empty((n, 4), dtype=np.int64)
    boxes[:, 0] = np.floor(mu_p[:, 0] - 3.0 * sx)
    boxes[:, 1] = np.ceil(mu_p[:, 0] + 3.0 * sx)
    boxes[:, 2] = np.floor(mu_p[:, 1] - 3.0 * sy)
    boxes[:, 3] = np.ceil(mu_p[:, 1] + 3.0 * sy)
    return mu_p, sigma_p, q3, boxes


def _seen_mask(boxes: np.ndarray, H: int, W: int) -> np.ndarray:
    return (
        (boxes[:, 1] >= 0) & (boxes[:, 0] <= W - 1)
        & (boxes[:, 3] >= 0) & (boxes[:, 2] <= H - 1)
        & (boxes[:, 1] >= boxes[:, 0]) & (boxes[:, 3] >= boxes[:, 2])
    )


# ---------------------------------------------------------------------------
# 2D raster path


def render_raster(cloud: GaussianCloud, view: ViewSpec, cfg: RenderConfig | None = None) -> RenderOutput:
    cfg = cfg or RenderConfig()
    H, W = view.height, view.width
    n = len(cloud)
    dt = cfg.dtype
    bgf = np.asarray(cfg.background, dtype=np.float64)
    if n == 0:
        image = np.tile(bgf, (H, W, 1))
        return RenderOutput(
            image=RasterImage(image),
            per_gaussian_blend_weight=np.zeros(0),
            transmittance=np.ones((H, W)),
            n_contrib=np.zeros((H, W), dtype=np.int32),
        )
    mu_p, _, q3, boxes = project_cloud(cloud, view)
    order = np.argsort(cloud.order_key, kind="stable").astype(np.int64)
    offsets, tidx = _kernels.bin_tiles(boxes, order, H, W)
    ty = (H + TILE - 1) // TILE
    image = np.zeros((H, W, 3), dtype=dt)
    T_fin = np.zeros((H, W), dtype=dt)
    n_contrib = np.zeros((H, W), dtype=np.int32)
    bw_rows = np.zeros((ty, n), dtype=dt)
    scratch_T = np.zeros((ty, TILE * TILE), dtype=dt)
    _kernels.forward(
        mu_p.astype(dt), q3.astype(dt), cloud.alpha.astype(dt), cloud.color.astype(dt),
        boxes, offsets, tidx, H, W, bgf.astype(dt), dt(cfg.t_min),
        1, image, T_fin, n_contrib, bw_rows, scratch_T,
    )
    return RenderOutput(
        image=RasterImage(image.astype(np.float64)),
        per_gaussian_blend_weight=bw_rows.astype(np.float64).sum(axis=0),
        transmittance=T_fin.astype(np.float64),
        n_contrib=n_contrib,
    )


def _loss_and_dldc(image: np.ndarray, gt: np.ndarray, lam: float):
    """Loss value and dL/dC for L = (1-lam) L1 + lam (1 - SSIM)."""
    resid = image - gt
    l1 = float(np.mean(np.abs(resid)))
    dldc = (1.0 - lam) * np.sign(resid) / resid.size
    if lam != 0.0:
        s, ds_dx = ssim_and_grad(image, gt)
        loss = (1.0 - lam) * l1 + lam * (1.0 - s)
        dldc = dldc - lam * ds_dx
    else:
        loss = l1
    return loss, dldc


def backward(cloud: GaussianCloud, view: ViewSpec, gt: RasterImage | np.ndarray,
             loss_cfg: LossConfig | None = None, cfg: RenderConfig | None = None) -> BackwardResult:
    """Render, evaluate the loss against gt, and backpropagate analytically."""
    loss_cfg = loss_cfg or LossConfig()
    cfg = cfg or RenderConfig()
    gt_arr = gt.pixels if isinstance(gt, RasterImage) else np.asarray(gt, dtype=np.float64)
    H, W = view.height, view.width
    if gt_arr.shape != (H, W, 3):
        raise ValueError(f"gt shape {gt_arr.shape} does not match view raster {(H, W, 3)}")
    n = len(cloud)
    dt = cfg.dtype
    bgf = np.asarray(cfg.background, dtype=np.float64)
    if n == 0:
        image = np.tile(bgf, (H, W, 1))
        loss, _ = _loss_and_dldc(image, gt_arr, loss_cfg.lam)
        z = np.zeros(0)
        grads = Gradients(np.zeros((0, 2)), z, z, np.zeros((0, 2)), z, np.zeros((0, 3)), z,
                          np.zeros(0, dtype=bool))
        return BackwardResult(loss=loss, image=RasterImage(image), grads=grads)

    mu_p, _, q3, boxes = project_cloud(cloud, view)
    order = np.argsort(cloud.order_key, kind="stable").astype(np.int64)
    offsets, tidx = _kernels.bin_tiles(boxes, order, H, W)
    ty = (H + TILE - 1) // TILE

    mu_p_k = mu_p.astype(dt)
    q3_k = q3.astype(dt)
    alpha = cloud.alpha
    alpha_k = alpha.astype(dt)
    color_k = cloud.color.astype(dt)
    bg_k = bgf.astype(dt)

    image = np.zeros((H, W, 3), dtype=dt)
    T_fin = np.zeros((H, W), dtype=dt)
    n_contrib = np.zeros((H, W), dtype=np.int32)
    bw_rows = np.zeros((ty, 1), dtype=dt)
    scratch_T = np.zeros((ty, TILE * TILE), dtype=dt)
    _kernels.forward(mu_p_k, q3_k, alpha_k, color_k, boxes, offsets, tidx, H, W,
                     bg_k, dt(cfg.t_min), 0, image, T_fin, n_contrib, bw_rows, scratch_T)

    image64 = image.astype(np.float64)
    loss, dldc = _loss_and_dldc(image64, gt_arr, loss_cfg.lam)

    grad_rows = np.zeros((ty, n, 9), dtype=dt)
    scratch_S = np.zeros((ty, TILE * TILE, 3), dtype=dt)
    _kernels.backward(mu_p_k, q3_k, alpha_k, color_k, boxes, offsets, tidx, H, W,
                      bg_k, dldc.astype(dt), T_fin, n_contrib, grad_rows, scratch_T, scratch_S)
    g = grad_rows.astype(np.float64).sum(axis=0)

    grads = _chain_to_parameters(cloud, view, q3, g)
    grads.seen = _seen_mask(boxes, H, W)
    return BackwardResult(loss=loss, image=RasterImage(image64), grads=grads)


def _chain_to_parameters(cloud: GaussianCloud, view: ViewSpec, q3: np.ndarray,
                         g: np.ndarray) -> Gradients:
    """Chain kernel-level gradients (color, activated alpha, mu_p, inverse
    covariance) back to the stored parameterization."""
    n = len(cloud)
    A = view.A
    g_color = g[:, 0:3]
    alpha = cloud.alpha
    g_alpha_raw = g[:, 3] * alpha * (1.0 - alpha)
    g_mu_p = g[:, 4:6]
    g_mu = g_mu_p @ A

    # full-matrix dL/dQ; the kernel folded the symmetric off-diagonal pair
    GQ = np.empty((n, 2, 2), dtype=np.float64)
    GQ[:, 0, 0] = g[:, 6]
    GQ[:, 0, 1] = 0.5 * g[:, 7]
    GQ[:, 1, 0] = 0.5 * g[:, 7]
    GQ[:, 1, 1] = g[:, 8]
    Q = np.empty((n, 2, 2), dtype=np.float64)
    Q[:, 0, 0] = q3[:, 0]
    Q[:, 0, 1] = q3[:, 1]
    Q[:, 1, 0] = q3[:, 1]
    Q[:, 1, 1] = q3[:, 2]
    dSigma_p = -np.einsum("nij,njk,nkl->nil", Q, GQ, Q)
    dSigma = np.einsum("ji,njk,kl->nil", A, dSigma_p, A)

    c, s = np.cos(cloud.rot), np.sin(cloud.rot)
    R = np.empty((n, 2, 2), dtype=np.float64)
    R[:, 0, 0] = c
    R[:, 0, 1] = -s
    R[:, 1, 0] = s
    R[:, 1, 1] = c
    Rd = np.empty((n, 2, 2), dtype=np.float64)
    Rd[:, 0, 0] = -s
    Rd[:, 0, 1] = -c
    Rd[:, 1, 0] = c
    Rd[:, 1, 1] = -s

    scales = cloud.scales
    P = np.einsum("nji,njk,nkl->nil", R, dSigma, R)
    g_s = 2.0 * scales * np.stack([P[:, 0, 0], P[:, 1, 1]], axis=1)
    S2 = scales**2
    RdS2Rt = np.einsum("nij,nj,nkj->nik", Rd, S2, R)
    g_rot = 2.0 * np.einsum("nij,nij->n", dSigma, RdS2Rt)

    s_r = cloud.s_r
    s_a = cloud.s_a
    g_log_sa = (g_s * scales).sum(axis=1)
    g_sr_raw = g_s * s_a[:, None] * s_r * (1.0 - s_r)

    return Gradients(
        mu=g_mu, rot=g_rot, log_sa=g_log_sa, sr_raw=g_sr_raw,
        alpha_raw=g_alpha_raw, color=g_color,
        pos_grad_norm=np.linalg.norm(g_mu_p, axis=1),
        seen=np.ones(n, dtype=bool),
    )
