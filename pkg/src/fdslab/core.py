"""Anisotropic Gaussian primitives: covariance construction, evaluation, affine projection.

Primitives are 2D: the rotation is a single angle instead of a quaternion, and
views are plain affine maps (2x2 linear part + translation) carrying their own
ground-truth raster. Opacity and the relative-scale vector are stored
pre-activation so gradient steps can never leave the valid domain; the absolute
scale is stored in log space for the same reason.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidParameterError(ValueError):
    """A primitive parameter violates its domain (e.g. non-positive scale)."""


class InvalidViewError(ValueError):
    """A view's linear map is singular or otherwise unusable."""


class NumericalError(ArithmeticError):
    """A numerical operation failed (singular/ill-conditioned covariance)."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    out = np.log(y / (1.0 - y))
    if out.ndim == 0:
        return float(out)
    return out


def rotation_matrix(rot: float) -> np.ndarray:
    """2x2 rotation matrix for angle `rot` (radians, counter-clockwise)."""
    c, s = np.cos(rot), np.sin(rot)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def build_covariance(rot: float, s) -> np.ndarray:
    """Covariance R diag(s) diag(s)^T R^T of an anisotropic 2D Gaussian.

    `s` must have strictly positive components; the result is symmetric
    positive definite with eigenvalues {s1^2, s2^2}.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (2,):
        raise InvalidParameterError(f"scale vector must have 2 components, got shape {s.shape}")
    if not np.all(s > 0):
        raise InvalidParameterError(f"scale components must be positive, got {s}")
    R = rotation_matrix(rot)
    S = np.diag(s)
    cov = R @ S @ S.T @ R.T
    # exact symmetry, independent of the multiplication round-off path
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class Gaussian2D:
    """One anisotropic 2D primitive.

    `sr_raw` and `alpha_raw` are pre-activation values; `log_sa` stores the
    absolute scale in log space. Activated views are exposed as properties.
    `order_key` is the fixed compositing order surrogate for depth (smaller
    composites first); it is assigned once at creation and never reused.
    """

    mu: np.ndarray
    rot: float
    log_sa: float
    sr_raw: np.ndarray
    alpha_raw: float
    color: np.ndarray
    order_key: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64).reshape(2))
        object.__setattr__(self, "sr_raw", np.asarray(self.sr_raw, dtype=np.float64).reshape(2))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))

    @property
    def s_a(self) -> float:
        return float(np.exp(self.log_sa))

    @property
    def s_r(self) -> np.ndarray:
        return sigmoid(self.sr_raw)

    @property
    def alpha(self) -> float:
        return float(sigmoid(self.alpha_raw))

    @property
    def scales(self) -> np.ndarray:
        """Effective scale vector s = s_a * s_r (strictly positive)."""
        return self.s_a * self.s_r

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.rot, self.scales)


@dataclass(frozen=True)
class Gaussian1D:
    """Strip primitive: fixed mean/std, only the color is learnable."""

    mean: float
    std: float
    color: np.ndarray

    def __post_init__(self):
        if self.std <= 0:
            raise InvalidParameterError(f"std must be positive, got {self.std}")
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))


@dataclass(frozen=True)
class Projected2D:
    """A primitive pushed through a view: pixel-space center and covariance."""

    mu_p: np.ndarray
    sigma_p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu_p", np.asarray(self.mu_p, dtype=np.float64).reshape(2))
        object.__setattr__(self, "sigma_p", np.asarray(self.sigma_p, dtype=np.float64).reshape(2, 2))


@dataclass(frozen=True)
class ViewSpec:
    """An affine "camera": x_pixel = A @ x_world + t, plus its target raster.

    `gt` is a [H, W, 3] float array with channel values in [0, 255]. Views
    without a target (pure geometry) may pass gt=None.
    """

    A: np.ndarray
    t: np.ndarray
    gt: np.ndarray | None = None
    view_id: int = 0

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64).reshape(2, 2)
        t = np.asarray(self.t, dtype=np.float64).reshape(2)
        if abs(np.linalg.det(A)) < 1e-12:
            raise InvalidViewError(f"view linear map is singular: det={np.linalg.det(A)}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "t", t)
        if self.gt is not None:
            object.__setattr__(self, "gt", np.asarray(self.gt, dtype=np.float64))

    @property
    def height(self) -> int:
        if self.gt is None:
            raise InvalidViewError("view has no ground-truth raster")
        return self.gt.shape[0]

    @property
    def width(self) -> int:
        if self.gt is None:
            raise InvalidViewError("view has no ground-truth raster")
        return self.gt.shape[1]


def identity_view(gt: np.ndarray, view_id: int = 0) -> ViewSpec:
    return ViewSpec(A=np.eye(2), t=np.zeros(2), gt=gt, view_id=view_id)


def eval_gaussian(g: Gaussian2D, x) -> float:
    """Unnormalized Gaussian value exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)) in (0, 1]."""
    x = np.asarray(x, dtype=np.float64).reshape(2)
    cov = g.covariance
    return eval_quadform(cov, g.mu, x)


def eval_quadform(cov: np.ndarray, mu: np.ndarray, x: np.ndarray) -> float:
    d = x - mu
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if det <= 0 or not np.isfinite(det):
        cond = np.linalg.cond(cov)
        raise NumericalError(f"covariance is singular or indefinite (det={det}, cond={cond:.3e})")
    inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[1, 0], cov[0, 0]]], dtype=np.float64) / det
    q = float(d @ inv @ d)
    return float(np.exp(-0.5 * q))


def project(g: Gaussian2D, view: ViewSpec) -> Projected2D:
    """Push a primitive through an affine view: mu' = A mu + t, Sigma' = A Sigma A^T."""
    return project_cov(g.mu, g.covariance, view)


def project_cov(mu: np.ndarray, cov: np.ndarray, view: ViewSpec) -> Projected2D:
    mu_p = view.A @ mu + view.t
    sigma_p = view.A @ cov @ view.A.T
    sigma_p = 0.5 * (sigma_p + sigma_p.T)
    return Projected2D(mu_p=mu_p, sigma_p=sigma_p)
