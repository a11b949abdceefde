"""Struct-of-arrays container for a mutable collection of 2D Gaussian primitives.

The cloud owns the raw (pre-activation) parameter arrays plus the per-primitive
bookkeeping used by density control: accumulated positional-gradient norms,
observation counts, and the cached density estimate from the last rescale.
Structural mutations (append / delete) go through this class so compositing
order keys stay unique and callers can remap any aligned state of their own.
"""

from __future__ import annotations

import numpy as np

from .core import Gaussian2D, build_covariance, inverse_sigmoid, sigmoid

PARAM_NAMES = ("mu", "rot", "log_sa", "sr_raw", "alpha_raw", "color")


class GaussianCloud:
    def __init__(self, mu, rot, log_sa, sr_raw, alpha_raw, color, order_key=None):
        self.mu = np.ascontiguousarray(mu, dtype=np.float64).reshape(-1, 2)
        n = self.mu.shape[0]
        self.rot = np.ascontiguousarray(rot, dtype=np.float64).reshape(n)
        self.log_sa = np.ascontiguousarray(log_sa, dtype=np.float64).reshape(n)
        self.sr_raw = np.ascontiguousarray(sr_raw, dtype=np.float64).reshape(n, 2)
        self.alpha_raw = np.ascontiguousarray(alpha_raw, dtype=np.float64).reshape(n)
        self.color = np.ascontiguousarray(color, dtype=np.float64).reshape(n, 3)
        if order_key is None:
            order_key = np.arange(n, dtype=np.float64)
        self.order_key = np.ascontiguousarray(order_key, dtype=np.float64).reshape(n)
        self._next_key = float(self.order_key.max()) + 1.0 if n else 0.0
        # cached per-Gaussian density info, filled by density.rescale_cloud
        self.r_tilde = None
        self.density = None

    def __len__(self) -> int:
        return self.mu.shape[0]

    # ---- activated views -------------------------------------------------

    @property
    def s_a(self) -> np.ndarray:
        return np.exp(self.log_sa)

    @property
    def s_r(self) -> np.ndarray:
        return sigmoid(self.sr_raw)

    @property
    def alpha(self) -> np.ndarray:
        return sigmoid(self.alpha_raw)

    @property
    def scales(self) -> np.ndarray:
        """Effective per-axis scale vectors s = s_a * s_r, shape (n, 2)."""
        return self.s_a[:, None] * self.s_r

    def covariances(self) -> np.ndarray:
        """(n, 2, 2) world-space covariances R S S^T R^T."""
        c, s = np.cos(self.rot), np.sin(self.rot)
        sc = self.scales
        s1sq, s2sq = sc[:, 0] ** 2, sc[:, 1] ** 2
        cov = np.empty((len(self), 2, 2), dtype=np.float64)
        cov[:, 0, 0] = c * c * s1sq + s * s * s2sq
        cov[:, 1, 1] = s * s * s1sq + c * c * s2sq
        cov[:, 0, 1] = c * s * (s1sq - s2sq)
        cov[:, 1, 0] = cov[:, 0, 1]
        return cov

    def gaussian(self, i: int) -> Gaussian2D:
        return Gaussian2D(
            mu=self.mu[i].copy(),
            rot=float(self.rot[i]),
            log_sa=float(self.log_sa[i]),
            sr_raw=self.sr_raw[i].copy(),
            alpha_raw=float(self.alpha_raw[i]),
            color=self.color[i].copy(),
            order_key=float(self.order_key[i]),
        )

    def set_s_a(self, s_a: np.ndarray) -> None:
        """Overwrite the absolute scale (positive values, stored as log)."""
        s_a = np.asarray(s_a, dtype=np.float64)
        if np.any(s_a <= 0):
            raise ValueError("absolute scale must stay positive")
        self.log_sa = np.log(s_a)

    def set_alpha(self, alpha: np.ndarray) -> None:
        self.alpha_raw = inverse_sigmoid(np.asarray(alpha, dtype=np.float64))

    # ---- structural mutation ---------------------------------------------

    def fresh_keys(self, count: int) -> np.ndarray:
        keys = self._next_key + np.arange(count, dtype=np.float64)
        self._next_key += count
        return keys

    def append(self, mu, rot, log_sa, sr_raw, alpha_raw, color) -> None:
        """Append new primitives; they receive fresh compositing keys."""
        mu = np.asarray(mu, dtype=np.float64).reshape(-1, 2)
        m = mu.shape[0]
        self.mu = np.concatenate([self.mu, mu])
        self.rot = np.concatenate([self.rot, np.asarray(rot, dtype=np.float64).reshape(m)])
        self.log_sa = np.concatenate([self.log_sa, np.asarray(log_sa, dtype=np.float64).reshape(m)])
        self.sr_raw = np.concatenate([self.sr_raw, np.asarray(sr_raw, dtype=np.float64).reshape(m, 2)])
        self.alpha_raw = np.concatenate([self.alpha_raw, np.asarray(alpha_raw, dtype=np.float64).reshape(m)])
        self.color = np.concatenate([self.color, np.asarray(color, dtype=np.float64).reshape(m, 3)])
        self.order_key = np.concatenate([self.order_key, self.fresh_keys(m)])
        self.r_tilde = None
        self.density = None

    def keep(self, mask: np.ndarray) -> None:
        """Keep only primitives where mask is True."""
        mask = np.asarray(mask, dtype=bool)
        self.mu = self.mu[mask]
        self.rot = self.rot[mask]
        self.log_sa = self.log_sa[mask]
        self.sr_raw = self.sr_raw[mask]
        self.alpha_raw = self.alpha_raw[mask]
        self.color = self.color[mask]
        self.order_key = self.order_key[mask]
        if self.r_tilde is not None:
            self.r_tilde = self.r_tilde[mask]
            self.density = self.density[mask]

    def copy(self) -> "GaussianCloud":
        c = GaussianCloud(
            self.mu.copy(), self.rot.copy(), self.log_sa.copy(),
            self.sr_raw.copy(), self.alpha_raw.copy(), self.color.copy(),
            self.order_key.copy(),
        )
        c._next_key = self._next_key
        if self.r_tilde is not None:
            c.r_tilde = self.r_tilde.copy()
            c.density = self.density.copy()
        return c

    @staticmethod
    def empty() -> "GaussianCloud":
        return GaussianCloud(
            np.zeros((0, 2)), np.zeros(0), np.zeros(0),
            np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)),
        )
