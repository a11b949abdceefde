"""Image quality metrics on [0, 255] arrays: PSNR and windowed SSIM.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03 and
dynamic range 255, computed per channel on a zero-padded full-size map and
averaged. `ssim_and_grad` additionally returns the analytic gradient of the
mean SSIM with respect to the first image, for use inside the training loss.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

DATA_RANGE = 255.0
C1 = (0.01 * DATA_RANGE) ** 2
C2 = (0.03 * DATA_RANGE) ** 2


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


_WINDOW = gaussian_window()


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable windowed filter over the two leading (spatial) axes, zero pad."""
    out = correlate1d(img, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


def _as_float_3c(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    return img


def psnr(img1, img2, max_val: float = DATA_RANGE) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    a = np.asarray(img1, dtype=np.float64)
    b = np.asarray(img2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(max_val**2 / mse))


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    mu_x = _blur(x)
    mu_y = _blur(y)
    mxx = _blur(x * x)
    myy = _blur(y * y)
    mxy = _blur(x * y)
    sx = mxx - mu_x**2
    sy = myy - mu_y**2
    sxy = mxy - mu_x * mu_y
    n1 = 2.0 * mu_x * mu_y + C1
    n2 = 2.0 * sxy + C2
    d1 = mu_x**2 + mu_y**2 + C1
    d2 = sx + sy + C2
    return mu_x, mu_y, n1, n2, d1, d2


def ssim(img1, img2) -> float:
    """Mean windowed SSIM between two images (2D or HxWxC)."""
    x = _as_float_3c(img1)
    y = _as_float_3c(img2)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    _, _, n1, n2, d1, d2 = _ssim_terms(x, y)
    return float(np.mean(n1 * n2 / (d1 * d2)))


def ssim_and_grad(x, y):
    """Mean SSIM and d(mean SSIM)/dx, both on [0, 255] images of equal shape."""
    x = _as_float_3c(x)
    y = _as_float_3c(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mu_x, mu_y, n1, n2, d1, d2 = _ssim_terms(x, y)
    smap = n1 * n2 / (d1 * d2)
    inv_dd = 1.0 / (d1 * d2)
    # partials holding the raw second moments fixed
    d_mu = 2.0 * mu_y * (n2 - n1) * inv_dd - 2.0 * mu_x * smap * (1.0 / d1 - 1.0 / d2)
    d_mxx = -smap / d2
    d_mxy = 2.0 * n1 * inv_dd
    # adjoint of the (symmetric, zero-padded) window filter is the same filter
    grad = _blur(d_mu) + 2.0 * x * _blur(d_mxx) + y * _blur(d_mxy)
    grad /= smap.size
    return float(np.mean(smap)), grad
