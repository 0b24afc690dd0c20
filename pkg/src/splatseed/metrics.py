"""Image and point-cloud quality metrics."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

C1 = 0.01**2
C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class ShapeMismatch(ValueError):
    pass


class EmptyCloud(ValueError):
    pass


def _check(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} != {b.shape}")
    return a, b


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _window_size(shape) -> int:
    m = min(shape[0], shape[1])
    size = min(SSIM_WINDOW, m if m % 2 else m - 1)
    return max(size, 1)


def _filter_valid(img, w):
    """Separable filtering keeping only windows fully inside the image."""
    r = len(w) // 2
    out = ndimage.correlate1d(img, w, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, w, axis=1, mode="nearest")
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def _filter_valid_adjoint(g, w, shape):
    r = len(w) // 2
    full = np.zeros(shape)
    full[r : shape[0] - r, r : shape[1] - r] = g
    out = ndimage.correlate1d(full, w[::-1], axis=0, mode="constant")
    return ndimage.correlate1d(out, w[::-1], axis=1, mode="constant")


def _channels(a):
    return [a] if a.ndim == 2 else [a[..., c] for c in range(a.shape[2])]


def _ssim_channel(x, y, w, need_grad):
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w)
    syy = _filter_valid(y * y, w)
    sxy = _filter_valid(x * y, w)
    vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
    A1, A2 = 2 * mx * my + C1, 2 * cxy + C2
    B1, B2 = mx * mx + my * my + C1, vx + vy + C2
    S = A1 * A2 / (B1 * B2)
    if not need_grad:
        return S, None
    n = S.size
    # partials of S w.r.t. the filtered statistics (mx, sxx, sxy), scaled by 1/n for the mean
    d_mx = ((2 * my * A2 - 2 * my * A1) / (B1 * B2) - S * (2 * mx / B1 - 2 * mx / B2)) / n
    d_sxx = (-S / B2) / n
    d_sxy = (2 * A1 / (B1 * B2)) / n
    shape = x.shape
    grad = (
        _filter_valid_adjoint(d_mx, w, shape)
        + 2 * x * _filter_valid_adjoint(d_sxx, w, shape)
        + y * _filter_valid_adjoint(d_sxy, w, shape)
    )
    return S, grad


def ssim(a, b, return_grad: bool = False):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, data range 1).

    Windows are restricted to the image interior; for images smaller than
    the window the window shrinks to the largest odd size that fits. Color
    images average over channels. With ``return_grad`` also returns
    d ssim / d a.
    """
    a, b = _check(a, b)
    w = gaussian_window(_window_size(a.shape))
    chans_a, chans_b = _channels(a), _channels(b)
    vals, grads = [], []
    for x, y in zip(chans_a, chans_b):
        S, g = _ssim_channel(x, y, w, return_grad)
        vals.append(S.mean())
        grads.append(g)
    val = float(np.mean(vals))
    if not return_grad:
        return val
    k = len(chans_a)
    grad = grads[0] if a.ndim == 2 else np.stack(grads, axis=-1)
    return val, grad / k


def d_ssim(a, b) -> float:
    return 1.0 - ssim(a, b)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give +inf."""
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _as_points(c):
    p = getattr(c, "positions", c)
    p = np.asarray(p, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        raise EmptyCloud("chamfer distance needs two non-empty clouds")
    return p


def chamfer(cloud_a, cloud_b) -> float:
    """Symmetric mean nearest-neighbor distance (average of both directions)."""
    a, b = _as_points(cloud_a), _as_points(cloud_b)
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(da)) + float(np.mean(db)))


def chamfer_bruteforce(cloud_a, cloud_b) -> float:
    a, b = _as_points(cloud_a), _as_points(cloud_b)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))
