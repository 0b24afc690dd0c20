"""Software Gaussian splatting: forward rendering, analytic gradients, training.

Every primitive projects to a 2D Gaussian (first-order EWA) and is
composited front to back by camera-space depth of its mean. Footprints are
truncated at 3 sigma. The rasterizer works on the sparse list of
(primitive, pixel) pairs inside each footprint; pairs are sorted by pixel
and depth, and one compiled pass over them composites the image (and, in
reverse, accumulates the gradients).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy.spatial import cKDTree

from .cloud import ColoredPointCloud, Provenance
from .geometry import CameraModel
from .metrics import ShapeMismatch, ssim

logger = logging.getLogger(__name__)

NEAR = 1e-2
CUTOFF_SQ = 9.0  # 3 sigma
PRUNE_OPACITY = 0.005
SPLIT_FACTOR = 1.6
ALPHA_MAX = 1.0 - 1e-9  # keeps log(1 - alpha) finite for saturated opacity


class EmptySeed(ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - z * w)
    R[:, 0, 2] = 2 * (x * z + y * w)
    R[:, 1, 0] = 2 * (x * y + z * w)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - x * w)
    R[:, 2, 0] = 2 * (x * z - y * w)
    R[:, 2, 1] = 2 * (y * z + x * w)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _rotmat_quat_vjp(q: np.ndarray, gR: np.ndarray) -> np.ndarray:
    """Pull a gradient on R(q / |q|) back to the raw quaternion q."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn.T
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    gy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    gz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
        + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    gq = np.stack([gw, gx, gy, gz], axis=1)
    return (gq - qn * np.sum(qn * gq, axis=1, keepdims=True)) / norm


@dataclass
class GaussianPrimitive:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    dc_color: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("scales must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError("opacity must lie strictly inside (0, 1)")


PARAM_NAMES = ("means", "log_scales", "quats", "opacity_logits", "colors")


@dataclass
class GaussianField:
    """Primitive parameters in their optimization space (log scale, opacity logit, raw quaternion)."""

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        self.means = np.asarray(self.means, float).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(self.log_scales, float).reshape(n, 3)
        self.quats = np.asarray(self.quats, float).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, float).reshape(n)
        self.colors = np.asarray(self.colors, float).reshape(n, 3)

    def __len__(self) -> int:
        return len(self.means)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def unit_quats(self) -> np.ndarray:
        return self.quats / np.linalg.norm(self.quats, axis=1, keepdims=True)

    @classmethod
    def from_primitives(cls, prims: Sequence[GaussianPrimitive]) -> "GaussianField":
        return cls(
            means=[p.mean for p in prims],
            log_scales=np.log([p.scale for p in prims]),
            quats=[np.asarray(p.rotation, float) / np.linalg.norm(p.rotation) for p in prims],
            opacity_logits=logit([p.opacity for p in prims]),
            colors=[p.dc_color for p in prims],
        )

    def primitives(self) -> list:
        s, q, o = self.scales, self.unit_quats, self.opacities
        return [GaussianPrimitive(self.means[i], s[i], q[i], float(o[i]), self.colors[i]) for i in range(len(self))]

    def copy(self) -> "GaussianField":
        return GaussianField(*(getattr(self, k).copy() for k in PARAM_NAMES), iteration=self.iteration)

    def subset(self, idx) -> "GaussianField":
        return GaussianField(*(getattr(self, k)[idx] for k in PARAM_NAMES), iteration=self.iteration)

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def covariances(self) -> np.ndarray:
        M = quats_to_rotmats(self.quats) * self.scales[:, None, :]
        return M @ np.transpose(M, (0, 2, 1))


# --- forward ------------------------------------------------------------------


@dataclass
class Projection:
    visible: np.ndarray  # indices of primitives with positive depth
    pc: np.ndarray  # camera-frame means of visible primitives
    uv: np.ndarray
    J: np.ndarray
    cov_cam: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    M: np.ndarray
    Rq: np.ndarray


@dataclass
class Raster:
    """Pairs of (visible primitive slot, pixel) in per-pixel front-to-back order."""

    slot: np.ndarray
    pix: np.ndarray


def _project(field: GaussianField, cam: CameraModel) -> Projection:
    W = cam.R
    pc_all = field.means @ W.T + cam.t
    vis = np.flatnonzero(pc_all[:, 2] > NEAR)
    pc = pc_all[vis]
    k = cam.intrinsics
    x, y, z = pc.T
    uv = np.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy], axis=1)
    J = np.zeros((len(vis), 2, 3))
    J[:, 0, 0] = k.fx / z
    J[:, 0, 2] = -k.fx * x / (z * z)
    J[:, 1, 1] = k.fy / z
    J[:, 1, 2] = -k.fy * y / (z * z)
    Rq = quats_to_rotmats(field.quats[vis])
    M = Rq * np.exp(field.log_scales[vis])[:, None, :]
    cov = M @ np.transpose(M, (0, 2, 1))
    cov_cam = W @ cov @ W.T
    cov2d = J @ cov_cam @ np.transpose(J, (0, 2, 1))
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    det = np.where(det > 1e-30, det, 1e-30)
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det
    conic[:, 1, 1] = a / det
    conic[:, 0, 1] = conic[:, 1, 0] = -b / det
    return Projection(vis, pc, uv, J, cov_cam, cov2d, conic, M, Rq)


@njit(cache=True)
def _emit_pairs(order, u, v, qa, qb, qc, x0, x1, y0, y1, width, n_pix):
    """Pixel-major pairs; visiting primitives in depth order keeps each pixel's list sorted."""
    counts = np.zeros(n_pix + 1, dtype=np.int64)
    for s in order:
        for py in range(y0[s], y1[s] + 1):
            for px in range(x0[s], x1[s] + 1):
                dx = px - u[s]
                dy = py - v[s]
                if qa[s] * dx * dx + 2.0 * qb[s] * dx * dy + qc[s] * dy * dy <= CUTOFF_SQ:
                    counts[py * width + px + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    slot = np.empty(offsets[-1], dtype=np.int64)
    pix = np.empty(offsets[-1], dtype=np.int64)
    for s in order:
        for py in range(y0[s], y1[s] + 1):
            for px in range(x0[s], x1[s] + 1):
                dx = px - u[s]
                dy = py - v[s]
                if qa[s] * dx * dx + 2.0 * qb[s] * dx * dy + qc[s] * dy * dy <= CUTOFF_SQ:
                    p = py * width + px
                    slot[fill[p]] = s
                    pix[fill[p]] = p
                    fill[p] += 1
    return slot, pix


def _rasterize(proj: Projection, width: int, height: int) -> Raster:
    cov = proj.cov2d
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    r = 3.0 * np.sqrt(np.maximum(lam, 0.0))
    u, v = proj.uv[:, 0].copy(), proj.uv[:, 1].copy()
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.ceil(u - r), 0, width).astype(np.int64)
        x1 = np.clip(np.floor(u + r), -1, width - 1).astype(np.int64)
        y0 = np.clip(np.ceil(v - r), 0, height).astype(np.int64)
        y1 = np.clip(np.floor(v + r), -1, height - 1).astype(np.int64)
    # front-to-back: depth of the primitive's mean, ties by primitive index
    order = np.lexsort((proj.visible, proj.pc[:, 2])).astype(np.int64)
    q = proj.conic
    slot, pix = _emit_pairs(order, u, v, q[:, 0, 0].copy(), q[:, 0, 1].copy(), q[:, 1, 1].copy(),
                            x0, x1, y0, y1, width, width * height)
    return Raster(slot, pix)


@njit(cache=True)
def _composite(slot, pix, width, u, v, qa, qb, qc, opac, cols, n_pix):
    """Front-to-back alpha compositing over pixel-sorted pairs."""
    n = len(slot)
    dx = np.empty(n)
    dy = np.empty(n)
    gauss = np.empty(n)
    alpha = np.empty(n)
    T = np.empty(n)
    img = np.zeros((n_pix, 3))
    t = 1.0
    prev = -1
    for i in range(n):
        p = pix[i]
        if p != prev:
            t = 1.0
            prev = p
        s = slot[i]
        x = p % width - u[s]
        y = p // width - v[s]
        g = math.exp(-0.5 * (qa[s] * x * x + 2.0 * qb[s] * x * y + qc[s] * y * y))
        a = min(opac[s] * g, ALPHA_MAX)
        dx[i] = x
        dy[i] = y
        gauss[i] = g
        alpha[i] = a
        T[i] = t
        w = a * t
        for c in range(3):
            img[p, c] += w * cols[s, c]
        t *= 1.0 - a
    return dx, dy, gauss, alpha, T, img


@njit(cache=True)
def _composite_vjp(slot, pix, dx, dy, gauss, alpha, T, cols, G, qa, qb, qc, nv):
    """Back-to-front pass: per-primitive gradients of color, opacity, 2D mean and conic."""
    g_col = np.zeros((nv, 3))
    g_op = np.zeros(nv)
    g_u = np.zeros(nv)
    g_v = np.zeros(nv)
    gq = np.zeros((nv, 3))  # d/d conic entries (00, 01 and 10 together, 11)
    behind = np.zeros(3)
    prev = -1
    for i in range(len(slot) - 1, -1, -1):
        p = pix[i]
        if p != prev:
            behind[:] = 0.0
            prev = p
        s = slot[i]
        a = alpha[i]
        t = T[i]
        w = a * t
        dla = 0.0
        for c in range(3):
            dla += G[p, c] * (cols[s, c] * t - behind[c] / (1.0 - a))
            g_col[s, c] += G[p, c] * w
            behind[c] += cols[s, c] * w
        g_op[s] += dla * gauss[i]
        dd2 = -0.5 * a * dla
        x = dx[i]
        y = dy[i]
        g_u[s] -= 2.0 * dd2 * (qa[s] * x + qb[s] * y)
        g_v[s] -= 2.0 * dd2 * (qb[s] * x + qc[s] * y)
        gq[s, 0] += dd2 * x * x
        gq[s, 1] += dd2 * x * y
        gq[s, 2] += dd2 * y * y
    return g_col, g_op, g_u, g_v, gq


@dataclass
class RenderCache:
    field_size: int
    proj: Projection
    raster: Raster
    dx: np.ndarray
    dy: np.ndarray
    alpha: np.ndarray
    gauss: np.ndarray
    T: np.ndarray
    width: int
    height: int
    image: np.ndarray


def render(
    field: GaussianField,
    camera: CameraModel,
    return_cache: bool = False,
    raster: Optional[Raster] = None,
):
    """Alpha-composite the field into an H x W x 3 image on a black background.

    Passing the ``raster`` of an earlier render freezes the footprint pairs
    and depth order, which makes the image a smooth function of the
    parameters (used by the finite-difference checks).
    """
    w, h = camera.width, camera.height
    proj = _project(field, camera)
    if raster is None:
        raster = _rasterize(proj, w, h)
    conic = proj.conic
    opac = sigmoid(field.opacity_logits[proj.visible])
    dx, dy, gauss, alpha, T, img = _composite(
        raster.slot, raster.pix, w, proj.uv[:, 0].copy(), proj.uv[:, 1].copy(),
        conic[:, 0, 0].copy(), conic[:, 0, 1].copy(), conic[:, 1, 1].copy(),
        opac, np.ascontiguousarray(field.colors[proj.visible]), h * w,
    )
    img = img.reshape(h, w, 3)
    if not return_cache:
        return img
    cache = RenderCache(len(field), proj, raster, dx, dy, alpha, gauss, T, w, h, img)
    return img, cache


def accumulated_alpha(field: GaussianField, camera: CameraModel) -> np.ndarray:
    """Per-pixel 1 - final transmittance."""
    white = field.copy()
    white.colors = np.ones_like(white.colors)
    return render(white, camera)[..., 0]


# --- loss ---------------------------------------------------------------------


def photometric_loss(rendered, gt, lambda_ssim: float = 0.2, beta: float = 0.0, field: Optional[GaussianField] = None):
    """(1 - lambda) * mean L1 + lambda * (1 - SSIM), plus beta * mean primitive scale."""
    rendered = np.asarray(rendered, float)
    gt = np.asarray(gt, float)
    if rendered.shape != gt.shape:
        raise ShapeMismatch(f"{rendered.shape} != {gt.shape}")
    loss = (1.0 - lambda_ssim) * float(np.mean(np.abs(rendered - gt)))
    if lambda_ssim > 0:
        loss += lambda_ssim * (1.0 - ssim(rendered, gt))
    if beta > 0 and field is not None and len(field):
        loss += beta * float(np.mean(np.sum(field.scales, axis=1)))
    return loss


def _loss_and_image_grad(rendered, gt, lambda_ssim):
    n = rendered.size
    diff = rendered - gt
    loss = (1.0 - lambda_ssim) * float(np.mean(np.abs(diff)))
    grad = (1.0 - lambda_ssim) * np.sign(diff) / n
    if lambda_ssim > 0:
        val, g = ssim(rendered, gt, return_grad=True)
        loss += lambda_ssim * (1.0 - val)
        grad = grad - lambda_ssim * g
    return loss, grad


# --- backward -----------------------------------------------------------------


@dataclass
class Gradients:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    screen: np.ndarray  # |dL/d(u, v)| per primitive, pixel units
    visible: np.ndarray  # bool mask of primitives touching at least one pixel

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}


def backward_from_image_grad(field: GaussianField, camera: CameraModel, cache: RenderCache, grad_img: np.ndarray) -> Gradients:
    """Vector-Jacobian product of :func:`render` for an upstream dL/d(image)."""
    n = len(field)
    proj, ras = cache.proj, cache.raster
    s, pix = ras.slot, ras.pix
    nv = len(proj.visible)
    vis = proj.visible
    conic = proj.conic
    g_colors_v, dL_dop, g_u, g_v, gq3 = _composite_vjp(
        s, pix, cache.dx, cache.dy, cache.gauss, cache.alpha, cache.T,
        np.ascontiguousarray(field.colors[vis]), np.ascontiguousarray(grad_img.reshape(-1, 3)),
        conic[:, 0, 0].copy(), conic[:, 0, 1].copy(), conic[:, 1, 1].copy(), nv,
    )
    opac = sigmoid(field.opacity_logits[vis])
    g_logit_v = dL_dop * opac * (1.0 - opac)
    gq = np.zeros((nv, 2, 2))
    gq[:, 0, 0] = gq3[:, 0]
    gq[:, 1, 1] = gq3[:, 2]
    gq[:, 0, 1] = gq[:, 1, 0] = gq3[:, 1]

    g_cov2d = -conic @ gq @ conic
    J = proj.J
    Jt = np.transpose(J, (0, 2, 1))
    g_cov_cam = Jt @ g_cov2d @ J
    g_J = 2.0 * g_cov2d @ J @ proj.cov_cam
    W = camera.R
    g_cov = W.T @ g_cov_cam @ W
    g_M = 2.0 * g_cov @ proj.M
    scales = np.exp(field.log_scales[vis])
    g_Rq = g_M * scales[:, None, :]
    g_scale = np.sum(g_M * proj.Rq, axis=1)
    g_logscale_v = g_scale * scales
    g_quat_v = _rotmat_quat_vjp(field.quats[vis], g_Rq)

    k = camera.intrinsics
    x, y, z = proj.pc.T
    g_pc = np.zeros((nv, 3))
    g_pc[:, 0] = g_u * k.fx / z + g_J[:, 0, 2] * (-k.fx / (z * z))
    g_pc[:, 1] = g_v * k.fy / z + g_J[:, 1, 2] * (-k.fy / (z * z))
    g_pc[:, 2] = (
        -g_u * k.fx * x / (z * z)
        - g_v * k.fy * y / (z * z)
        - g_J[:, 0, 0] * k.fx / (z * z)
        + g_J[:, 0, 2] * 2 * k.fx * x / z**3
        - g_J[:, 1, 1] * k.fy / (z * z)
        + g_J[:, 1, 2] * 2 * k.fy * y / z**3
    )
    g_means_v = g_pc @ W

    def scatter(vals, shape):
        out = np.zeros((n,) + shape)
        out[vis] = vals
        return out

    touched = np.zeros(n, dtype=bool)
    touched[vis[np.bincount(s, minlength=nv) > 0]] = True
    return Gradients(
        means=scatter(g_means_v, (3,)),
        log_scales=scatter(g_logscale_v, (3,)),
        quats=scatter(g_quat_v, (4,)),
        opacity_logits=scatter(g_logit_v, ()),
        colors=scatter(g_colors_v, (3,)),
        screen=scatter(np.hypot(g_u, g_v), ()),
        visible=touched,
    )


def backward(
    field: GaussianField,
    camera: CameraModel,
    gt: np.ndarray,
    lambda_ssim: float = 0.2,
    beta: float = 0.0,
    raster: Optional[Raster] = None,
):
    """Loss and analytic gradients of :func:`photometric_loss` for one view."""
    img, cache = render(field, camera, return_cache=True, raster=raster)
    loss, gimg = _loss_and_image_grad(img, np.asarray(gt, float), lambda_ssim)
    grads = backward_from_image_grad(field, camera, cache, gimg)
    if beta > 0 and len(field):
        sc = field.scales
        loss += beta * float(np.mean(np.sum(sc, axis=1)))
        grads.log_scales = grads.log_scales + beta * sc / len(field)
    return loss, grads


# --- optimization -------------------------------------------------------------


@dataclass
class TrainConfig:
    max_steps: int = 1000
    downsample_factor: int = 2
    lambda_ssim: float = 0.2
    beta: float = 0.0
    densify_interval: int = 100
    densify_from: int = 100
    densify_until: int = 800
    densify_grad_threshold: float = 2e-4
    split_scale_fraction: float = 0.01
    plateau_window: int = 200
    plateau_growth: float = 0.01
    lr_means: float = 1.6e-3
    lr_means_final: float = 1.6e-5
    lr_log_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-2
    init_opacity: float = 0.1
    max_primitives: int = 20000
    seed: int = 42

    def __post_init__(self):
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError("lambda_ssim must lie in [0, 1]")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")


class Adam:
    def __init__(self, lrs: dict, betas=(0.9, 0.999), eps=1e-15):
        self.lrs = dict(lrs)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, field: GaussianField, grads: dict) -> None:
        self.t += 1
        for k, g in grads.items():
            lr = self.lrs.get(k, 0.0)
            if lr == 0.0:
                continue
            p = getattr(field, k)
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1**self.t)
            vh = v / (1 - self.b2**self.t)
            p -= lr * mh / (np.sqrt(vh) + self.eps)

    def remap(self, keep: np.ndarray, n_new_from: Optional[np.ndarray] = None) -> None:
        """Reindex moment buffers after densification; new rows start at zero."""
        for buf in (self.m, self.v):
            for k, arr in buf.items():
                kept = arr[keep]
                if n_new_from is not None and len(n_new_from):
                    kept = np.concatenate([kept, np.zeros((len(n_new_from),) + arr.shape[1:])])
                buf[k] = kept


@dataclass
class GradStats:
    accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradStats":
        return cls(np.zeros(n), np.zeros(n))

    def add(self, g: Gradients) -> None:
        self.accum[g.visible] += g.screen[g.visible]
        self.count[g.visible] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.accum / np.maximum(self.count, 1), 0.0)


def densify(
    field: GaussianField,
    grad_stats: GradStats,
    grad_threshold: float = 2e-4,
    split_scale: float = 0.01,
    rng: Optional[np.random.Generator] = None,
    prune_opacity: float = PRUNE_OPACITY,
    max_primitives: Optional[int] = None,
):
    """Clone small / split large high-gradient primitives, then prune transparent ones.

    A primitive is large when its largest axis exceeds ``split_scale``
    (scene units). Split children draw their means inside the parent's
    1-sigma ellipsoid and shrink every axis by 1.6. Returns the new field
    and, for optimizer bookkeeping, the indices of surviving originals plus
    the source index of every appended row.
    """
    rng = rng or np.random.default_rng(0)
    n = len(field)
    hot = grad_stats.mean() > grad_threshold
    if max_primitives is not None and n + hot.sum() > max_primitives:
        budget = max(max_primitives - n, 0)
        order = np.argsort(-grad_stats.mean(), kind="stable")[:budget]
        hot = np.zeros(n, bool)
        hot[order] = True
    big = field.scales.max(axis=1) > split_scale
    clone_idx = np.flatnonzero(hot & ~big)
    split_idx = np.flatnonzero(hot & big)

    new_rows = []
    sources = []
    if len(clone_idx):
        new_rows.append(field.subset(clone_idx))
        sources.append(clone_idx)
    if len(split_idx):
        for _ in range(2):
            child = field.subset(split_idx)
            u = rng.normal(size=(len(split_idx), 3))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            u *= rng.uniform(0, 1, size=(len(split_idx), 1)) ** (1.0 / 3.0)
            R = quats_to_rotmats(child.quats)
            child.means = child.means + np.einsum("nij,nj->ni", R, u * child.scales)
            child.log_scales = child.log_scales - math.log(SPLIT_FACTOR)
            new_rows.append(child)
            sources.append(split_idx)
    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    out = field.subset(np.flatnonzero(keep))
    for rows in new_rows:
        out = _concat(out, rows)
    src = np.concatenate(sources) if sources else np.zeros(0, dtype=int)
    # prune
    alive = out.opacities >= prune_opacity
    kept_orig = np.flatnonzero(keep)
    n_kept = len(kept_orig)
    if not alive.all():
        out = out.subset(np.flatnonzero(alive))
        kept_orig = kept_orig[alive[:n_kept]]
        src = src[alive[n_kept:]]
    out.iteration = field.iteration
    return out, kept_orig, src


def _concat(a: GaussianField, b: GaussianField) -> GaussianField:
    return GaussianField(*(np.concatenate([getattr(a, k), getattr(b, k)]) for k in PARAM_NAMES), iteration=a.iteration)


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return np.asarray(img, float)
    h, w = img.shape[0] // factor * factor, img.shape[1] // factor * factor
    x = np.asarray(img, float)[:h, :w]
    return x.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3)).reshape(
        (h // factor, w // factor) + img.shape[2:]
    )


def knn_scale(positions: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the k nearest other points (isotropic initial scale)."""
    n = len(positions)
    if n == 1:
        return np.array([0.01])
    kk = min(k, n - 1)
    d, _ = cKDTree(positions).query(positions, k=kk + 1)
    d = np.asarray(d).reshape(n, kk + 1)[:, 1:]
    return np.maximum(d.mean(axis=1), 1e-7)


def init_field(seed: ColoredPointCloud, init_opacity: float = 0.1) -> GaussianField:
    if len(seed) == 0:
        raise EmptySeed("seed cloud is empty")
    n = len(seed)
    s = knn_scale(seed.positions)
    return GaussianField(
        means=seed.positions.copy(),
        log_scales=np.repeat(np.log(s)[:, None], 3, axis=1),
        quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full(n, float(logit(init_opacity))),
        colors=seed.colors.copy(),
    )


@dataclass
class TrainResult:
    field: GaussianField
    losses: list = field(default_factory=list)
    counts: list = field(default_factory=list)
    stopped_early: bool = False
    steps: int = 0


def scene_extent(cameras: Sequence[CameraModel], points: Optional[np.ndarray] = None) -> float:
    centers = np.array([c.center for c in cameras])
    ext = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1))) * 1.1
    if points is not None and len(points):
        ext = max(ext, float(np.linalg.norm(points.max(axis=0) - points.min(axis=0))) / 2)
    return max(ext, 1e-6)


def mean_view_loss(field: GaussianField, cams, images, lambda_ssim: float) -> float:
    return float(np.mean([photometric_loss(render(field, c), im, lambda_ssim) for c, im in zip(cams, images)]))


def train(
    field: GaussianField,
    views: Sequence,
    cfg: TrainConfig,
    densify_enabled: bool = True,
    callback=None,
) -> TrainResult:
    """Optimize a field against posed views (``ViewImage``-like objects).

    Each step renders one randomly drawn view at the downsampled resolution.
    Densification runs every ``densify_interval`` steps inside
    [densify_from, densify_until]; training stops early once the primitive
    count grew by less than ``plateau_growth`` over ``plateau_window`` steps.
    """
    if len(field) == 0:
        raise EmptySeed("cannot train an empty field")
    rng = np.random.default_rng(cfg.seed)
    f = cfg.downsample_factor
    cams = [v.camera.scaled(f) for v in views]
    imgs = [downsample(v.pixels, f) for v in views]
    extent = scene_extent([v.camera for v in views], field.means)
    field = field.copy()
    lrs = {
        "means": cfg.lr_means * extent,
        "log_scales": cfg.lr_log_scales,
        "quats": cfg.lr_quats,
        "opacity_logits": cfg.lr_opacity,
        "colors": cfg.lr_colors,
    }
    opt = Adam(lrs)
    stats = GradStats.zeros(len(field))
    res = TrainResult(field)
    count_at = {0: len(field)}
    decay = (cfg.lr_means_final / cfg.lr_means) ** (1.0 / max(cfg.max_steps, 1)) if cfg.lr_means > 0 else 1.0
    step = 0
    for step in range(1, cfg.max_steps + 1):
        i = int(rng.integers(len(cams)))
        loss, g = backward(field, cams[i], imgs[i], cfg.lambda_ssim, cfg.beta)
        opt.lrs["means"] = cfg.lr_means * extent * decay**step
        opt.step(field, g.as_dict())
        field.iteration += 1
        stats.add(g)
        res.losses.append(loss)
        if densify_enabled and step % cfg.densify_interval == 0 and cfg.densify_from <= step <= cfg.densify_until:
            field, kept, src = densify(
                field,
                stats,
                cfg.densify_grad_threshold,
                cfg.split_scale_fraction * extent,
                rng,
                max_primitives=cfg.max_primitives,
            )
            opt.remap(kept, src)
            stats = GradStats.zeros(len(field))
        if step % cfg.densify_interval == 0:
            count_at[step] = len(field)
            res.counts.append((step, len(field)))
            past = count_at.get(step - cfg.plateau_window)
            if densify_enabled and past is not None and step >= cfg.plateau_window:
                growth = (len(field) - past) / max(past, 1)
                if growth < cfg.plateau_growth:
                    res.stopped_early = step < cfg.max_steps
                    logger.info("densification plateau at step %d (%d primitives)", step, len(field))
                    break
        if callback is not None:
            callback(step, field, loss)
    res.field = field
    res.steps = step
    return res


def train_lightweight(p0: ColoredPointCloud, views: Sequence, cfg: Optional[TrainConfig] = None) -> GaussianField:
    """First-pass field seeded from ``p0``; see :func:`train` for the schedule."""
    cfg = cfg or TrainConfig()
    if len(p0) == 0:
        raise EmptySeed("P0 is empty")
    return train(init_field(p0, cfg.init_opacity), views, cfg).field


def extract_p1(field: GaussianField, cameras: Optional[Sequence[CameraModel]] = None) -> ColoredPointCloud:
    """One point per primitive: mean and clamped DC color, tagged with containing frusta."""
    if len(field) == 0:
        raise ValueError("field is empty")
    n = len(field)
    support = [set() for _ in range(n)]
    if cameras is not None:
        items = cameras.items() if isinstance(cameras, dict) else enumerate(cameras)
        for vid, cam in items:
            for i in np.flatnonzero(cam.in_frustum(field.means)):
                support[i].add(vid)
    return ColoredPointCloud(
        positions=field.means.copy(),
        colors=np.clip(field.colors, 0.0, 1.0),
        provenance=np.full(n, Provenance.SELFINIT, dtype=np.uint8),
        support=support,
        track_length=np.array([len(s) for s in support], dtype=np.int32),
    )


def trainconfig_fields() -> list:
    return [f.name for f in fields(TrainConfig)]
