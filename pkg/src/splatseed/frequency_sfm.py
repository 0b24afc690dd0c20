"""Low-frequency view augmentation, corner matching and relaxed-track triangulation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .cloud import ColoredPointCloud, Provenance
from .geometry import CameraModel, FeatureTrack, Observation, refine_points, reprojection_errors

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
GRAD_EPS = 1e-12
PATCH_RADIUS = 5  # 11x11 ZNCC window


class EmptyOutput(RuntimeError):
    """No point survived a stage."""


@dataclass
class ViewImage:
    view_id: int
    pixels: np.ndarray
    camera: CameraModel
    is_masked_variant: bool = False
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pixels = np.clip(np.asarray(self.pixels, dtype=float), 0.0, 1.0)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must be H x W x 3")
        h, w = self.pixels.shape[:2]
        if (w, h) != (self.camera.width, self.camera.height):
            raise ValueError(f"image {w}x{h} does not match camera {self.camera.width}x{self.camera.height}")


@dataclass
class GradientMask:
    mask: np.ndarray
    percentile_used: float

    @property
    def fraction(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


@dataclass
class AugmentedViewSet:
    views: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.views)

    @property
    def originals(self) -> list:
        return [v for v in self.views if not v.is_masked_variant]

    @property
    def masked(self) -> list:
        return [v for v in self.views if v.is_masked_variant]

    def cameras(self) -> dict:
        """One camera per physical view, keyed by view_id."""
        return {v.view_id: v.camera for v in self.views}


def luma(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=float)
    return pixels @ LUMA if pixels.ndim == 3 else pixels


def gradient_magnitude(image) -> np.ndarray:
    """Sobel gradient magnitude of the luma channel with replicate borders."""
    px = image.pixels if isinstance(image, ViewImage) else image
    y = luma(px)
    if y.size == 0:
        raise ValueError("empty image")
    gx = ndimage.sobel(y, axis=1, mode="nearest")
    gy = ndimage.sobel(y, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def high_frequency_mask(image, percentile: float = 70.0) -> GradientMask:
    """Mask pixels whose gradient magnitude reaches the percentile of the nonzero gradients.

    Pixels equal to the threshold are included. An image with no gradient, or
    ``percentile >= 100``, gives an empty mask.
    """
    g = gradient_magnitude(image)
    nz = g[g > GRAD_EPS]
    if nz.size == 0 or percentile >= 100:
        if nz.size == 0:
            logger.debug("degenerate image: no gradient, empty mask")
        return GradientMask(np.zeros(g.shape, dtype=bool), float(percentile))
    thr = np.percentile(nz, max(percentile, 0.0))
    return GradientMask((g >= thr) & (g > GRAD_EPS), float(percentile))


def masked_variant(view: ViewImage, percentile: float = 70.0, fill=None) -> ViewImage:
    m = high_frequency_mask(view, percentile)
    fill = view.pixels.reshape(-1, 3).mean(axis=0) if fill is None else np.broadcast_to(fill, (3,))
    px = view.pixels.copy()
    px[m.mask] = fill
    return ViewImage(view.view_id, px, view.camera, is_masked_variant=True, mask=m.mask)


def build_augmented_set(views: Sequence[ViewImage], percentile: float = 70.0, fill=None) -> AugmentedViewSet:
    """Originals followed by one masked variant per original (2N views)."""
    if len(views) < 2:
        raise ValueError("need at least two views")
    originals = [ViewImage(v.view_id, v.pixels, v.camera) for v in views]
    return AugmentedViewSet(originals + [masked_variant(v, percentile, fill) for v in originals])


# --- features -----------------------------------------------------------------


def harris_response(pixels, sigma: float = 1.0, k: float = 0.04) -> np.ndarray:
    y = luma(pixels)
    gx = ndimage.sobel(y, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(y, axis=0, mode="nearest") / 8.0
    sxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def detect_features(
    view,
    max_corners: int = 80,
    nms_radius: float = 4.0,
    quality: float = 1e-3,
    border: int = PATCH_RADIUS,
    exclude: Optional[np.ndarray] = None,
    max_mask_overlap: float = 0.2,
) -> np.ndarray:
    """Harris corners, strongest first, as an (n, 2) array of (x, y) pixels.

    A candidate must be a 3x3 local maximum whose response exceeds both an
    absolute floor and ``quality`` times the strongest eligible candidate; greedy
    suppression then removes any corner within ``nms_radius`` of a stronger
    one. Pixels flagged in ``exclude`` (defaults to a masked variant's mask)
    never yield keypoints, nor do pixels whose matching window is covered by
    more than ``max_mask_overlap`` of excluded pixels: such windows are mostly
    fill and cannot be matched against real image content.
    """
    if max_corners <= 0:
        raise ValueError("max_corners must be positive")
    px = view.pixels if isinstance(view, ViewImage) else view
    if exclude is None and isinstance(view, ViewImage) and view.mask is not None:
        exclude = view.mask
    R = harris_response(px)
    cand = (R == ndimage.maximum_filter(R, size=3, mode="nearest")) & (R > 1e-12)
    cand[:border, :] = cand[-border:, :] = False
    cand[:, :border] = cand[:, -border:] = False
    if exclude is not None:
        cand &= ~exclude
        cover = ndimage.uniform_filter(exclude.astype(float), size=2 * border + 1, mode="nearest")
        cand &= cover <= max_mask_overlap
    if not cand.any():
        return np.zeros((0, 2))
    cand &= R >= quality * R[cand].max()
    ys, xs = np.nonzero(cand)
    order = np.lexsort((xs, ys, -R[ys, xs]))
    kept = []
    r2 = nms_radius * nms_radius
    taken = np.zeros((0, 2))
    for i in order:
        p = np.array([xs[i], ys[i]], dtype=float)
        if len(taken) and np.min(np.sum((taken - p) ** 2, axis=1)) < r2:
            continue
        kept.append(p)
        taken = np.asarray(kept)
        if len(kept) >= max_corners:
            break
    return np.asarray(kept).reshape(-1, 2)


# --- matching -----------------------------------------------------------------


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def fundamental_matrix(cam_a: CameraModel, cam_b: CameraModel) -> Optional[np.ndarray]:
    """F with x_b^T F x_a = 0, or None for a zero baseline."""
    R = cam_b.R @ cam_a.R.T
    t = cam_b.t - R @ cam_a.t
    if np.linalg.norm(t) < 1e-12:
        return None
    E = _skew(t) @ R
    return np.linalg.inv(cam_b.K).T @ E @ np.linalg.inv(cam_a.K)


def symmetric_epipolar_distance(F, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Pairwise max of the point-to-epipolar-line distances in both images, shape (na, nb)."""
    ha = np.c_[pa, np.ones(len(pa))]
    hb = np.c_[pb, np.ones(len(pb))]
    la = ha @ F.T  # epipolar lines in b for points of a
    lb = hb @ F  # epipolar lines in a for points of b
    num = hb @ la.T  # (nb, na) = x_b^T F x_a
    num = np.abs(num.T)
    da = num / np.maximum(np.hypot(la[:, 0], la[:, 1])[:, None], 1e-300)
    db = num / np.maximum(np.hypot(lb[:, 0], lb[:, 1])[None, :], 1e-300)
    return np.maximum(da, db)


def extract_patches(gray: np.ndarray, pts: np.ndarray, radius: int = PATCH_RADIUS) -> np.ndarray:
    """Zero-mean unit-norm patches around integer keypoints, shape (n, (2r+1)^2)."""
    h, w = gray.shape
    padded = np.pad(gray, radius, mode="edge")
    ij = np.rint(pts).astype(int)
    ij[:, 0] = np.clip(ij[:, 0], 0, w - 1)
    ij[:, 1] = np.clip(ij[:, 1], 0, h - 1)
    off = np.arange(-radius, radius + 1)
    rows = ij[:, 1, None, None] + radius + off[None, :, None]
    cols = ij[:, 0, None, None] + radius + off[None, None, :]
    p = padded[rows, cols].reshape(len(pts), -1)
    p = p - p.mean(axis=1, keepdims=True)
    n = np.linalg.norm(p, axis=1, keepdims=True)
    return np.where(n > 1e-9, p / np.maximum(n, 1e-300), 0.0)


def zncc(patch_a: np.ndarray, patch_b: np.ndarray) -> np.ndarray:
    return patch_a @ patch_b.T


def match_pair(
    va: ViewImage,
    vb: ViewImage,
    ka: np.ndarray,
    kb: np.ndarray,
    epi_thresh: float = 2.0,
    zncc_thresh: float = 0.8,
) -> list:
    """Mutually best ZNCC matches that also satisfy the epipolar gate."""
    if len(ka) == 0 or len(kb) == 0:
        return []
    F = fundamental_matrix(va.camera, vb.camera)
    if F is None:
        return []
    ok = symmetric_epipolar_distance(F, ka, kb) < epi_thresh
    if not ok.any():
        return []
    score = zncc(extract_patches(luma(va.pixels), ka), extract_patches(luma(vb.pixels), kb))
    score = np.where(ok & (score > zncc_thresh), score, -np.inf)
    best_b = np.argmax(score, axis=1)
    best_a = np.argmax(score, axis=0)
    out = []
    for i, j in enumerate(best_b):
        if np.isfinite(score[i, j]) and best_a[j] == i:
            out.append((i, int(j)))
    return out


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller root wins so the merge is order independent
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def match_and_track(
    views: AugmentedViewSet,
    keypoints: Sequence[np.ndarray],
    epi_thresh: float = 2.0,
    zncc_thresh: float = 0.8,
    merge_radius: float = 1.5,
) -> list[FeatureTrack]:
    """Pairwise matching across all augmented views merged into tracks.

    A masked variant and its original share one view_id. When a component
    holds several keypoints of one physical view they are averaged if they
    agree within ``merge_radius`` pixels; otherwise the component is
    inconsistent and discarded. Components spanning fewer than two views are
    dropped.
    """
    vs = views.views
    offsets = np.cumsum([0] + [len(k) for k in keypoints])
    uf = _UnionFind(int(offsets[-1]))
    matches = []
    for a in range(len(vs)):
        for b in range(a + 1, len(vs)):
            if vs[a].view_id == vs[b].view_id:
                continue
            for i, j in match_pair(vs[a], vs[b], keypoints[a], keypoints[b], epi_thresh, zncc_thresh):
                matches.append((int(offsets[a] + i), int(offsets[b] + j)))
    for i, j in sorted(matches):
        uf.union(i, j)

    node_view = np.concatenate([np.full(len(k), v.view_id) for k, v in zip(keypoints, vs)]) if len(vs) else []
    node_px = np.concatenate([np.asarray(k, float).reshape(-1, 2) for k in keypoints]) if len(vs) else []
    comps: dict = {}
    matched = {n for m in matches for n in m}
    for n in sorted(matched):
        comps.setdefault(uf.find(n), []).append(n)

    tracks = []
    for root in sorted(comps):
        per_view: dict = {}
        for n in comps[root]:
            per_view.setdefault(int(node_view[n]), []).append(node_px[n])
        consistent = True
        obs = []
        for vid in sorted(per_view):
            pts = np.asarray(per_view[vid])
            if np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1)) > merge_radius:
                consistent = False
                break
            obs.append(Observation(vid, tuple(pts.mean(axis=0))))
        if consistent and len(obs) >= 2:
            tracks.append(FeatureTrack(obs, track_id=len(tracks)))
    return tracks


def detect_all(views: AugmentedViewSet, max_corners: int = 80, **kw) -> list:
    return [detect_features(v, max_corners, **kw) for v in views.views]


def sample_colors(pixels: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup of (x, y) pixel positions."""
    return np.stack(
        [ndimage.map_coordinates(pixels[..., c], [uv[:, 1], uv[:, 0]], order=1, mode="nearest") for c in range(3)],
        axis=1,
    )


def tracks_to_cloud(
    tracks: Sequence[FeatureTrack],
    cameras: Sequence[CameraModel],
    images: dict,
    min_track: int = 2,
    max_reproj: float = 4.0,
    delta: float = 2.0,
) -> ColoredPointCloud:
    """Triangulate + refine tracks; colors are the mean observed color."""
    by_id = {t.track_id if t.track_id >= 0 else i: t for i, t in enumerate(tracks)}
    pts = refine_points(tracks, cameras, min_track=min_track, delta=delta)
    pos, col, tl, tid, sup = [], [], [], [], []
    for p in pts:
        tr = by_id[p.track_id]
        cams = [cameras[o.view_id] for o in tr.observations]
        pix = np.array([o.pixel for o in tr.observations])
        depths = np.array([(c.R @ p.position + c.t)[2] for c in cams])
        if np.any(depths <= 0) or np.max(reprojection_errors(p.position, cams, pix)) > max_reproj:
            continue
        cs = [sample_colors(images[o.view_id], np.array([o.pixel]))[0] for o in tr.observations if o.view_id in images]
        pos.append(p.position)
        col.append(np.mean(cs, axis=0) if cs else np.full(3, 0.5))
        tl.append(len(tr))
        tid.append(p.track_id)
        sup.append(frozenset(tr.view_ids))
    return ColoredPointCloud(
        positions=np.asarray(pos).reshape(-1, 3),
        colors=np.clip(np.asarray(col).reshape(-1, 3), 0, 1),
        provenance=np.full(len(pos), Provenance.SFM, dtype=np.uint8),
        support=sup,
        track_length=np.asarray(tl, dtype=np.int32),
        track_id=np.asarray(tid, dtype=np.int64),
    )


@dataclass
class SfmConfig:
    percentile: float = 70.0
    fill: Optional[tuple] = None
    max_corners: int = 80
    nms_radius: float = 4.0
    harris_quality: float = 1e-3
    epi_thresh: float = 2.0
    zncc_thresh: float = 0.8
    min_track: int = 2
    max_reproj: float = 4.0
    huber_delta: float = 2.0
    augment: bool = True


def reconstruct_p0(
    views,
    external_tracks: Optional[Sequence[FeatureTrack]] = None,
    cfg: Optional[SfmConfig] = None,
    cameras: Optional[Sequence[CameraModel]] = None,
) -> ColoredPointCloud:
    """Initial cloud from relaxed-track triangulation.

    ``views`` may be an :class:`AugmentedViewSet` or a plain list of originals
    (augmented here unless ``cfg.augment`` is off). With ``external_tracks``
    no detection or matching happens.
    """
    cfg = cfg or SfmConfig()
    if isinstance(views, AugmentedViewSet):
        aug = views
    elif cfg.augment:
        aug = build_augmented_set(views, cfg.percentile, cfg.fill)
    else:
        aug = AugmentedViewSet([ViewImage(v.view_id, v.pixels, v.camera) for v in views])
    if cameras is None:
        cameras = aug.cameras()
    images = {v.view_id: v.pixels for v in aug.originals}
    if external_tracks is None:
        kps = detect_all(aug, cfg.max_corners, nms_radius=cfg.nms_radius, quality=cfg.harris_quality)
        tracks = match_and_track(aug, kps, cfg.epi_thresh, cfg.zncc_thresh)
    else:
        tracks = list(external_tracks)
    cloud = tracks_to_cloud(tracks, cameras, images, cfg.min_track, cfg.max_reproj, cfg.huber_delta)
    logger.info("P0: %d tracks -> %d points", len(tracks), len(cloud))
    if len(cloud) == 0:
        raise EmptyOutput("no track survived triangulation")
    return cloud
