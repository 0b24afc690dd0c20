"""Three-stage regularization of the merged seed cloud.

Stage 1 drops most single-view-supported points, keeping those closest to
the multi-view-supported geometry. Stage 2 clusters the cloud with k-means
and keeps the points nearest each centroid. Stage 3 estimates PCA normals
and drops points whose normal disagrees with their neighbors'.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .cloud import ColoredPointCloud, Provenance, merge  # noqa: F401  (merge re-exported)
from .frequency_sfm import EmptyOutput
from .geometry import CameraModel

logger = logging.getLogger(__name__)


class EmptyReference(ValueError):
    """No multi-view point exists to score single-view points against."""


class TooFewPoints(ValueError):
    pass


def retained_count(fraction: float, n: int) -> int:
    """ceil(fraction * n), immune to float noise such as 0.3 * 10 = 3.0000000000000004."""
    if n == 0 or fraction <= 0:
        return 0
    return min(n, max(1, math.ceil(round(fraction * n, 9))))


def _camera_items(cameras):
    if cameras is None:
        return []
    return list(cameras.items()) if isinstance(cameras, dict) else list(enumerate(cameras))


# --- stage 1 ------------------------------------------------------------------


@dataclass
class SupportPartition:
    single_view: np.ndarray
    multi_view: np.ndarray
    unsupported: np.ndarray  # subset of single_view with no supporting view
    support: list  # per-point frozenset used for the split


def frustum_support(positions: np.ndarray, cameras) -> list:
    sup = [set() for _ in range(len(positions))]
    for vid, cam in _camera_items(cameras):
        for i in np.flatnonzero(cam.in_frustum(positions)):
            sup[i].add(vid)
    return [frozenset(s) for s in sup]


def classify_support(cloud: ColoredPointCloud, cameras) -> SupportPartition:
    """Split into single- and multi-view-supported points.

    SfM points use their track views. Self-init points are re-tested
    against every camera frustum (positive depth, inside the image).
    """
    support = list(cloud.support)
    selfinit = np.flatnonzero(cloud.provenance == Provenance.SELFINIT)
    if len(selfinit) and cameras is not None:
        fs = frustum_support(cloud.positions[selfinit], cameras)
        for j, i in enumerate(selfinit):
            support[i] = fs[j]
    counts = np.array([len(s) for s in support], dtype=int)
    return SupportPartition(
        single_view=np.flatnonzero(counts <= 1),
        multi_view=np.flatnonzero(counts >= 2),
        unsupported=np.flatnonzero(counts == 0),
        support=support,
    )


def reliability(points, multi_view_points, use_index: bool = True) -> np.ndarray:
    """r(X) = -distance to the nearest multi-view point (higher is better)."""
    pts = np.atleast_2d(np.asarray(points, float))
    ref = np.atleast_2d(np.asarray(multi_view_points, float)).reshape(-1, 3)
    if len(ref) == 0:
        raise EmptyReference("no multi-view points")
    if len(pts) == 0:
        return np.zeros(0)
    if use_index:
        d, _ = cKDTree(ref).query(pts)
    else:
        d = np.sqrt(((pts[:, None, :] - ref[None, :, :]) ** 2).sum(-1)).min(axis=1)
    return -np.asarray(d, float)


def rank_top(scores: np.ndarray, count: int) -> np.ndarray:
    """Positions of the ``count`` highest scores; ties go to the lower position."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:count]


def single_view_filter(
    cloud: ColoredPointCloud, partition: SupportPartition, keep_fraction: float = 0.2
) -> ColoredPointCloud:
    """All multi-view points plus the most reliable single-view points, in input order."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in [0, 1]")
    sv = partition.single_view
    try:
        r = reliability(cloud.positions[sv], cloud.positions[partition.multi_view])
    except EmptyReference:
        logger.warning("no multi-view points; single-view filter passes everything through")
        return cloud.subset(np.arange(len(cloud)))
    r[np.isin(sv, partition.unsupported)] = -np.inf
    count = retained_count(keep_fraction, len(sv))
    count = min(count, int(np.sum(np.isfinite(r))))
    kept = sv[rank_top(r, count)]
    keep = np.zeros(len(cloud), dtype=bool)
    keep[partition.multi_view] = True
    keep[kept] = True
    return cloud.subset(keep)


# --- stage 2 ------------------------------------------------------------------


@dataclass
class ClusterAssignment:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    iterations: int = 0


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding (several candidates per step, best potential wins)."""
    n = len(x)
    trials = 2 + int(math.log(k))
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for c in range(1, k):
        pot = d2.sum()
        if pot <= 0:
            cand = rng.integers(n, size=trials)
        else:
            cand = np.searchsorted(np.cumsum(d2), rng.uniform(0, pot, size=trials))
            cand = np.minimum(cand, n - 1)
        cd2 = ((x[None, :, :] - x[cand][:, None, :]) ** 2).sum(-1)
        new = np.minimum(d2[None, :], cd2)
        best = int(np.argmin(new.sum(1)))
        centers[c] = x[cand[best]]
        d2 = new[best]
    return centers


def _assign(x, centroids):
    _, lab = cKDTree(centroids).query(x)
    return np.asarray(lab, dtype=np.int64)


def _repair_empty(x, labels, centroids, k):
    """Give each empty cluster the farthest point of the currently largest cluster."""
    sizes = np.bincount(labels, minlength=k)
    for c in np.flatnonzero(sizes == 0):
        big = int(np.argmax(sizes))
        members = np.flatnonzero(labels == big)
        d = ((x[members] - centroids[big]) ** 2).sum(1)
        far = members[np.lexsort((members, -d))[0]]
        labels[far] = c
        centroids[c] = x[far]
        sizes[big] -= 1
        sizes[c] = 1
    return labels


def kmeans(cloud, k: int = 1000, seed: int = 42, max_iters: int = 50) -> ClusterAssignment:
    """k-means++ seeded Lloyd iterations, deterministic for a fixed seed."""
    x = np.asarray(getattr(cloud, "positions", cloud), float).reshape(-1, 3)
    n = len(x)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n == 0:
        raise ValueError("cannot cluster an empty cloud")
    if n < k:
        logger.warning("k=%d exceeds %d points; lowering k", k, n)
        k = n
    rng = np.random.default_rng(seed)
    extent = float(np.linalg.norm(x.max(0) - x.min(0)))
    tol = 1e-7 * max(extent, 1e-300)
    centroids = _kmeanspp(x, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iters + 1):
        labels = _repair_empty(x, _assign(x, centroids), centroids, k)
        new = np.zeros_like(centroids)
        for d in range(3):
            new[:, d] = np.bincount(labels, weights=x[:, d], minlength=k)
        new /= np.bincount(labels, minlength=k)[:, None]
        motion = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if motion < tol:
            break
    return ClusterAssignment(k, labels, centroids, it)


def cluster_denoise(cloud: ColoredPointCloud, assignment: ClusterAssignment, keep_fraction: float = 0.3) -> ColoredPointCloud:
    """Per cluster keep the ceil(keep_fraction * size) points nearest its centroid (at least one)."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    labels = assignment.labels
    d = np.linalg.norm(cloud.positions - assignment.centroids[labels], axis=1)
    keep = np.zeros(len(cloud), dtype=bool)
    order = np.lexsort((np.arange(len(cloud)), d, labels))
    sorted_labels = labels[order]
    bounds = np.flatnonzero(np.diff(sorted_labels)) + 1
    for seg in np.split(order, bounds):
        if len(seg):
            keep[seg[: retained_count(keep_fraction, len(seg))]] = True
    return cloud.subset(keep)


# --- stage 3 ------------------------------------------------------------------


@dataclass
class NormalField:
    normals: np.ndarray
    neighbors: np.ndarray  # (N, k) neighbor indices, self excluded
    degenerate: np.ndarray
    scores: Optional[np.ndarray] = None


def _neighbors(x: np.ndarray, k: int) -> np.ndarray:
    _, idx = cKDTree(x).query(x, k=k + 1)
    idx = np.asarray(idx).reshape(len(x), k + 1)
    out = np.empty((len(x), k), dtype=np.int64)
    for i in range(len(x)):
        row = idx[i][idx[i] != i]
        out[i] = row[:k]
    return out


def estimate_normals(cloud, k_neighbors: int = 10, cameras=None) -> NormalField:
    """PCA normals over each point and its k nearest neighbors.

    Signs point toward the nearest supporting camera center (any camera when
    a point has no recorded support).
    """
    x = np.asarray(getattr(cloud, "positions", cloud), float).reshape(-1, 3)
    n = len(x)
    if n <= k_neighbors:
        raise TooFewPoints(f"need more than {k_neighbors} points, got {n}")
    nb = _neighbors(x, k_neighbors)
    hood = np.concatenate([x[:, None, :], x[nb]], axis=1)
    centered = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / hood.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    degenerate = np.abs(evals[:, 1] - evals[:, 0]) <= 1e-12 * np.maximum(1.0, evals[:, 2])

    items = _camera_items(cameras)
    if items:
        ids = [vid for vid, _ in items]
        centers = np.array([cam.center for _, cam in items])
        support = getattr(cloud, "support", None)
        d = np.linalg.norm(x[:, None, :] - centers[None, :, :], axis=2)
        if support is not None:
            allowed = np.array([[vid in s for vid in ids] for s in support], dtype=bool)
            none = ~allowed.any(axis=1)
            allowed[none] = True
            d = np.where(allowed, d, np.inf)
        nearest = centers[np.argmin(d, axis=1)]
        flip = np.sum(normals * (nearest - x), axis=1) < 0
        normals[flip] *= -1
    return NormalField(normals, nb, degenerate)


def normal_consistency(nf: NormalField) -> np.ndarray:
    """Mean cosine between each normal and its neighbors' normals."""
    c = np.einsum("ni,nki->nk", nf.normals, nf.normals[nf.neighbors]).mean(axis=1)
    return np.clip(c, -1.0, 1.0)


def normal_filter(cloud: ColoredPointCloud, normals: NormalField, threshold: float = 0.2) -> ColoredPointCloud:
    if not -1.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [-1, 1]")
    scores = normal_consistency(normals)
    normals.scores = scores
    return cloud.subset(scores >= threshold)


# --- driver -------------------------------------------------------------------


@dataclass
class RegularizeParams:
    keep_single_view: float = 0.2
    kmeans_k: int = 1000
    keep_cluster: float = 0.3
    normal_threshold: float = 0.2
    k_neighbors: int = 10
    seed: int = 42


@dataclass
class StageReport:
    stages: list = field(default_factory=list)  # (name, n_in, n_out)

    def add(self, name: str, n_in: int, n_out: int) -> None:
        self.stages.append((name, int(n_in), int(n_out)))

    def to_text(self) -> str:
        lines = []
        for name, a, b in self.stages:
            lines.append(f"{name}.in={a}")
            lines.append(f"{name}.out={b}")
        return "\n".join(lines) + "\n"


def regularize(
    p_init: ColoredPointCloud,
    cameras,
    params: Optional[RegularizeParams] = None,
    return_report: bool = False,
):
    """Single-view filter, then cluster denoising, then normal filtering."""
    params = params or RegularizeParams()
    if len(p_init) == 0:
        raise ValueError("p_init is empty")
    report = StageReport()

    part = classify_support(p_init, cameras)
    # carry the recomputed support forward so later stages see it
    cloud = ColoredPointCloud(
        p_init.positions, p_init.colors, p_init.provenance, part.support,
        p_init.track_length, p_init.track_id, dict(p_init.extra),
    )
    out1 = single_view_filter(cloud, part, params.keep_single_view)
    report.add("single_view", len(cloud), len(out1))
    if len(out1) == 0:
        raise EmptyOutput("single-view filter removed every point")

    assign = kmeans(out1, params.kmeans_k, params.seed)
    out2 = cluster_denoise(out1, assign, params.keep_cluster)
    report.add("cluster", len(out1), len(out2))

    k = params.k_neighbors
    if len(out2) <= k:
        k = len(out2) - 1
        logger.warning("only %d points before normal filtering; using %d neighbors", len(out2), k)
    if k >= 2:
        nf = estimate_normals(out2, k, cameras)
        out3 = normal_filter(out2, nf, params.normal_threshold)
    else:
        out3 = out2
    report.add("normal", len(out2), len(out3))
    if len(out3) == 0:
        raise EmptyOutput("normal filter removed every point")
    logger.info("regularize stages:\n%s", report.to_text().rstrip())
    return (out3, report) if return_report else out3
