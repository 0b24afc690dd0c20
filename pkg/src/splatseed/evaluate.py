"""End-to-end pipeline driver and the initialization-strength experiment."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .cloud import ColoredPointCloud, merge
from .frequency_sfm import EmptyOutput, SfmConfig, reconstruct_p0
from .pc_reg import RegularizeParams, StageReport, regularize
from .splat import GaussianField, TrainConfig, downsample, extract_p1, init_field, render, train
from .synth import SyntheticScene

logger = logging.getLogger(__name__)


@dataclass
class PipelineSettings:
    sfm: SfmConfig = field(default_factory=SfmConfig)
    light: TrainConfig = field(default_factory=TrainConfig)
    reg: RegularizeParams = field(default_factory=RegularizeParams)
    final: TrainConfig = field(
        default_factory=lambda: TrainConfig(max_steps=1000, downsample_factor=1, plateau_window=10**9)
    )
    holdout_every: int = 8
    gt_samples: int = 4000
    self_init: bool = True
    regularize: bool = True
    min_seed_points: int = 300


@dataclass
class PipelineOutput:
    p0: ColoredPointCloud
    p1: Optional[ColoredPointCloud]
    p_init: ColoredPointCloud
    final: ColoredPointCloud
    report: Optional[StageReport]


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    chamfer: float
    point_count: int
    stage_counts: dict = field(default_factory=dict)
    budget: Optional[int] = None
    seed: int = 42

    def __post_init__(self):
        if not (self.psnr >= 0 or math.isinf(self.psnr)):
            raise ValueError("psnr must be >= 0 or infinite")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError("ssim outside [-1, 1]")


def split_views(views: Sequence, every: int = 8):
    """(train, test): every ``every``-th view (starting at 0) is held out."""
    test = [v for i, v in enumerate(views) if i % every == 0]
    train_ = [v for i, v in enumerate(views) if i % every != 0]
    return train_, test


def subsample_views(views: Sequence, n: int) -> list:
    """n views spread uniformly in azimuth around the cameras' common center."""
    if n > len(views):
        raise ValueError(f"budget {n} exceeds {len(views)} views")
    if n < 2:
        raise ValueError("budget must be >= 2")
    if n == len(views):
        return list(views)
    centers = np.array([v.camera.center for v in views])
    rel = centers - centers.mean(axis=0)
    # azimuth in the plane orthogonal to the ring's normal
    _, _, vt = np.linalg.svd(rel, full_matrices=False)
    az = np.arctan2(rel @ vt[1], rel @ vt[0])
    order = np.argsort(az, kind="stable")
    # unwrap so the largest angular gap sits at the ends of the sequence
    sa = az[order]
    gaps = np.diff(np.concatenate([sa, sa[:1] + 2 * np.pi]))
    start = (int(np.argmax(gaps)) + 1) % len(sa)
    order = np.roll(order, -start)
    arc = np.unwrap(az[order])
    arc -= arc[0]
    targets = np.linspace(0.0, arc[-1], n)
    picked = []
    for t in targets:
        cand = np.argsort(np.abs(arc - t), kind="stable")
        picked.append(next(int(c) for c in cand if int(c) not in picked))
    return [views[i] for i in sorted(order[picked])]


def run_pipeline(views: Sequence, settings: Optional[PipelineSettings] = None) -> PipelineOutput:
    """P0 from frequency-augmented SfM, P1 from a lightweight field, then regularization."""
    s = settings or PipelineSettings()
    cameras = {v.view_id: v.camera for v in views}
    try:
        p0 = reconstruct_p0(list(views), cfg=s.sfm)
    except EmptyOutput:
        if not s.self_init or s.min_seed_points <= 0:
            raise
        p0 = ColoredPointCloud.empty()
    seed_cloud = p0
    if s.self_init and len(p0) < s.min_seed_points:
        # too sparse to grow a useful field: pad the lightweight seed with random points
        logger.warning("P0 has %d points; padding the lightweight seed to %d", len(p0), s.min_seed_points)
        pad = random_seed_cloud([v.camera for v in views], s.min_seed_points - len(p0), s.light.seed)
        seed_cloud = merge(p0, pad) if len(p0) else pad
    p1 = None
    p_init = p0
    if s.self_init:
        res = train(init_field(seed_cloud, s.light.init_opacity), views, s.light)
        p1 = extract_p1(res.field, cameras)
        p_init = merge(p0, p1)
    report = None
    final = p_init
    if s.regularize:
        final, report = regularize(p_init, cameras, s.reg, return_report=True)
    return PipelineOutput(p0, p1, p_init, final, report)


def random_seed_cloud(cameras: Sequence, n: int, seed: int = 42) -> ColoredPointCloud:
    """Uniform gray points in a cube around the point closest to all optical axes.

    The cube's half side is half the mean camera distance to that point.
    """
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for cam in cameras:
        d = cam.R[2]
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ cam.center
    focus = np.linalg.lstsq(A, b, rcond=None)[0]
    half = 0.5 * float(np.mean([np.linalg.norm(c.center - focus) for c in cameras]))
    rng = np.random.default_rng(seed)
    pts = focus + rng.uniform(-half, half, size=(n, 3))
    return ColoredPointCloud(pts, np.full((n, 3), 0.5))


def train_from_seed(seed_cloud: ColoredPointCloud, views: Sequence, cfg: TrainConfig) -> GaussianField:
    return train(init_field(seed_cloud, cfg.init_opacity), views, cfg).field


def heldout_quality(field_: GaussianField, test_views: Sequence, factor: int = 1):
    """Mean PSNR / SSIM over test views at the training resolution (1/factor)."""
    ps, ss = [], []
    for v in test_views:
        img = np.clip(render(field_, v.camera.scaled(factor)), 0.0, 1.0)
        gt = downsample(v.pixels, factor)
        ps.append(metrics.psnr(img, gt))
        ss.append(metrics.ssim(img, gt))
    return float(np.mean(ps)), float(np.mean(ss))


def gt_cloud(scene: SyntheticScene, n: int) -> np.ndarray:
    return scene.gt_samples(n, seed=scene.seed)[0]


def pipeline_eval(scene: SyntheticScene, settings: Optional[PipelineSettings] = None, seed_override=None):
    """Run the pipeline on the training split and score the held-out views.

    Returns (MetricReport, PipelineOutput). ``seed_override`` picks which
    cloud seeds the final training: "final" (default), "p0" or "p_init".
    """
    s = settings or PipelineSettings()
    views = scene.views()
    train_v, test_v = split_views(views, s.holdout_every)
    out = run_pipeline(train_v, s)
    seed_cloud = {"final": out.final, "p0": out.p0, "p_init": out.p_init}[seed_override or "final"]
    fld = train_from_seed(seed_cloud, train_v, s.final)
    p, q = heldout_quality(fld, test_v, s.final.downsample_factor)
    gt = gt_cloud(scene, s.gt_samples)
    stage_counts = {"p0": len(out.p0), "p1": len(out.p1) if out.p1 is not None else 0, "p_init": len(out.p_init)}
    if out.report is not None:
        for name, _, b in out.report.stages:
            stage_counts[name] = b
    rep = MetricReport(p, q, metrics.chamfer(seed_cloud, gt), len(seed_cloud), stage_counts, seed=scene.seed)
    return rep, out


def init_strength_experiment(
    scene: SyntheticScene,
    view_budgets: Sequence,
    settings: Optional[PipelineSettings] = None,
) -> list:
    """Held-out quality as a function of how many views feed the seed reconstruction.

    Budget ``None`` or "all" means every training view. Each seed cloud is
    trained with the same schedule on the full training split.
    """
    s = settings or PipelineSettings()
    train_v, test_v = split_views(scene.views(), s.holdout_every)
    gt = gt_cloud(scene, s.gt_samples)
    rows = []
    for b in view_budgets:
        n = len(train_v) if b in (None, "all") else int(b)
        subset = subsample_views(train_v, n)
        out = run_pipeline(subset, s)
        fld = train_from_seed(out.final, train_v, s.final)
        p, q = heldout_quality(fld, test_v, s.final.downsample_factor)
        rows.append(MetricReport(p, q, metrics.chamfer(out.final, gt), len(out.final), budget=n, seed=scene.seed))
        logger.info("budget %d: psnr %.3f ssim %.4f points %d", n, p, q, len(out.final))
    return rows


CSV_HEADER = ("budget", "seed", "psnr", "ssim", "chamfer", "points")


def _fmt(x) -> str:
    if isinstance(x, float):
        return "inf" if math.isinf(x) else f"{x:.6f}"
    return str(x)


def reports_to_csv(rows: Sequence[MetricReport], comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(v) for v in (r.budget if r.budget is not None else "", r.seed, r.psnr, r.ssim, r.chamfer, r.point_count)])
    return buf.getvalue()


def reports_to_dat(rows: Sequence[MetricReport], comments: Sequence[str] = ()) -> str:
    """Whitespace-separated columns for gnuplot: budget psnr ssim chamfer points."""
    lines = [f"# {c}" for c in comments]
    lines.append("# budget psnr ssim chamfer points")
    for r in rows:
        lines.append(" ".join(_fmt(v) for v in (r.budget, r.psnr, r.ssim, r.chamfer, r.point_count)))
    return "\n".join(lines) + "\n"


def with_seed(settings: PipelineSettings, seed: int) -> PipelineSettings:
    return replace(
        settings,
        light=replace(settings.light, seed=seed),
        final=replace(settings.final, seed=seed),
        reg=replace(settings.reg, seed=seed),
    )
