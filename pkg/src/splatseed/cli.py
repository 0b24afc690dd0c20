"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, apply_overrides, config_hash, default_settings, load_config, settings_seed
from .evaluate import (
    PipelineSettings,
    init_strength_experiment,
    pipeline_eval,
    reports_to_csv,
    reports_to_dat,
    run_pipeline,
)
from .frequency_sfm import ViewImage, reconstruct_p0
from .io import read_image, read_ply, read_sparse_model, write_ply
from .pc_reg import regularize
from .splat import extract_p1, init_field, train
from .synth import generate_scene, load_scene_spec

logger = logging.getLogger("splatseed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, views: bool = True) -> None:
    p.add_argument("--seed", type=int, default=42, help="seed for every random choice (default 42)")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    if views:
        p.add_argument("--scene", help="synthetic scene: preset name or JSON spec path")
        p.add_argument("--sparse", help="sparse-model text directory (cameras/images/points3D.txt)")
        p.add_argument("--images", help="image directory for --sparse")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="splatseed", description="Seed point clouds for sparse-view Gaussian splatting.")
    ap.add_argument("--version", action="version", version=f"splatseed {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("init", help="frequency-augmented SfM -> P0 PLY")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--use-tracks", action="store_true", help="triangulate the sparse model's tracks instead of matching")

    p = sub.add_parser("selfinit", help="lightweight field from P0 -> P1 PLY and checkpoint")
    _common(p)
    p.add_argument("--p0", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")

    p = sub.add_parser("regularize", help="three-stage cloud regularization")
    _common(p)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keep-sv", type=float, help="single-view keep fraction (default 0.2)")
    p.add_argument("--kmeans-k", type=int, help="cluster count (default 1000)")
    p.add_argument("--keep-cluster", type=float, help="per-cluster keep fraction (default 0.3)")
    p.add_argument("--normal-th", type=float, help="mean-cosine threshold (default 0.2)")

    p = sub.add_parser("pipeline", help="all stages chained")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--p0-out")
    p.add_argument("--p1-out")

    p = sub.add_parser("eval", help="held-out evaluation on a synthetic scene")
    _common(p)
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("ablate", help="initialization-strength experiment")
    _common(p)
    p.add_argument("--budgets", default="4,8,all")
    p.add_argument("--out", required=True, help="CSV path; a gnuplot .dat is written alongside")
    return ap


def _settings(args) -> PipelineSettings:
    s = load_config(args.config) if args.config else default_settings()
    over = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    if args.command == "regularize":
        flags = {
            "reg.keep_single_view": args.keep_sv,
            "reg.kmeans_k": args.kmeans_k,
            "reg.keep_cluster": args.keep_cluster,
            "reg.normal_threshold": args.normal_th,
        }
        over.update({k: v for k, v in flags.items() if v is not None})
    try:
        return apply_overrides(s, over, seed=args.seed)
    except ConfigError as e:
        raise UsageError(str(e)) from e


def _scene(args):
    spec = load_scene_spec(args.scene)
    return generate_scene(spec, seed=args.seed)


def _views(args) -> list:
    if args.scene and args.sparse:
        raise UsageError("--scene and --sparse are mutually exclusive")
    if args.scene:
        return _scene(args).views()
    if args.sparse:
        if not args.images:
            raise UsageError("--sparse requires --images")
        model = read_sparse_model(args.sparse)
        views = []
        for iid in sorted(model.cameras):
            px = read_image(Path(args.images) / model.names[iid])
            views.append(ViewImage(iid, px, model.cameras[iid]))
        return views
    raise UsageError("one of --scene or --sparse is required")


def _cameras(args):
    if not (args.scene or args.sparse):
        return None
    if args.sparse:
        return read_sparse_model(args.sparse).cameras
    return {v.view_id: v.camera for v in _scene(args).views()}


def _provenance(args, settings) -> list:
    return [
        f"generated_by splatseed {__version__}",
        f"command {args.command}",
        f"seed {settings_seed(settings)}",
        f"config_sha256 {config_hash(settings)}",
    ]


def _report(text: str) -> None:
    sys.stderr.write(text)
    sys.stderr.flush()


def cmd_init(args, s):
    views = _views(args)
    tracks = None
    if args.use_tracks:
        if not args.sparse:
            raise UsageError("--use-tracks requires --sparse")
        tracks = read_sparse_model(args.sparse).tracks
    p0 = reconstruct_p0(views, external_tracks=tracks, cfg=s.sfm)
    write_ply(args.out, p0, comments=_provenance(args, s))
    _report(f"p0.points={len(p0)}\n")


def cmd_selfinit(args, s):
    views = _views(args)
    p0 = read_ply(args.p0)
    res = train(init_field(p0, s.light.init_opacity), views, s.light)
    p1 = extract_p1(res.field, {v.view_id: v.camera for v in views})
    write_ply(args.out, p1, comments=_provenance(args, s))
    if args.checkpoint:
        write_ply(args.checkpoint, res.field, comments=_provenance(args, s))
    _report(f"selfinit.steps={res.steps}\nselfinit.primitives={len(res.field)}\np1.points={len(p1)}\n")


def cmd_regularize(args, s):
    cloud = read_ply(args.inp)
    out, report = regularize(cloud, _cameras(args), s.reg, return_report=True)
    write_ply(args.out, out, comments=_provenance(args, s))
    _report(report.to_text())


def cmd_pipeline(args, s):
    views = _views(args)
    res = run_pipeline(views, s)
    com = _provenance(args, s)
    write_ply(args.out, res.final, comments=com)
    if args.p0_out:
        write_ply(args.p0_out, res.p0, comments=com)
    if args.p1_out and res.p1 is not None:
        write_ply(args.p1_out, res.p1, comments=com)
    lines = f"p0.points={len(res.p0)}\np1.points={len(res.p1) if res.p1 is not None else 0}\n"
    lines += f"p_init.points={len(res.p_init)}\n"
    _report(lines + (res.report.to_text() if res.report else ""))


def _need_scene(args):
    if not args.scene:
        raise UsageError("--scene is required")
    return _scene(args)


def cmd_eval(args, s):
    scene = _need_scene(args)
    rep, _ = pipeline_eval(scene, s)
    rep.budget = "all"
    Path(args.out).write_text(reports_to_csv([rep], _provenance(args, s)))
    _report("".join(f"{k}={v}\n" for k, v in rep.stage_counts.items()))
    _report(f"psnr={rep.psnr:.6f}\nssim={rep.ssim:.6f}\nchamfer={rep.chamfer:.6f}\n")


def cmd_ablate(args, s):
    scene = _need_scene(args)
    budgets = []
    for b in args.budgets.split(","):
        b = b.strip()
        if b == "all":
            budgets.append("all")
        elif b.isdigit():
            budgets.append(int(b))
        else:
            raise UsageError(f"--budgets: bad entry {b!r}")
    rows = init_strength_experiment(scene, budgets, s)
    com = _provenance(args, s)
    Path(args.out).write_text(reports_to_csv(rows, com))
    Path(args.out).with_suffix(".dat").write_text(reports_to_dat(rows, com))
    _report("".join(f"budget={r.budget} psnr={r.psnr:.6f}\n" for r in rows))


COMMANDS = {
    "init": cmd_init,
    "selfinit": cmd_selfinit,
    "regularize": cmd_regularize,
    "pipeline": cmd_pipeline,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        settings = _settings(args)
        COMMANDS[args.command](args, settings)
    except UsageError as e:
        sys.stderr.write(f"{e}\n")
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    except (OSError, ValueError, RuntimeError) as e:
        sys.stderr.write(f"error: {e}\n")
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
