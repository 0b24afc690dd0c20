from pathlib import Path

import numpy as np
import pytest

from splatseed.cli import main
from splatseed.io import read_ply, write_image

ROOT = Path(__file__).resolve().parent.parent
QUICK = str(ROOT / "fixtures" / "quick.cfg")
SCENE = str(ROOT / "fixtures" / "half_smooth")


def run(args, capsys=None):
    return main([str(a) for a in args])


def test_unknown_flag_usage_error(capsys):
    assert main(["pipeline", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["frobnicate"]) == 1


def test_missing_required_and_bad_set(tmp_path, capsys):
    assert main(["pipeline", "--scene", SCENE]) == 1
    assert main(["pipeline", "--scene", SCENE, "--out", str(tmp_path / "o.ply"), "--set", "nokey=1"]) == 1
    assert main(["pipeline", "--out", str(tmp_path / "o.ply")]) == 1
    err = capsys.readouterr().err
    assert "--out" in err and "nokey" in err


def test_data_error_exit_two(tmp_path):
    bad = tmp_path / "bad.ply"
    bad.write_bytes(b"garbage")
    assert main(["regularize", "--in", str(bad), "--out", str(tmp_path / "o.ply")]) == 2
    assert main(["pipeline", "--scene", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o.ply")]) == 2


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert main(["regularize", "--help"]) == 0
    out = capsys.readouterr().out
    assert "default 0.2" in out and "default 1000" in out and "default 0.3" in out


def test_regularize_flags_override(tmp_path, capsys, rng):
    from splatseed.cloud import ColoredPointCloud
    from splatseed.io import write_ply

    pts = np.c_[rng.uniform(-1, 1, (300, 2)), np.zeros(300)]
    write_ply(tmp_path / "in.ply", ColoredPointCloud(pts, np.full((300, 3), 0.5), support=[{0, 1}] * 300))
    args = ["regularize", "--in", tmp_path / "in.ply", "--out", tmp_path / "o.ply",
            "--keep-sv", "0.2", "--kmeans-k", "30", "--keep-cluster", "0.3", "--normal-th", "0.2"]
    assert run(args) == 0
    err = capsys.readouterr().err
    assert "single_view.in=300" in err and "cluster.in=300" in err
    assert len(read_ply(tmp_path / "o.ply")) < 300


def test_pipeline_smoke_and_reproducible(tmp_path, capsys):
    outs = []
    for i in range(2):
        o = tmp_path / f"c{i}.ply"
        p0 = tmp_path / f"p0_{i}.ply"
        assert run(["pipeline", "--scene", SCENE, "--seed", 42, "--config", QUICK, "--out", o, "--p0-out", p0]) == 0
        outs.append((o.read_bytes(), p0.read_bytes()))
    assert outs[0] == outs[1]
    err = capsys.readouterr().err
    assert "p0.points=" in err and "normal.out=" in err
    head = outs[0][0].split(b"end_header")[0]
    assert b"comment seed 42" in head and b"comment config_sha256 " in head


def test_seed_changes_output(tmp_path):
    a, b = tmp_path / "a.ply", tmp_path / "b.ply"
    assert run(["pipeline", "--scene", SCENE, "--seed", 1, "--config", QUICK, "--out", a]) == 0
    assert run(["pipeline", "--scene", SCENE, "--seed", 2, "--config", QUICK, "--out", b]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_init_selfinit_regularize_chain(tmp_path):
    p0, p1, ck, reg = (tmp_path / n for n in ("p0.ply", "p1.ply", "ck.ply", "reg.ply"))
    common = ["--scene", SCENE, "--config", QUICK]
    assert run(["init", *common, "--out", p0]) == 0
    assert run(["selfinit", *common, "--p0", p0, "--out", p1, "--checkpoint", ck]) == 0
    assert run(["regularize", *common, "--in", p1, "--out", reg]) == 0
    fld = read_ply(ck)
    assert len(read_ply(p1)) == len(fld)
    assert len(read_ply(reg)) <= len(read_ply(p1))


def test_sparse_model_input(tmp_path):
    img = tmp_path / "imgs"
    img.mkdir()
    rng = np.random.default_rng(0)
    for name in ("view_001.png", "view_002.png", "view_003.png"):
        write_image(img / name, rng.random((100, 100, 3)))
    out = tmp_path / "p0.ply"
    assert run(["init", "--sparse", ROOT / "fixtures" / "sparse_model", "--images", img, "--use-tracks", "--out", out]) == 0
    c = read_ply(out)
    assert sorted(c.track_id.tolist()) == [10, 11, 12]
    assert main(["init", "--sparse", str(ROOT / "fixtures" / "sparse_model"), "--out", str(out)]) == 1


def test_eval_and_ablate_csv(tmp_path):
    csv = tmp_path / "e.csv"
    assert run(["eval", "--scene", SCENE, "--config", QUICK, "--out", csv]) == 0
    lines = [ln for ln in csv.read_text().splitlines() if not ln.startswith("#")]
    assert lines[0] == "budget,seed,psnr,ssim,chamfer,points" and len(lines) == 2
    ab = tmp_path / "a.csv"
    assert run(["ablate", "--scene", SCENE, "--config", QUICK, "--budgets", "2,all", "--out", ab]) == 0
    rows = [ln for ln in ab.read_text().splitlines() if not ln.startswith("#")]
    assert len(rows) == 3 and rows[1].startswith("2,")
    assert ab.with_suffix(".dat").exists()
    assert main(["ablate", "--scene", SCENE, "--budgets", "x", "--out", str(ab)]) == 1
