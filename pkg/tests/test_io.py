from pathlib import Path

import numpy as np
import pytest

from conftest import random_splat_fixture
from splatseed.cloud import ColoredPointCloud, Provenance
from splatseed.geometry import project, triangulate_two_view
from splatseed.io import (
    DanglingReference,
    MalformedHeader,
    TruncatedBody,
    UnsupportedProperty,
    read_image,
    read_ply,
    read_sparse_model,
    write_image,
    write_ply,
    write_sparse_model,
)
from splatseed.splat import GaussianField

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def _cloud(rng, n=50):
    pos = rng.normal(size=(n, 3)).astype(np.float32).astype(float)
    cols = rng.integers(0, 256, size=(n, 3)) / 255.0
    sup = [frozenset(rng.choice(6, size=int(rng.integers(0, 4)), replace=False).tolist()) for _ in range(n)]
    return ColoredPointCloud(
        pos, cols, provenance=rng.integers(0, 2, n), support=sup,
        track_length=[len(s) for s in sup], track_id=rng.integers(-1, 1000, n),
    )


def _same(a, b):
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.colors, b.colors)
    assert np.array_equal(a.provenance, b.provenance)
    assert a.support == b.support
    assert np.array_equal(a.track_length, b.track_length)
    assert np.array_equal(a.track_id, b.track_id)


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip_lossless(tmp_path, rng, binary):
    c = _cloud(rng)
    p = tmp_path / "c.ply"
    write_ply(p, c, binary=binary)
    back = read_ply(p)
    _same(c, back)
    p2 = tmp_path / "c2.ply"
    write_ply(p2, back, binary=binary)
    assert p.read_bytes() == p2.read_bytes()


def test_ascii_equals_binary(tmp_path, rng):
    c = _cloud(rng)
    write_ply(tmp_path / "a.ply", c, binary=False)
    write_ply(tmp_path / "b.ply", c, binary=True)
    _same(read_ply(tmp_path / "a.ply"), read_ply(tmp_path / "b.ply"))


def test_empty_cloud_round_trip(tmp_path):
    write_ply(tmp_path / "e.ply", ColoredPointCloud.empty())
    assert len(read_ply(tmp_path / "e.ply")) == 0


def test_truncated_body(tmp_path, rng):
    p = tmp_path / "c.ply"
    write_ply(p, _cloud(rng))
    data = p.read_bytes()
    p.write_bytes(data[:-7])
    with pytest.raises(TruncatedBody):
        read_ply(p)


def test_malformed_header(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\n")
    with pytest.raises(MalformedHeader):
        read_ply(p)
    p.write_bytes(b"not a ply\n")
    with pytest.raises(MalformedHeader):
        read_ply(p)


def test_missing_xyz_rejected(tmp_path):
    p = tmp_path / "m.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n")
    with pytest.raises(UnsupportedProperty):
        read_ply(p)


def test_unknown_properties_preserved(tmp_path):
    p = tmp_path / "u.ply"
    p.write_bytes(
        b"ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\n"
        b"property float x\nproperty float y\nproperty float z\n"
        b"property uchar red\nproperty uchar green\nproperty uchar blue\n"
        b"property float confidence\nend_header\n"
        b"0 0 0 255 0 0 0.5\n1 2 3 0 0 255 0.25\n"
    )
    c = read_ply(p)
    assert np.allclose(c.colors, [[1, 0, 0], [0, 0, 1]])
    assert np.allclose(c.extra["confidence"], [0.5, 0.25])
    write_ply(tmp_path / "u2.ply", c)
    back = read_ply(tmp_path / "u2.ply")
    assert np.array_equal(back.extra["confidence"], c.extra["confidence"])


def test_big_endian_and_face_element(tmp_path):
    p = tmp_path / "be.ply"
    head = (b"ply\nformat binary_big_endian 1.0\nelement vertex 2\nproperty double x\nproperty double y\n"
            b"property double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n")
    body = np.array([1, 2, 3, 4, 5, 6], ">f8").tobytes() + b"\x03" + np.array([0, 1, 1], ">i4").tobytes()
    p.write_bytes(head + body)
    c = read_ply(p)
    assert np.array_equal(c.positions, [[1, 2, 3], [4, 5, 6.0]])


def test_field_checkpoint_round_trip(tmp_path, rng):
    fld, _, _ = random_splat_fixture(rng, n=30)
    for k in ("means", "log_scales", "quats", "opacity_logits", "colors"):
        setattr(fld, k, getattr(fld, k).astype(np.float32).astype(float))
    write_ply(tmp_path / "f.ply", fld)
    back = read_ply(tmp_path / "f.ply")
    assert isinstance(back, GaussianField)
    for k in ("means", "log_scales", "quats", "opacity_logits", "colors"):
        assert np.array_equal(getattr(back, k), getattr(fld, k))
    text = (tmp_path / "f.ply").read_bytes().split(b"end_header")[0]
    assert b"binary_little_endian" in text and b"property float scale_0" in text


def test_comments_written(tmp_path, rng):
    write_ply(tmp_path / "c.ply", _cloud(rng, 3), comments=["seed 42"])
    assert b"comment seed 42\n" in (tmp_path / "c.ply").read_bytes()


# --- sparse model -------------------------------------------------------------

# hand-verified from the fixture text: 2D coordinates minus the 0.5 pixel-center shift
EXPECTED_TRACKS = {
    10: [(1, (45.7264, 47.6132)), (2, (44.1277, 47.5867)), (3, (47.6206, 46.9894))],
    11: [(1, (55.6224, 45.4184)), (2, (55.8301, 45.4959)), (3, (54.8309, 45.7417))],
    12: [(2, (46.4892, 57.2503)), (3, (48.8328, 56.6392))],
}


def test_sparse_fixture_parses_to_expected_tracks(caplog):
    m = read_sparse_model(FIXTURES / "sparse_model")
    assert sorted(m.cameras) == [1, 2, 3]
    assert m.names[2] == "view_002.png"
    got = {t.track_id: [(o.view_id, o.pixel) for o in t.observations] for t in m.tracks}
    assert set(got) == set(EXPECTED_TRACKS)
    for pid, obs in EXPECTED_TRACKS.items():
        assert [v for v, _ in got[pid]] == [v for v, _ in obs]
        for (_, a), (_, b) in zip(got[pid], obs):
            assert np.allclose(a, b, atol=1e-9)
    assert sorted(len(t) for t in m.tracks) == [2, 3, 3]
    assert np.allclose(m.points.colors[0], [1.0, 128 / 255, 0.0])
    assert m.points.support[2] == frozenset({2, 3})
    assert m.cameras[3].intrinsics.cx == 49.5
    # the observations are consistent with the stored 3D points
    for t, x in zip(m.tracks, m.points.positions):
        for o in t.observations:
            assert np.linalg.norm(project(m.cameras[o.view_id], x) - o.pixel) < 1e-3


def test_sparse_tracks_match_internal_equivalent():
    from splatseed.frequency_sfm import ViewImage, reconstruct_p0

    m = read_sparse_model(FIXTURES / "sparse_model")
    views = [ViewImage(i, np.full((100, 100, 3), 0.5), c) for i, c in m.cameras.items()]
    from splatseed.geometry import FeatureTrack, Observation

    internal = [FeatureTrack([Observation(v, px) for v, px in obs], track_id=pid) for pid, obs in EXPECTED_TRACKS.items()]
    a = reconstruct_p0(views, external_tracks=m.tracks)
    b = reconstruct_p0(views, external_tracks=internal)
    assert np.allclose(a.positions, b.positions, atol=1e-9)
    assert np.array_equal(a.track_id, b.track_id)
    assert np.allclose(a.positions, m.points.positions, atol=1e-3)


def test_sparse_comment_only_and_dangling(tmp_path):
    for f in ("cameras.txt", "images.txt", "points3D.txt"):
        (tmp_path / f).write_text("# nothing here\n")
    m = read_sparse_model(tmp_path)
    assert m.cameras == {} and m.tracks == [] and len(m.points) == 0

    src = FIXTURES / "sparse_model"
    for f in ("cameras.txt", "images.txt"):
        (tmp_path / f).write_text((src / f).read_text())
    (tmp_path / "points3D.txt").write_text("7 0 0 0 1 2 3 0.1 1 0 9 0\n")
    with pytest.raises(DanglingReference):
        read_sparse_model(tmp_path)
    (tmp_path / "points3D.txt").write_text("7 0 0 0 1 2 3 0.1 1 0 2 5\n")
    with pytest.raises(DanglingReference):
        read_sparse_model(tmp_path)
    (tmp_path / "cameras.txt").write_text("1 PINHOLE 100 100 100 100 50 50\n")
    with pytest.raises(DanglingReference):
        read_sparse_model(tmp_path)


def test_sparse_write_read_round_trip(tmp_path):
    m = read_sparse_model(FIXTURES / "sparse_model")
    write_sparse_model(tmp_path, m.cameras, m.tracks, m.points, m.names)
    back = read_sparse_model(tmp_path)
    for a, b in zip(m.tracks, back.tracks):
        assert a.track_id == b.track_id
        for oa, ob in zip(a.observations, b.observations):
            assert oa.view_id == ob.view_id and np.allclose(oa.pixel, ob.pixel, atol=1e-9)
    for i in m.cameras:
        assert np.allclose(m.cameras[i].K, back.cameras[i].K)
        assert np.allclose(m.cameras[i].R, back.cameras[i].R)


def test_image_round_trip(tmp_path, rng):
    px = rng.integers(0, 256, size=(7, 9, 3)) / 255.0
    for ext in ("png", "ppm"):
        write_image(tmp_path / f"i.{ext}", px)
        assert np.array_equal(read_image(tmp_path / f"i.{ext}"), px)


def test_minimal_two_view_fixture():
    m = read_sparse_model(FIXTURES / "sparse_two_view")
    assert len(m.tracks) == 1 and len(m.tracks[0]) == 2
    obs = m.tracks[0].observations
    assert [o.view_id for o in obs] == [1, 2]
    assert np.allclose([obs[0].pixel, obs[1].pixel], [[59.5, 49.5], [39.5, 49.5]])
    # both rays meet at the stored point (0.5, 0, 0)
    x = triangulate_two_view(obs[0], obs[1], m.cameras[1], m.cameras[2]).position
    assert np.allclose(x, [0.5, 0.0, 0.0], atol=1e-12)
