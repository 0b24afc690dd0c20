"""Procedural ground-truth scenes rendered by ray casting.

Surfaces carry band-limited textures so smooth and detailed regions have an
exact definition, and expose analytic point/normal sampling for the oracles.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import CameraIntrinsics, CameraModel, CameraPose


class InvalidSpec(ValueError):
    pass


# --- textures -----------------------------------------------------------------


@dataclass
class Texture:
    """Sum of random sinusoids with wavelengths in [wl_min, wl_max] (scene units).

    ``kind`` is one of ``constant``, ``smooth``, ``detail`` or ``split``; a
    split texture is ``smooth`` where the local u-coordinate is below
    ``split_at`` and ``detail`` above it.
    """

    kind: str = "smooth"
    base: tuple = (0.5, 0.5, 0.5)
    amplitude: float = 0.25
    wl_smooth: tuple = (0.6, 1.2)
    wl_detail: tuple = (0.06, 0.12)
    detail_amplitude: float = 0.35
    n_waves: int = 6
    split_at: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "smooth", "detail", "split"):
            raise InvalidSpec(f"unknown texture kind {self.kind!r}")
        rng = np.random.default_rng(self.seed)
        self._smooth = self._waves(rng, self.wl_smooth)
        self._detail = self._waves(rng, self.wl_detail)
        self._tint = rng.uniform(0.6, 1.0, size=(2, 3))

    def _waves(self, rng, wl):
        ang = rng.uniform(0, np.pi, self.n_waves)
        lam = rng.uniform(wl[0], wl[1], self.n_waves)
        k = (2 * np.pi / lam)[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        phase = rng.uniform(0, 2 * np.pi, (self.n_waves, 3))
        return k, phase

    @staticmethod
    def _eval(waves, uv, amp, n):
        k, phase = waves
        arg = uv @ k.T  # (P, n_waves)
        out = np.zeros((len(uv), 3))
        for c in range(3):
            out[:, c] = np.sin(arg + phase[None, :, c]).sum(axis=1)
        return amp * out / math.sqrt(n / 2.0) / 2.0

    def __call__(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        base = np.broadcast_to(np.asarray(self.base, float), (len(uv), 3)).copy()
        if self.kind == "constant":
            return base
        smooth = base + self._eval(self._smooth, uv, self.amplitude, self.n_waves) * self._tint[0]
        if self.kind == "smooth":
            return np.clip(smooth, 0, 1)
        detail = base + self._eval(self._detail, uv, self.detail_amplitude, self.n_waves) * self._tint[1]
        if self.kind == "detail":
            return np.clip(detail, 0, 1)
        sel = (uv[:, 0] >= self.split_at)[:, None]
        return np.clip(np.where(sel, detail, smooth), 0, 1)

    def is_smooth(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        if self.kind == "split":
            return uv[:, 0] < self.split_at
        return np.full(len(uv), self.kind in ("constant", "smooth"))


# --- surfaces -----------------------------------------------------------------


@dataclass
class Plane:
    """Rectangle ``center + s*u_axis + t*v_axis`` with |s| <= half_u, |t| <= half_v."""

    center: tuple
    u_axis: tuple
    v_axis: tuple
    half_u: float
    half_v: float
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        self.c = np.asarray(self.center, float)
        self.u = np.asarray(self.u_axis, float)
        self.u /= np.linalg.norm(self.u)
        v = np.asarray(self.v_axis, float)
        v -= (v @ self.u) * self.u
        self.v = v / np.linalg.norm(v)
        self.n = np.cross(self.u, self.v)

    @property
    def area(self) -> float:
        return 4 * self.half_u * self.half_v

    def intersect(self, origins, dirs):
        denom = dirs @ self.n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.c - origins) @ self.n) / denom
        p = origins + t[:, None] * dirs
        d = p - self.c
        s, r = d @ self.u, d @ self.v
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (np.abs(s) <= self.half_u) & (np.abs(r) <= self.half_v)
        return np.where(ok, t, np.inf), np.stack([s, r], axis=1)

    def sample(self, n: int, rng):
        s = rng.uniform(-self.half_u, self.half_u, n)
        r = rng.uniform(-self.half_v, self.half_v, n)
        pts = self.c + s[:, None] * self.u + r[:, None] * self.v
        return pts, np.tile(self.n, (n, 1)), np.stack([s, r], axis=1)


@dataclass
class Sphere:
    center: tuple
    radius: float
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        self.c = np.asarray(self.center, float)

    @property
    def area(self) -> float:
        return 4 * math.pi * self.radius**2

    def _uv(self, p):
        d = (p - self.c) / self.radius
        lon = np.arctan2(d[:, 1], d[:, 0])
        lat = np.arcsin(np.clip(d[:, 2], -1, 1))
        return np.stack([lon * self.radius, lat * self.radius], axis=1)

    def intersect(self, origins, dirs):
        oc = origins - self.c
        b = np.sum(oc * dirs, axis=1)
        cc = np.sum(oc * oc, axis=1) - self.radius**2
        disc = b * b - cc
        sq = np.sqrt(np.maximum(disc, 0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        ok = (disc >= 0) & (t > 1e-9)
        t = np.where(ok, t, np.inf)
        p = origins + np.where(np.isfinite(t), t, 0)[:, None] * dirs
        return t, self._uv(p)

    def sample(self, n: int, rng):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        pts = self.c + self.radius * d
        return pts, d, self._uv(pts)


def box_faces(center, half_extents, texture: Texture) -> list:
    c = np.asarray(center, float)
    h = np.asarray(half_extents, float)
    e = np.eye(3)
    faces = []
    for ax in range(3):
        a1, a2 = (ax + 1) % 3, (ax + 2) % 3
        for sgn in (1.0, -1.0):
            u, v = e[a1], e[a2] * sgn
            faces.append(Plane(tuple(c + sgn * h[ax] * e[ax]), tuple(u), tuple(v), h[a1], h[a2], texture))
    return faces


# --- scene --------------------------------------------------------------------


@dataclass
class SceneSpec:
    """Declarative scene description; ``surfaces`` entries are plain dicts.

    Surface dicts: ``{"type": "plane", center, u_axis, v_axis, half_u, half_v, texture}``,
    ``{"type": "sphere", center, radius, texture}`` or
    ``{"type": "box", center, half_extents, texture}``; ``texture`` is a dict of
    :class:`Texture` fields.
    """

    surfaces: list
    n_cameras: int = 12
    cam_radius: float = 4.0
    cam_height: float = 1.5
    target: tuple = (0.0, 0.0, 0.0)
    arc_degrees: float = 360.0
    arc_start_degrees: float = 0.0
    width: int = 64
    height: int = 64
    focal: float = 64.0
    supersample: int = 2
    up: tuple = (0.0, 0.0, 1.0)
    smooth_box: Optional[list] = None
    name: str = "custom"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        try:
            return cls(**d)
        except TypeError as e:
            raise InvalidSpec(str(e)) from e


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    surfaces: list
    cameras: list
    images: list

    def gt_samples(self, n: int = 4000, seed: Optional[int] = None):
        """Area-weighted surface samples, returned as (points, normals)."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        areas = np.array([s.area for s in self.surfaces])
        counts = np.floor(n * areas / areas.sum()).astype(int)
        counts[np.argmax(areas)] += n - counts.sum()
        pts, nrm = [], []
        for s, k in zip(self.surfaces, counts):
            p, nn, _ = s.sample(int(k), rng)
            pts.append(p)
            nrm.append(nn)
        return np.concatenate(pts), np.concatenate(nrm)

    def smooth_region_mask(self, points) -> np.ndarray:
        """True for points inside the spec's axis-aligned smooth-region box."""
        if self.spec.smooth_box is None:
            return np.zeros(len(points), dtype=bool)
        lo, hi = np.asarray(self.spec.smooth_box, float)
        p = np.atleast_2d(points)
        return np.all((p >= lo) & (p <= hi), axis=1)

    def views(self, ids=None) -> list:
        from .frequency_sfm import ViewImage

        ids = range(len(self.cameras)) if ids is None else ids
        return [ViewImage(i, self.images[i], self.cameras[i]) for i in ids]


def _build_surfaces(spec: SceneSpec, seed: int) -> list:
    out = []
    for i, d in enumerate(spec.surfaces):
        d = dict(d)
        kind = d.pop("type", None)
        tex = dict(d.pop("texture", {}))
        tex.setdefault("seed", seed * 1000 + i)
        try:
            texture = Texture(**tex)
            if kind == "plane":
                out.append(Plane(texture=texture, **d))
            elif kind == "sphere":
                out.append(Sphere(texture=texture, **d))
            elif kind == "box":
                out.extend(box_faces(d["center"], d["half_extents"], texture))
            else:
                raise InvalidSpec(f"unknown surface type {kind!r}")
        except (TypeError, KeyError) as e:
            raise InvalidSpec(f"surface {i}: {e}") from e
    return out


def ring_cameras(spec: SceneSpec) -> list:
    """Cameras evenly spaced by arc length on a horizontal circle around ``target``."""
    tgt = np.asarray(spec.target, float)
    full = abs(spec.arc_degrees - 360.0) < 1e-9
    n = spec.n_cameras
    if full:
        angles = spec.arc_start_degrees + np.arange(n) * 360.0 / n
    else:
        angles = spec.arc_start_degrees + (np.linspace(0, spec.arc_degrees, n) if n > 1 else np.zeros(1))
    intr = CameraIntrinsics(spec.focal, spec.focal, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0, spec.width, spec.height)
    cams = []
    for a in np.deg2rad(angles):
        eye = tgt + np.array([spec.cam_radius * math.cos(a), spec.cam_radius * math.sin(a), spec.cam_height])
        cams.append(CameraModel(intr, CameraPose.look_at(eye, tgt, spec.up)))
    return cams


def cast_rays(surfaces: list, camera: CameraModel, pixels) -> tuple:
    """First surface hit behind each (x, y) pixel: (points, hit mask)."""
    px = np.atleast_2d(np.asarray(pixels, float))
    k = camera.intrinsics
    d_cam = np.stack([(px[:, 0] - k.cx) / k.fx, (px[:, 1] - k.cy) / k.fy, np.ones(len(px))], axis=1)
    dirs = d_cam @ camera.R
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape)
    best_t = np.full(len(dirs), np.inf)
    for s in surfaces:
        t, _ = s.intersect(origins, dirs)
        best_t = np.minimum(best_t, t)
    hit = np.isfinite(best_t)
    pts = origins + np.where(hit, best_t, 0.0)[:, None] * dirs
    return pts, hit


def render_gt(surfaces: list, camera: CameraModel, supersample: int = 1) -> np.ndarray:
    """Ray-cast albedo image; background is black."""
    w, h = camera.width, camera.height
    ss = supersample
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xs, ys = np.broadcast_arrays(xs[..., None, None] + offs[None, None, None, :], ys[..., None, None] + offs[None, None, :, None])
    xs, ys = xs.reshape(-1), ys.reshape(-1)
    k = camera.intrinsics
    d_cam = np.stack([(xs - k.cx) / k.fx, (ys - k.cy) / k.fy, np.ones_like(xs)], axis=1)
    dirs = d_cam @ camera.R
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape)
    best_t = np.full(len(dirs), np.inf)
    color = np.zeros((len(dirs), 3))
    for s in surfaces:
        t, uv = s.intersect(origins, dirs)
        hit = t < best_t
        if hit.any():
            best_t[hit] = t[hit]
            color[hit] = s.texture(uv[hit])
    img = color.reshape(h, w, ss * ss, 3).mean(axis=2)
    return np.clip(img, 0.0, 1.0)


def generate_scene(spec: SceneSpec, seed: int = 42) -> SyntheticScene:
    if not spec.surfaces:
        raise InvalidSpec("scene needs at least one surface")
    if spec.n_cameras < 1 or spec.width < 8 or spec.height < 8:
        raise InvalidSpec("need at least one camera and an image of at least 8x8")
    surfaces = _build_surfaces(spec, seed)
    cameras = ring_cameras(spec)
    images = [render_gt(surfaces, c, spec.supersample) for c in cameras]
    for i, img in enumerate(images):
        if not np.any(img > 0):
            raise InvalidSpec(f"camera {i} sees no surface")
    return SyntheticScene(spec, seed, surfaces, cameras, images)


# --- presets ------------------------------------------------------------------


def half_smooth_spec() -> SceneSpec:
    """A wall: smooth for x < 0.2, finely detailed to the right."""
    tex = {"kind": "split", "split_at": 0.2, "base": (0.55, 0.5, 0.45), "wl_smooth": (0.25, 0.5),
           "amplitude": 0.12, "wl_detail": (0.12, 0.25), "detail_amplitude": 0.4}
    return SceneSpec(
        name="half_smooth",
        surfaces=[
            {"type": "plane", "center": (0.0, 0.0, 0.0), "u_axis": (1.0, 0.0, 0.0),
             "v_axis": (0.0, 0.0, -1.0), "half_u": 1.2, "half_v": 1.2, "texture": tex},
        ],
        n_cameras=4,
        cam_radius=3.2,
        cam_height=0.0,
        arc_degrees=30.0,
        arc_start_degrees=-105.0,
        width=128,
        height=128,
        focal=128.0,
        smooth_box=[(-1.2, -0.05, -1.2), (0.2, 0.05, 1.2)],
    )


def standard_spec() -> SceneSpec:
    """Ground plane, a box and a sphere seen from a 12-camera, 150 degree arc."""
    return SceneSpec(
        name="standard",
        surfaces=[
            {"type": "plane", "center": (0.0, 0.0, 0.0), "u_axis": (1.0, 0.0, 0.0),
             "v_axis": (0.0, 1.0, 0.0), "half_u": 1.6, "half_v": 1.6,
             "texture": {"kind": "split", "split_at": 0.0, "base": (0.45, 0.5, 0.4), "wl_detail": (0.12, 0.25)}},
            {"type": "box", "center": (-0.45, 0.3, 0.35), "half_extents": (0.35, 0.35, 0.35),
             "texture": {"kind": "detail", "base": (0.7, 0.4, 0.3), "wl_detail": (0.12, 0.25)}},
            {"type": "sphere", "center": (0.5, -0.35, 0.4), "radius": 0.4,
             "texture": {"kind": "smooth", "base": (0.3, 0.45, 0.7), "amplitude": 0.35, "wl_detail": (0.12, 0.25)}},
        ],
        n_cameras=12,
        cam_radius=3.6,
        cam_height=2.2,
        target=(0.0, 0.0, 0.2),
        arc_degrees=150.0,
        arc_start_degrees=-165.0,
        width=128,
        height=128,
        focal=128.0,
    )


PRESETS = {"half_smooth": half_smooth_spec, "standard": standard_spec}


def load_scene_spec(ref: str) -> SceneSpec:
    """Resolve a scene reference: a JSON file path (``.json`` optional) or a preset name."""
    p = Path(ref)
    for cand in (p, p.with_suffix(".json")):
        if cand.is_file():
            return SceneSpec.from_json(cand.read_text())
    if p.name in PRESETS:
        return PRESETS[p.name]()
    raise InvalidSpec(f"unknown scene {ref!r}")
