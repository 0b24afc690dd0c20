"""Pinhole cameras, triangulation and fixed-pose point refinement."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEPTH_EPS = 1e-9
DEFAULT_ANGLE_MIN = 1e-3
DEFAULT_HUBER_DELTA = 2.0


class GeometryError(ValueError):
    pass


class NonPositiveDepth(GeometryError):
    pass


class DegenerateRays(GeometryError):
    pass


class BehindCamera(GeometryError):
    pass


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a scalar-first quaternion (normalized first)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform; ``rotation`` is a (w, x, y, z) unit quaternion."""

    rotation: tuple
    translation: tuple

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("rotation must be a unit quaternion")
        if np.asarray(self.translation).shape != (3,):
            raise ValueError("translation must be a 3-vector")

    @classmethod
    def from_rt(cls, R, t) -> "CameraPose":
        return cls(tuple(rotmat_to_quat(R)), tuple(float(v) for v in np.asarray(t, dtype=float)))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        """Camera at ``eye`` looking at ``target``; image y points away from ``up``."""
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=float))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls.from_rt(R, -R @ eye)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=float)


@dataclass(frozen=True)
class CameraModel:
    intrinsics: CameraIntrinsics
    pose: CameraPose

    # cached derived matrices; never part of equality
    _R: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_R", self.pose.R)

    @property
    def R(self) -> np.ndarray:
        return self._R

    @property
    def t(self) -> np.ndarray:
        return self.pose.t

    @property
    def K(self) -> np.ndarray:
        return self.intrinsics.K

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def project_many(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized projection; returns (pixels, depths) with no depth check."""
        pc = self.to_camera(np.atleast_2d(points))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.intrinsics.fx * pc[:, 0] / z + self.intrinsics.cx
            v = self.intrinsics.fy * pc[:, 1] / z + self.intrinsics.cy
        return np.stack([u, v], axis=1), z

    def in_frustum(self, points) -> np.ndarray:
        """True where a point has positive depth and lands inside the image."""
        uv, z = self.project_many(points)
        ok = z > DEPTH_EPS
        ok &= (uv[:, 0] >= -0.5) & (uv[:, 0] <= self.width - 0.5)
        ok &= (uv[:, 1] >= -0.5) & (uv[:, 1] <= self.height - 0.5)
        return ok

    def backproject(self, pixel, depth: float) -> np.ndarray:
        """World point at camera-frame depth ``depth`` along the ray through ``pixel``."""
        return self.center + self.ray_direction(pixel, normalize=False) * depth

    def ray_direction(self, pixel, normalize: bool = True) -> np.ndarray:
        k = self.intrinsics
        d_cam = np.array([(pixel[0] - k.cx) / k.fx, (pixel[1] - k.cy) / k.fy, 1.0])
        d = self.R.T @ d_cam
        return d / np.linalg.norm(d) if normalize else d

    def scaled(self, factor: int) -> "CameraModel":
        """Camera for an image box-downsampled by an integer ``factor``.

        Pixel centers sit on integer coordinates, so a block of ``factor``
        source pixels maps to one target pixel centered at their mean.
        """
        if factor == 1:
            return self
        k = self.intrinsics
        off = (factor - 1) / 2.0
        intr = CameraIntrinsics(
            fx=k.fx / factor,
            fy=k.fy / factor,
            cx=(k.cx - off) / factor,
            cy=(k.cy - off) / factor,
            width=k.width // factor,
            height=k.height // factor,
        )
        return CameraModel(intr, self.pose)


@dataclass(frozen=True)
class Observation:
    view_id: int
    pixel: tuple


@dataclass
class FeatureTrack:
    observations: list
    track_id: int = -1

    def __post_init__(self):
        ids = [o.view_id for o in self.observations]
        if len(set(ids)) != len(ids):
            raise ValueError("track observations must come from distinct views")

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def view_ids(self) -> list:
        return [o.view_id for o in self.observations]


@dataclass
class Point3D:
    position: np.ndarray
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    track_length: int = 0
    track_id: int = -1
    converged: bool = True
    cost: float = 0.0


def project(camera: CameraModel, point) -> np.ndarray:
    pc = camera.to_camera(np.asarray(point, dtype=float))
    if pc[2] <= DEPTH_EPS:
        raise NonPositiveDepth(f"point depth {pc[2]:.3g} is not in front of the camera")
    k = camera.intrinsics
    return np.array([k.fx * pc[0] / pc[2] + k.cx, k.fy * pc[1] / pc[2] + k.cy])


def triangulate_two_view(
    obs_a: Observation,
    obs_b: Observation,
    cam_a: CameraModel,
    cam_b: CameraModel,
    angle_min: float = DEFAULT_ANGLE_MIN,
) -> Point3D:
    """Midpoint of the shortest segment joining the two back-projected rays."""
    c1, c2 = cam_a.center, cam_b.center
    d1 = cam_a.ray_direction(obs_a.pixel)
    d2 = cam_b.ray_direction(obs_b.pixel)
    cosang = float(np.clip(d1 @ d2, -1.0, 1.0))
    angle = math.acos(cosang)
    if obs_a.view_id == obs_b.view_id or angle <= angle_min:
        raise DegenerateRays(f"ray angle {angle:.3g} rad below {angle_min:.3g}")
    # minimize |c1 + s d1 - (c2 + u d2)|^2
    w = c1 - c2
    b = d1 @ d2
    denom = 1.0 - b * b
    s = (b * (d2 @ w) - (d1 @ w)) / denom
    u = ((d2 @ w) - b * (d1 @ w)) / denom
    X = 0.5 * ((c1 + s * d1) + (c2 + u * d2))
    za = cam_a.to_camera(X)[2]
    zb = cam_b.to_camera(X)[2]
    if za <= DEPTH_EPS or zb <= DEPTH_EPS:
        raise BehindCamera("triangulated point lies behind a camera")
    return Point3D(position=X, track_length=2)


def huber(residual_sq, delta: float = DEFAULT_HUBER_DELTA):
    """Huber loss evaluated on a squared residual: s/2 below delta^2, delta*sqrt(s) - delta^2/2 above."""
    s = np.asarray(residual_sq, dtype=float)
    out = np.where(s <= delta * delta, 0.5 * s, delta * np.sqrt(s) - 0.5 * delta * delta)
    return out if out.ndim else float(out)


def huber_weight(residual_sq, delta: float = DEFAULT_HUBER_DELTA):
    """d huber / d s."""
    s = np.asarray(residual_sq, dtype=float)
    return np.where(s <= delta * delta, 0.5, 0.5 * delta / np.sqrt(np.maximum(s, 1e-300)))


def _residuals_and_jacobian(X, cams, pixels):
    res = np.empty((len(cams), 2))
    J = np.empty((len(cams), 2, 3))
    for i, (cam, px) in enumerate(zip(cams, pixels)):
        pc = cam.R @ X + cam.t
        x, y, z = pc
        k = cam.intrinsics
        res[i] = (k.fx * x / z + k.cx - px[0], k.fy * y / z + k.cy - px[1])
        dproj = np.array([[k.fx / z, 0.0, -k.fx * x / (z * z)], [0.0, k.fy / z, -k.fy * y / (z * z)]])
        J[i] = dproj @ cam.R
    return res, J


def robust_cost(X, cams, pixels, delta: float = DEFAULT_HUBER_DELTA) -> float:
    """Sum of Huber(|reprojection residual|^2); +inf if any depth is non-positive."""
    for cam in cams:
        if (cam.R @ X + cam.t)[2] <= DEPTH_EPS:
            return math.inf
    res, _ = _residuals_and_jacobian(X, cams, pixels)
    return float(np.sum(huber(np.sum(res * res, axis=1), delta)))


@dataclass
class RefineResult:
    position: np.ndarray
    cost_history: list
    converged: bool
    iterations: int


def refine_point(
    X0,
    cams: Sequence[CameraModel],
    pixels,
    delta: float = DEFAULT_HUBER_DELTA,
    max_iters: int = 20,
    step_tol: float = 1e-8,
    damping: float = 1e-3,
) -> RefineResult:
    """Damped Gauss-Newton on one point with fixed cameras.

    Steps that raise the robust cost are rejected (damping x10), so the
    recorded cost history never increases.
    """
    X = np.asarray(X0, dtype=float).copy()
    pixels = np.asarray(pixels, dtype=float)
    cost = robust_cost(X, cams, pixels, delta)
    history = [cost]
    lam = damping
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        res, J = _residuals_and_jacobian(X, cams, pixels)
        w = 2.0 * huber_weight(np.sum(res * res, axis=1), delta)
        H = np.einsum("i,iaj,iak->jk", w, J, J)
        g = np.einsum("i,iaj,ia->j", w, J, res)
        accepted = False
        while not accepted:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                step = np.zeros(3)
            new_cost = robust_cost(X + step, cams, pixels, delta)
            if new_cost <= cost:
                accepted = True
                X = X + step
                cost = new_cost
                lam = max(lam / 10.0, 1e-12)
            else:
                lam *= 10.0
                if lam > 1e12:
                    break
        history.append(cost)
        if np.linalg.norm(step) < step_tol * (1.0 + np.linalg.norm(X)) or not accepted:
            converged = True
            break
    return RefineResult(X, history, converged, it)


def _best_pair(track: FeatureTrack, cameras: Sequence[CameraModel]):
    """Observation pair with the widest ray angle."""
    obs = track.observations
    best = None
    best_angle = -1.0
    for i in range(len(obs)):
        di = cameras[obs[i].view_id].ray_direction(obs[i].pixel)
        for j in range(i + 1, len(obs)):
            dj = cameras[obs[j].view_id].ray_direction(obs[j].pixel)
            a = math.acos(float(np.clip(di @ dj, -1.0, 1.0)))
            if a > best_angle:
                best_angle, best = a, (obs[i], obs[j])
    return best


def refine_points(
    tracks: Sequence[FeatureTrack],
    cameras: Sequence[CameraModel],
    min_track: int = 2,
    delta: float = DEFAULT_HUBER_DELTA,
    max_iters: int = 20,
    angle_min: float = DEFAULT_ANGLE_MIN,
) -> list[Point3D]:
    """Triangulate and refine every track with at least ``min_track`` views.

    Tracks whose two-view initialization fails are dropped. Points that hit
    ``max_iters`` without meeting the step tolerance are kept with
    ``converged=False``. Output order follows input track order.
    """
    if min_track not in (2, 3):
        raise ValueError("min_track must be 2 or 3")
    out = []
    n_unconverged = 0
    for idx, track in enumerate(tracks):
        if len(track) < min_track:
            continue
        try:
            a, b = _best_pair(track, cameras)
            init = triangulate_two_view(a, b, cameras[a.view_id], cameras[b.view_id], angle_min)
        except GeometryError:
            continue
        cams = [cameras[o.view_id] for o in track.observations]
        pixels = [o.pixel for o in track.observations]
        r = refine_point(init.position, cams, pixels, delta=delta, max_iters=max_iters)
        if not np.all(np.isfinite(r.position)):
            continue
        n_unconverged += not r.converged
        tid = track.track_id if track.track_id >= 0 else idx
        out.append(
            Point3D(
                position=r.position,
                track_length=len(track),
                track_id=tid,
                converged=r.converged,
                cost=r.cost_history[-1],
            )
        )
    if n_unconverged:
        logger.warning("%d points did not converge within %d iterations", n_unconverged, max_iters)
    return out


def reprojection_errors(point, cams: Sequence[CameraModel], pixels) -> np.ndarray:
    res, _ = _residuals_and_jacobian(np.asarray(point, dtype=float), cams, np.asarray(pixels, float))
    return np.linalg.norm(res, axis=1)


__all__ = [
    "BehindCamera",
    "CameraIntrinsics",
    "CameraModel",
    "CameraPose",
    "DegenerateRays",
    "FeatureTrack",
    "GeometryError",
    "NonPositiveDepth",
    "Observation",
    "Point3D",
    "huber",
    "project",
    "quat_to_rotmat",
    "refine_point",
    "refine_points",
    "reprojection_errors",
    "triangulate_two_view",
]
