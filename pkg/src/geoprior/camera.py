"""Pinhole camera, depth back-projection, cropping and farthest point sampling.

Conventions: pixel ``(u, v)`` has its centre at integer coordinates (``u`` is
the column, ``v`` the row); camera frame is x right, y down, z forward; the
extrinsics map camera to world, ``X_w = R @ X_c + T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_BOUNDS = (-0.375, -0.5, 0.6, 1.0, 0.5, 1.6)


class EmptyCloudError(ValueError):
    pass


class BehindCameraError(ValueError):
    pass


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.T, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise CameraError("R must be a proper rotation")
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError("principal point outside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def extrinsic(self):
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.T
        return m

    @property
    def center(self):
        return self.T

    def world_to_camera(self, pts):
        return (np.asarray(pts, dtype=np.float64) - self.T) @ self.R

    def camera_to_world(self, pts):
        return np.asarray(pts, dtype=np.float64) @ self.R.T + self.T

    def pixel_rays(self):
        """Unit world-space directions through every pixel centre, (H, W, 3), plus z-per-unit-length."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        d_cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], -1)
        norm = np.linalg.norm(d_cam, axis=-1, keepdims=True)
        d_cam = d_cam / norm
        return d_cam @ self.R.T, d_cam[..., 2]

    def scaled(self, width, height):
        sx, sy = width / self.width, height / self.height
        return replace(self, fx=self.fx * sx, fy=self.fy * sy, cx=(self.cx + 0.5) * sx - 0.5,
                       cy=(self.cy + 0.5) * sy - 0.5, width=width, height=height)


def look_at(eye, target, width, height, fov_deg=60.0, up=(0.0, 0.0, 1.0)):
    """Camera at ``eye`` looking at ``target`` with a horizontal field of view."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-9:
        r = np.cross(f, (0.0, 1.0, 0.0))
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f], axis=1)
    fx = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return CameraModel(fx, fx, (width - 1) / 2, (height - 1) / 2, R, eye, width, height)


@dataclass
class Observation:
    rgb: np.ndarray
    depth: np.ndarray
    camera: CameraModel
    timestep: int = 0

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.rgb.shape[:2] != self.depth.shape:
            raise ValueError("rgb and depth sizes differ")
        if (self.depth < 0).any():
            raise ValueError("negative depth")
        if self.rgb.min() < 0 or self.rgb.max() > 1:
            raise ValueError("rgb outside [0, 1]")


@dataclass
class PointCloud:
    points: np.ndarray
    features: np.ndarray | None = None
    colors: np.ndarray | None = None
    pixels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = len(self.points)
        for name in ("features", "colors", "pixels"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ValueError(f"{name} has {len(v)} rows, expected {n}")

    def __len__(self):
        return len(self.points)

    def select(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return PointCloud(self.points[idx], pick(self.features), pick(self.colors), pick(self.pixels))

    @staticmethod
    def concatenate(clouds):
        clouds = list(clouds)
        cat = lambda name: (None if any(getattr(c, name) is None for c in clouds)
                            else np.concatenate([getattr(c, name) for c in clouds]))
        return PointCloud(np.concatenate([c.points for c in clouds]), cat("features"), cat("colors"),
                          cat("pixels"))


def back_project(obs: Observation) -> PointCloud:
    """Lift every valid-depth pixel to a world point; ``pixels`` keeps (u, v)."""
    cam = obs.camera
    v, u = np.nonzero(obs.depth > 0)
    if len(u) == 0:
        raise EmptyCloudError("depth map has no valid pixels")
    z = obs.depth[v, u]
    pc = np.stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z], axis=1)
    return PointCloud(cam.camera_to_world(pc), colors=obs.rgb[v, u].copy(),
                      pixels=np.stack([u, v], axis=1))


def project_points(points, camera: CameraModel):
    """Vectorised world-to-pixel projection; returns (u, v, z_cam) arrays."""
    pc = camera.world_to_camera(np.asarray(points).reshape(-1, 3))
    z = pc[:, 2]
    if (z <= 1e-9).any():
        raise BehindCameraError("point behind camera")
    return camera.fx * pc[:, 0] / z + camera.cx, camera.fy * pc[:, 1] / z + camera.cy, z


def project(point, camera: CameraModel):
    u, v, z = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), camera)
    return float(u[0]), float(v[0]), float(z[0])


def _check_bounds(bounds):
    b = np.asarray(bounds, dtype=np.float64)
    if b.shape != (6,) or not (b[:3] < b[3:]).all():
        raise ValueError(f"invalid bounds {bounds}")
    return b


def inside_bounds(points, bounds):
    b = _check_bounds(bounds)
    p = np.asarray(points)
    return np.all((p >= b[:3]) & (p <= b[3:]), axis=1)


def crop(cloud: PointCloud, bounds=DEFAULT_BOUNDS) -> PointCloud:
    keep = np.nonzero(inside_bounds(cloud.points, bounds))[0]
    if len(keep) == 0:
        raise EmptyCloudError("no points inside bounds")
    return cloud.select(keep)


def farthest_point_indices(points, n, seed_index=0):
    """Greedy FPS on squared distances; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    N = len(points)
    if N == 0:
        raise EmptyCloudError("cannot sample from an empty cloud")
    if n < 1:
        raise ValueError("n must be >= 1")
    if N <= n:
        return np.arange(N)
    idx = np.empty(n, dtype=np.intp)
    idx[0] = seed_index
    mind = np.sum((points - points[seed_index]) ** 2, axis=1)
    for k in range(1, n):
        j = int(np.argmax(mind))
        idx[k] = j
        np.minimum(mind, np.sum((points - points[j]) ** 2, axis=1), out=mind)
    return idx


def farthest_point_sample(cloud: PointCloud, n=512, seed_index=0) -> PointCloud:
    if len(cloud) <= n:
        return cloud
    return cloud.select(farthest_point_indices(cloud.points, n, seed_index))
