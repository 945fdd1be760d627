"""Synthetic ground truth: primitive scenes, an analytic RGB-D raycaster, camera rig,
fused multi-view point clouds and scripted manipulation trajectories."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import (DEFAULT_BOUNDS, CameraModel, Observation, PointCloud, _check_bounds,
                     back_project, crop, farthest_point_sample, look_at)
from .diffcore import ContractError
from .policy import TrajectoryFrame, select_keyframes

LIGHT_DIR = np.array([-0.4, -0.3, -1.0]) / np.linalg.norm([-0.4, -0.3, -1.0])
DOWN_QUAT = np.array([0.0, 1.0, 0.0, 0.0])  # gripper pointing down


class GenerationError(RuntimeError):
    pass


def quat_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class Primitive:
    shape: str  # "sphere" | "box"
    center: np.ndarray
    size: np.ndarray  # radius (1,) for spheres, half-extents (3,) for boxes
    albedo: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    checker: float = 0.0  # checker cell size in metres, 0 disables

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive {self.shape!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.rotation = self.rotation / np.linalg.norm(self.rotation)

    def aabb(self):
        if self.shape == "sphere":
            r = self.size[0]
            return self.center - r, self.center + r
        ext = np.abs(quat_to_matrix(self.rotation)) @ self.size
        return self.center - ext, self.center + ext

    def top(self):
        return np.array([self.center[0], self.center[1], self.aabb()[1][2]])

    def to_record(self):
        return {"shape": self.shape, "center": self.center.tolist(), "size": self.size.tolist(),
                "albedo": self.albedo.tolist(), "rotation": self.rotation.tolist(),
                "checker": self.checker}


@dataclass
class SceneSpec:
    primitives: list
    bounds: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_BOUNDS))
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.bounds = _check_bounds(self.bounds)
        for p in self.primitives:
            lo, hi = p.aabb()
            if (hi < self.bounds[:3]).any() or (lo > self.bounds[3:]).any():
                raise GenerationError("primitive does not intersect the workspace")

    @property
    def center(self):
        return 0.5 * (self.bounds[:3] + self.bounds[3:])

    def with_primitive(self, prim):
        return SceneSpec(self.primitives + [prim], self.bounds, self.seed, self.background)

    def to_record(self):
        return {"bounds": self.bounds.tolist(), "seed": self.seed,
                "background": list(self.background),
                "primitives": [p.to_record() for p in self.primitives]}

    @classmethod
    def from_record(cls, rec):
        prims = [Primitive(p["shape"], p["center"], p["size"], p["albedo"], p["rotation"],
                           p.get("checker", 0.0)) for p in rec["primitives"]]
        return cls(prims, np.array(rec["bounds"]), rec.get("seed", 0),
                   tuple(rec.get("background", (0, 0, 0))))


def random_scene(seed, n_primitives=2, bounds=DEFAULT_BOUNDS, checker=False):
    """Spheres and boxes resting around the workspace middle, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    b = _check_bounds(bounds)
    c = 0.5 * (b[:3] + b[3:])
    prims = []
    for i in range(n_primitives):
        shape = "sphere" if i % 2 == 0 else "box"
        center = c + rng.uniform(-1, 1, 3) * np.array([0.18, 0.15, 0.08])
        albedo = rng.uniform(0.25, 0.95, 3)
        cell = 0.06 if checker else 0.0
        if shape == "sphere":
            prims.append(Primitive("sphere", center, [rng.uniform(0.12, 0.18)], albedo, checker=cell))
        else:
            ang = rng.uniform(0, np.pi)
            q = np.array([np.cos(ang / 2), 0.0, 0.0, np.sin(ang / 2)])
            prims.append(Primitive("box", center, rng.uniform(0.08, 0.14, 3), albedo, q, checker=cell))
    return SceneSpec(prims, b, seed)


# rig ---------------------------------------------------------------------------

@dataclass
class CameraRig:
    count: int = 8
    radius: float = 0.85
    height: float = 0.55
    look_at: tuple | None = None
    width: int = 64
    height_px: int = 64
    fov_deg: float = 60.0
    azimuth_offset: float = 0.0

    def cameras(self, target=None):
        tgt = np.asarray(self.look_at if self.look_at is not None else target, dtype=np.float64)
        cams = []
        for i in range(self.count):
            az = self.azimuth_offset + 2 * np.pi * i / self.count
            eye = tgt + np.array([self.radius * np.cos(az), self.radius * np.sin(az), self.height])
            cams.append(look_at(eye, tgt, self.width, self.height_px, self.fov_deg))
        return cams

    def held_out(self, count=4):
        """Cameras at azimuths halfway between training cameras."""
        step = 2 * np.pi / self.count
        return CameraRig(count, self.radius, self.height, self.look_at, self.width, self.height_px,
                         self.fov_deg, self.azimuth_offset + step / 2)


def scene_rig(scene: SceneSpec, **kw):
    kw.setdefault("look_at", tuple(scene.center))
    return CameraRig(**kw)


# raycasting --------------------------------------------------------------------

def _hit_sphere(o, d, prim):
    oc = o - prim.center
    b = d @ oc
    c = oc @ oc - prim.size[0] ** 2
    disc = b * b - c
    t = np.full(d.shape[0], np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    tt = np.where(t0 > 1e-9, t0, t1)
    ok &= tt > 1e-9
    t[ok] = tt[ok]
    pts = o + np.where(ok, t, 0.0)[:, None] * d
    n = (pts - prim.center) / prim.size[0]
    return t, n


def _hit_box(o, d, prim):
    R = quat_to_matrix(prim.rotation)
    ol = (o - prim.center) @ R
    dl = d @ R
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        ta = (-prim.size - ol) * inv
        tb = (prim.size - ol) * inv
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    tn = tmin.max(axis=1)
    tf = tmax.min(axis=1)
    t = np.full(d.shape[0], np.inf)
    ok = (tn <= tf) & (tf > 1e-9)
    tt = np.where(tn > 1e-9, tn, tf)
    t[ok] = tt[ok]
    axis = np.argmax(tmin, axis=1)
    nl = np.zeros_like(dl)
    nl[np.arange(len(dl)), axis] = -np.sign(dl[np.arange(len(dl)), axis])
    return t, nl @ R.T


def _checker(points, cell):
    k = np.floor(points / cell).astype(np.int64).sum(axis=1) % 2
    return np.where(k == 0, 1.0, 0.55)


def raycast(scene: SceneSpec, camera: CameraModel, ambient=0.3, light_dir=LIGHT_DIR) -> Observation:
    """Exact nearest-hit RGB-D rendering; depth is camera-frame z (0 where nothing is hit)."""
    dirs, zscale = camera.pixel_rays()
    H, W = camera.height, camera.width
    d = dirs.reshape(-1, 3)
    o = np.broadcast_to(camera.T, d.shape)
    best = np.full(d.shape[0], np.inf)
    normal = np.zeros_like(d)
    color = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), d.shape).copy()
    for prim in scene.primitives:
        t, n = (_hit_sphere if prim.shape == "sphere" else _hit_box)(camera.T, d, prim)
        closer = t < best
        if not closer.any():
            continue
        best[closer] = t[closer]
        normal[closer] = n[closer]
        alb = np.broadcast_to(prim.albedo, (closer.sum(), 3))
        if prim.checker > 0:
            pts = camera.T + best[closer, None] * d[closer]
            alb = alb * _checker(pts, prim.checker)[:, None]
        shade = ambient + (1 - ambient) * np.clip(normal[closer] @ -light_dir, 0.0, None)
        color[closer] = alb * shade[:, None]
    hit = np.isfinite(best)
    depth = np.where(hit, best * zscale.reshape(-1), 0.0)
    return Observation(np.clip(color, 0.0, 1.0).reshape(H, W, 3), depth.reshape(H, W), camera)


def render_views(scene, cameras):
    return [raycast(scene, c) for c in cameras]


def fuse_ground_truth(scene: SceneSpec, rig_or_cameras, samples=2744, observations=None):
    """Union of back-projected views, cropped to the workspace, FPS-downsampled."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    cams = rig_or_cameras.cameras(scene.center) if isinstance(rig_or_cameras, CameraRig) else rig_or_cameras
    obs = observations if observations is not None else render_views(scene, cams)
    clouds = []
    for ob in obs:
        if (ob.depth > 0).any():
            clouds.append(back_project(ob))
    if not clouds:
        raise ContractError("no view observed any surface")
    union = PointCloud.concatenate([PointCloud(c.points, colors=c.colors) for c in clouds])
    return farthest_point_sample(crop(union, scene.bounds), samples, 0)


# trajectories ---------------------------------------------------------------------

GRIPPER_RADIUS = 0.03


def _frame_obs(scene, camera, pos, rgb=(0.6, 0.6, 0.6)):
    eff = Primitive("sphere", pos, [GRIPPER_RADIUS], rgb)
    return raycast(SceneSpec(scene.primitives + [eff], scene.bounds, scene.seed, scene.background),
                   camera)


def script_trajectory(scene: SceneSpec, task="reach", steps=12, target_index=0, camera=None,
                      start=None, velocity_threshold=1e-3, render=True):
    """Constant-velocity scripted demonstration with next-keyframe expert actions.

    ``reach`` moves to just above the target primitive; ``pick`` descends to it,
    closes the gripper at the contact step and lifts.
    """
    if task not in ("reach", "pick"):
        raise GenerationError(f"unknown task {task!r}")
    if not 0 <= target_index < len(scene.primitives):
        raise GenerationError("target primitive does not exist")
    if steps < 3:
        raise GenerationError("need at least 3 steps")
    b = scene.bounds
    goal = scene.primitives[target_index].top() + np.array([0, 0, 0.05])
    if not np.all((goal >= b[:3]) & (goal <= b[3:])):
        raise GenerationError("target is outside the workspace")
    start = np.array([b[0] + 0.15, scene.center[1], b[5] - 0.1]) if start is None else np.asarray(start)
    if task == "reach":
        s = np.linspace(0.0, 1.0, steps)
        pos = start + s[:, None] * (goal - start)
        grip = np.zeros(steps, dtype=int)
    else:
        contact = steps // 2
        lift = goal + np.array([0, 0, 0.2])
        if lift[2] > b[5]:
            lift[2] = b[5]
        s1 = np.linspace(0.0, 1.0, contact + 1)
        s2 = np.linspace(0.0, 1.0, steps - contact)[1:]
        pos = np.concatenate([start + s1[:, None] * (goal - start), goal + s2[:, None] * (lift - goal)])
        grip = (np.arange(steps) >= contact).astype(int)
    if camera is None:
        camera = scene_rig(scene).cameras()[0]
    frames = []
    for t in range(steps):
        obs = _frame_obs(scene, camera, pos[t]) if render else None
        if obs is not None:
            obs.timestep = t
        frames.append(TrajectoryFrame(obs, np.concatenate([pos[t], DOWN_QUAT]), int(grip[t]),
                                      target_index, None))
    keys = select_keyframes(frames, velocity_threshold)
    for t, fr in enumerate(frames):
        k = next(k for k in keys if k > t) if t < keys[-1] else keys[-1]
        fr.expert_action = np.concatenate([frames[k].pose, [float(frames[k].gripper)]])
    return frames
