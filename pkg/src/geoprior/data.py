"""Scene and trajectory datasets, in memory and on disk.

Scene layout::

    <root>/scenes/<id>/view_<v>.ppm      RGB, 8-bit
    <root>/scenes/<id>/view_<v>.depth    float64 depth raster (see ``io``)
    <root>/scenes/<id>/manifest.txt      "scene <json>" then one "camera <v> <json>" per view
    <root>/scenes/<id>/gt_full.ply       fused ground-truth cloud

Trajectory layout::

    <root>/trajectories/<id>/frame_<t>.{ppm,depth}
    <root>/trajectories/<id>/manifest.txt  "camera <json>", "scene <json>", then per frame
                                           "frame <t> <task_id> <gripper> <pose x7> <action x8>"
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .camera import Observation, PointCloud
from .policy import TrajectoryFrame
from .scenes import (GenerationError, SceneSpec, fuse_ground_truth, random_scene, render_views,
                     scene_rig, script_trajectory)


@dataclass
class SceneData:
    scene_id: str
    spec: SceneSpec
    observations: list
    gt: PointCloud

    @property
    def cameras(self):
        return [o.camera for o in self.observations]


def scene_seed(base_seed, index):
    return int(base_seed) * 100_003 + index


def make_scene(cfg, index, seed=None):
    seed = cfg["seed"] if seed is None else seed
    spec = random_scene(scene_seed(seed, index), cfg["scene.primitives"], cfg["network.scene_bounds"],
                        cfg["scene.checker"])
    n = cfg["scene.image_size"]
    rig = scene_rig(spec, count=cfg["train.num_views"], width=n, height_px=n)
    obs = render_views(spec, rig.cameras())
    gt = fuse_ground_truth(spec, rig, cfg["scene.gt_samples"], observations=obs)
    return SceneData(f"{index:04d}", spec, obs, gt)


def make_scenes(cfg, count=None, seed=None):
    count = cfg["train.demos"] if count is None else count
    return [make_scene(cfg, i, seed) for i in range(count)]


def held_out_cameras(cfg, spec, count=None):
    n = cfg["scene.image_size"]
    rig = scene_rig(spec, count=cfg["train.num_views"], width=n, height_px=n)
    return rig.held_out(cfg["eval.held_out_views"] if count is None else count).cameras()


# scenes on disk ---------------------------------------------------------------

def write_scene(root, scene: SceneData):
    d = Path(root) / "scenes" / scene.scene_id
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"scene {json.dumps(scene.spec.to_record())}"]
    for v, ob in enumerate(scene.observations):
        io.write_ppm(d / f"view_{v}.ppm", ob.rgb)
        io.write_depth(d / f"view_{v}.depth", ob.depth)
        lines.append(f"camera {v} {json.dumps(io.camera_to_record(ob.camera))}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")
    io.write_ply(d / "gt_full.ply", scene.gt)
    return d


def read_scene(d) -> SceneData:
    d = Path(d)
    spec = None
    cams = {}
    for line in (d / "manifest.txt").read_text().splitlines():
        kind, rest = line.split(" ", 1)
        if kind == "scene":
            spec = SceneSpec.from_record(json.loads(rest))
        elif kind == "camera":
            v, rec = rest.split(" ", 1)
            cams[int(v)] = io.camera_from_record(json.loads(rec))
    if spec is None:
        raise OSError(f"{d}: manifest has no scene record")
    obs = [Observation(io.read_ppm(d / f"view_{v}.ppm"), io.read_depth(d / f"view_{v}.depth"), cams[v])
           for v in sorted(cams)]
    return SceneData(d.name, spec, obs, io.read_ply(d / "gt_full.ply"))


def write_dataset(root, scenes):
    return [write_scene(root, s) for s in scenes]


def read_dataset(root):
    base = Path(root) / "scenes"
    if not base.is_dir():
        raise FileNotFoundError(f"no scene dataset under {root}")
    dirs = sorted(p for p in base.iterdir() if (p / "manifest.txt").exists())
    if not dirs:
        raise FileNotFoundError(f"{base} holds no scenes")
    return [read_scene(p) for p in dirs]


# trajectories -----------------------------------------------------------------

@dataclass
class Demo:
    demo_id: str
    spec: SceneSpec
    frames: list


def make_trajectories(cfg, count=None, seed=None, task=None):
    count = cfg["policy.demos"] if count is None else count
    seed = cfg["seed"] if seed is None else seed
    task = cfg["policy.task"] if task is None else task
    n = cfg["scene.image_size"]
    demos = []
    i = 0
    while len(demos) < count:
        spec = random_scene(scene_seed(seed, 50_000 + i), cfg["scene.primitives"],
                            cfg["network.scene_bounds"], cfg["scene.checker"])
        i += 1
        cam = scene_rig(spec, count=cfg["train.num_views"], width=n, height_px=n).cameras()[0]
        try:
            frames = script_trajectory(spec, task, cfg["policy.trajectory_steps"], 0, cam,
                                       velocity_threshold=cfg["policy.velocity_threshold"])
        except GenerationError:
            continue
        demos.append(Demo(f"{len(demos):04d}", spec, frames))
    return demos


def write_trajectories(root, demos):
    for demo in demos:
        d = Path(root) / "trajectories" / demo.demo_id
        d.mkdir(parents=True, exist_ok=True)
        cam = demo.frames[0].observation.camera
        lines = [f"camera {json.dumps(io.camera_to_record(cam))}",
                 f"scene {json.dumps(demo.spec.to_record())}"]
        for t, fr in enumerate(demo.frames):
            io.write_ppm(d / f"frame_{t}.ppm", fr.observation.rgb)
            io.write_depth(d / f"frame_{t}.depth", fr.observation.depth)
            nums = " ".join(repr(float(x)) for x in np.concatenate([fr.pose, fr.expert_action]))
            lines.append(f"frame {t} {fr.task_id} {fr.gripper} {nums}")
        (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_trajectories(root):
    base = Path(root) / "trajectories"
    if not base.is_dir():
        raise FileNotFoundError(f"no trajectories under {root}")
    demos = []
    for d in sorted(p for p in base.iterdir() if (p / "manifest.txt").exists()):
        cam = spec = None
        frames = []
        for line in (d / "manifest.txt").read_text().splitlines():
            kind, rest = line.split(" ", 1)
            if kind == "camera":
                cam = io.camera_from_record(json.loads(rest))
            elif kind == "scene":
                spec = SceneSpec.from_record(json.loads(rest))
            elif kind == "frame":
                parts = rest.split()
                t, task, grip = int(parts[0]), int(parts[1]), int(parts[2])
                vals = np.array([float(x) for x in parts[3:]])
                obs = Observation(io.read_ppm(d / f"frame_{t}.ppm"), io.read_depth(d / f"frame_{t}.depth"),
                                  cam, t)
                frames.append(TrajectoryFrame(obs, vals[:7], grip, task, vals[7:15]))
        demos.append(Demo(d.name, spec, frames))
    if not demos:
        raise FileNotFoundError(f"{base} holds no trajectories")
    return demos
