"""File formats: ASCII PLY clouds, P6 PPM images, float64 depth rasters, JSON-lines metrics.

Depth raster layout (``.depth``)::

    GPDEPTH64\\n
    <width> <height>\\n
    width * height little-endian float64 values, row-major, metres (0 = no return)
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .camera import CameraModel, PointCloud

DEPTH_MAGIC = b"GPDEPTH64"


def write_ply(path, cloud: PointCloud):
    pts = np.asarray(cloud.points)
    cols = cloud.colors if cloud.colors is not None else np.full((len(pts), 3), 0.5)
    rgb = np.clip(np.round(np.asarray(cols) * 255), 0, 255).astype(int)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        for name in ("x", "y", "z"):
            fh.write(f"property double {name}\n")
        for name in ("red", "green", "blue"):
            fh.write(f"property uchar {name}\n")
        fh.write("end_header\n")
        for p, c in zip(pts, rgb):
            x, y, z = (float(v) for v in p)
            fh.write(f"{x!r} {y!r} {z!r} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = 0
    i = 1
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        i += 1
    rows = np.array([list(map(float, ln.split())) for ln in lines[i + 1:i + 1 + n]]).reshape(n, 6)
    return PointCloud(rows[:, :3], colors=rows[:, 3:6] / 255.0)


def write_ppm(path, rgb):
    img = np.clip(np.round(np.asarray(rgb) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return pix.reshape(h, w, 3).astype(np.float64) / maxval


def write_depth(path, depth):
    depth = np.asarray(depth, dtype="<f8")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + b"\n" + f"{w} {h}\n".encode())
        fh.write(depth.tobytes())


def read_depth(path):
    data = Path(path).read_bytes()
    magic, dims, rest = data.split(b"\n", 2)
    if magic != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth raster")
    w, h = map(int, dims.split())
    return np.frombuffer(rest[:w * h * 8], dtype="<f8").reshape(h, w).astype(np.float64)


def camera_to_record(cam: CameraModel):
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width,
            "height": cam.height, "R": cam.R.reshape(-1).tolist(), "T": cam.T.tolist()}


def camera_from_record(rec):
    return CameraModel(float(rec["fx"]), float(rec["fy"]), float(rec["cx"]), float(rec["cy"]),
                       np.array(rec["R"], dtype=np.float64).reshape(3, 3),
                       np.array(rec["T"], dtype=np.float64), int(rec["width"]), int(rec["height"]))


def _json_safe(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, (np.floating, np.integer)):
        return _json_safe(v.item())
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


class MetricsWriter:
    """Append-only JSON-lines stream; infinite values are written as the string ``"inf"``."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.records = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record):
        rec = _json_safe(dict(record))
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path):
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


def heatmap_slices(values, resolution, out_dir, prefix="slice"):
    """Write one PPM per z-slice showing per-cell channel norms (shared normalisation)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    D = resolution
    norms = np.linalg.norm(np.asarray(values).reshape(D, D, D, -1), axis=-1)
    top = norms.max() or 1.0
    paths = []
    for k in range(D):
        s = norms[:, :, k] / top
        rgb = np.stack([s, s ** 2, 1 - s], axis=-1)
        p = out_dir / f"{prefix}_{k:03d}.ppm"
        write_ppm(p, rgb)
        paths.append(p)
    return paths
