"""Voxelisation, fusion into a dense feature volume, and trilinear sampling.

Volumes are stored flat as ``(D**3, C)`` with cell ``(i, j, k)`` (x, y, z
indices) at row ``(i * D + j) * D + k``. Cell centres sit at
``lo + (index + 0.5) * edge`` per axis, so the grid spans the bounds exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import DEFAULT_BOUNDS, PointCloud, _check_bounds
from .diffcore import ConfigError, Tensor
from .diffcore import tensor as T

OCC_CHANNELS = 10


class FetchCounter:
    """Counts trilinear volume fetches (one per sampled location)."""

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)


# pixel features --------------------------------------------------------------

@dataclass
class PixelFeatureExtractor:
    mode: str = "handcrafted"
    channels: int = 16
    seed: int = 0
    projection: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("handcrafted", "random-projection"):
            raise ConfigError(f"unknown pixel feature mode {self.mode!r}")
        if self.mode == "handcrafted" and self.channels < 5:
            raise ConfigError("handcrafted features need at least 5 channels")
        if self.mode == "random-projection" and self.projection is None:
            rng = np.random.default_rng(self.seed)
            self.projection = rng.normal(size=(3, self.channels)) / np.sqrt(3.0)

    def __call__(self, rgb):
        return extract_pixel_features(rgb, self)


def _positional_channels(h, w, n):
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = u / max(w, 1), v / max(h, 1)
    out = []
    k = 0
    while len(out) < n:
        f = np.pi * 2.0 ** k
        out += [np.sin(f * u), np.cos(f * u), np.sin(f * v), np.cos(f * v)]
        k += 1
    return np.stack(out[:n], axis=-1)


def extract_pixel_features(rgb, extractor: PixelFeatureExtractor | None = None):
    ex = extractor or PixelFeatureExtractor()
    rgb = np.asarray(rgb, dtype=np.float64)
    h, w, _ = rgb.shape
    if ex.mode == "random-projection":
        return rgb @ np.asarray(ex.projection, dtype=np.float64)
    gray = rgb.mean(axis=-1)
    gx = np.abs(ndimage.sobel(gray, axis=1, mode="nearest"))
    gy = np.abs(ndimage.sobel(gray, axis=0, mode="nearest"))
    pe = _positional_channels(h, w, ex.channels - 5)
    return np.concatenate([rgb, gx[..., None], gy[..., None], pe], axis=-1)


def attach_pixel_features(cloud: PointCloud, feature_map) -> PointCloud:
    if cloud.pixels is None:
        raise ValueError("cloud carries no pixel coordinates")
    u, v = cloud.pixels[:, 0], cloud.pixels[:, 1]
    return PointCloud(cloud.points, feature_map[v, u], cloud.colors, cloud.pixels)


# voxel grid -------------------------------------------------------------------

def cell_edges(bounds, resolution):
    b = _check_bounds(bounds)
    return (b[3:] - b[:3]) / resolution


def cell_centers(bounds, resolution):
    b = _check_bounds(bounds)
    e = cell_edges(b, resolution)
    ax = [b[a] + (np.arange(resolution) + 0.5) * e[a] for a in range(3)]
    g = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def voxel_index(points, bounds, resolution):
    """Integer (i, j, k) per point and an in-bounds mask."""
    b = _check_bounds(bounds)
    p = np.asarray(points, dtype=np.float64)
    inside = np.all((p >= b[:3]) & (p <= b[3:]), axis=1)
    ijk = np.floor((p - b[:3]) / cell_edges(b, resolution)).astype(np.intp)
    return np.clip(ijk, 0, resolution - 1), inside


@dataclass
class VoxelGrid:
    resolution: int
    bounds: np.ndarray
    occupancy: np.ndarray  # (D**3, 10)
    feature: np.ndarray  # (D**3, C2D)

    def stacked(self):
        return np.concatenate([self.occupancy, self.feature], axis=1)


def voxelize(cloud: PointCloud, resolution=20, bounds=None) -> VoxelGrid:
    """Occupancy channels: [flag, mean rgb(3), mean offset in [-1,1] (3), count / max count, 0, 0]."""
    b = _check_bounds(DEFAULT_BOUNDS if bounds is None else bounds)
    D = int(resolution)
    if len(cloud) == 0:
        raise ValueError("cannot voxelize an empty cloud")
    ijk, inside = voxel_index(cloud.points, b, D)
    pts = cloud.points[inside]
    ijk = ijk[inside]
    flat = (ijk[:, 0] * D + ijk[:, 1]) * D + ijk[:, 2]
    ncell = D ** 3
    counts = np.bincount(flat, minlength=ncell).astype(np.float64)
    occ = np.zeros((ncell, OCC_CHANNELS))
    nz = counts > 0
    occ[nz, 0] = 1.0

    def cell_mean(values):
        s = np.stack([np.bincount(flat, weights=values[:, c], minlength=ncell)
                      for c in range(values.shape[1])], axis=1)
        s[nz] /= counts[nz, None]
        return s

    if cloud.colors is not None:
        occ[:, 1:4] = cell_mean(cloud.colors[inside])
    edge = cell_edges(b, D)
    centers = b[:3] + (ijk + 0.5) * edge
    occ[:, 4:7] = cell_mean((pts - centers) / (0.5 * edge))
    if nz.any():
        occ[:, 7] = counts / counts.max()
    feat_dim = 0 if cloud.features is None else cloud.features.shape[1]
    feat = cell_mean(cloud.features[inside]) if feat_dim else np.zeros((ncell, 0))
    return VoxelGrid(D, b, occ, feat)


# dense volume -----------------------------------------------------------------

@dataclass
class DenseVolume:
    resolution: int
    bounds: np.ndarray
    values: Tensor  # (D**3, C)

    @property
    def channels(self):
        return self.values.shape[1]

    def grid(self):
        D = self.resolution
        return self.values.data.reshape(D, D, D, -1)

    def detached(self):
        return DenseVolume(self.resolution, self.bounds, Tensor(self.values.data))


class FusionNet:
    """Two-level 3x3x3 conv encoder-decoder with one skip connection."""

    def __init__(self, store, name="fuse", in_channels=26, hidden=16, out_channels=32, kernel=3):
        self.in_channels, self.hidden, self.out_channels = in_channels, hidden, out_channels
        k = kernel

        def conv(n, cin, cout):
            w = store.uniform(f"{name}.{n}.W", (k, k, k, cin, cout), k ** 3 * cin)
            b = store.zeros(f"{name}.{n}.b", (cout,))
            return w, b

        self.enc1 = conv("enc1", in_channels, hidden)
        self.enc2 = conv("enc2", hidden, hidden)
        self.mid = conv("mid", hidden, 2 * hidden)
        self.dec = conv("dec", 3 * hidden, hidden)
        self.out = conv("out", hidden, out_channels)

    def __call__(self, x):
        act = T.leaky_relu
        e1 = act(T.conv3d(act(T.conv3d(x, *self.enc1)), *self.enc2))
        m = act(T.conv3d(T.avg_pool3d_2(e1), *self.mid))
        u = T.upsample3d_2(m)
        d = act(T.conv3d(T.concat([u, e1], axis=-1), *self.dec))
        return T.conv3d(d, *self.out)


def fuse(grid: VoxelGrid, net: FusionNet) -> DenseVolume:
    D = grid.resolution
    if D % 2:
        raise ConfigError(f"fusion needs an even resolution, got {D}")
    x = grid.stacked()
    if not np.isfinite(x).all():
        raise ValueError("voxel grid is not finite")
    if x.shape[1] != net.in_channels:
        raise ConfigError(f"grid has {x.shape[1]} channels, fusion expects {net.in_channels}")
    out = net(Tensor(x.reshape(D, D, D, -1)))
    return DenseVolume(D, grid.bounds, out.reshape(D ** 3, net.out_channels))


# trilinear sampling -----------------------------------------------------------

_CORNERS = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])


def sample_trilinear(volume: DenseVolume, coords, counter: FetchCounter | None = None):
    """Interpolate volume features at world coordinates (N, 3).

    Coordinates are clamped to the outermost cell centres; gradients flow to
    both the volume values and the (unclamped-region) coordinates.
    """
    D = volume.resolution
    if D < 2:
        raise ConfigError("trilinear sampling needs resolution >= 2")
    coords = T.as_tensor(coords)
    if not np.isfinite(coords.data).all():
        raise ValueError("non-finite sample coordinates")
    b = np.asarray(volume.bounds)
    edge = cell_edges(b, D)
    idx = T.clip((coords - b[:3]) * (1.0 / edge) - 0.5, 0.0, D - 1.0)
    i0 = np.clip(np.floor(idx.data).astype(np.intp), 0, D - 2)
    w = idx - i0.astype(np.float64)
    n = coords.shape[0]
    if counter is not None:
        counter.add(n)
    corner = i0[:, None, :] + _CORNERS[None]  # (N, 8, 3)
    flat = (corner[..., 0] * D + corner[..., 1]) * D + corner[..., 2]
    vals = T.take_rows(volume.values, flat.reshape(-1)).reshape(n, 8, -1)
    one_minus = 1.0 - w
    per_axis = [T.stack([one_minus[:, a], w[:, a]], axis=1) for a in range(3)]  # (N, 2) each
    wts = T.stack([per_axis[0][:, a] * per_axis[1][:, bb] * per_axis[2][:, c]
                   for a, bb, c in _CORNERS], axis=1)  # (N, 8)
    return T.tsum(vals * T.reshape(wts, (n, 8, 1)), axis=1)
