"""The full geometric pretraining network: observation -> volume -> points -> Gaussians."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import DEFAULT_BOUNDS, Observation, _check_bounds, back_project, crop, farthest_point_sample
from .diffcore import ConfigError, ParamStore
from .seedgen import SeedGenerator
from .snowflake import RefinementPyramid
from .splatting import GaussianHead, default_scale_base, gaussians_from_points
from .volumetric import (OCC_CHANNELS, DenseVolume, PixelFeatureExtractor, FusionNet,
                         attach_pixel_features, fuse, voxelize)

RENDER_PREFIX = "gauss"


@dataclass
class ModelConfig:
    resolution: int = 20
    seed_lattice: int = 7
    fps_samples: int = 512
    bounds: tuple = DEFAULT_BOUNDS
    channels: int = 32
    pixel_channels: int = 16
    fusion_hidden: int = 16
    n_points: int = 8
    hidden: int = 64
    up_factors: tuple = (2, 2, 2)
    pixel_mode: str = "handcrafted"

    def validate(self):
        if self.resolution % 2 or self.resolution < 2:
            raise ConfigError(f"resolution must be even and >= 2, got {self.resolution}")
        if self.seed_lattice < 1 or any(r < 1 for r in self.up_factors):
            raise ConfigError("seed lattice and upsampling factors must be positive")
        _check_bounds(self.bounds)
        PixelFeatureExtractor(self.pixel_mode, self.pixel_channels)  # raises on a bad mode/width
        return self


@dataclass
class Forward:
    volume: DenseVolume
    stages: list  # [P0, P1, P2, P3] as tensors
    tokens: object


class GeometryModel:
    """Owns every pretraining parameter in one store; render-head names start with ``gauss``."""

    def __init__(self, cfg: ModelConfig | None = None, seed=0, store=None):
        self.cfg = (cfg or ModelConfig()).validate()
        c = self.cfg
        self.store = store if store is not None else ParamStore(seed)
        self.pixels = PixelFeatureExtractor(c.pixel_mode, c.pixel_channels, seed)
        self.fusion = FusionNet(self.store, "fuse", OCC_CHANNELS + c.pixel_channels, c.fusion_hidden,
                                c.channels)
        self.seeds = SeedGenerator(self.store, c.channels, c.seed_lattice, c.n_points, c.hidden)
        self.refine = RefinementPyramid(self.store, c.channels, c.up_factors, c.channels, c.hidden,
                                        c.bounds)
        self.render_head = GaussianHead(self.store, c.channels, c.hidden,
                                        scale_base=default_scale_base(c.bounds, c.resolution),
                                        name=RENDER_PREFIX)

    @property
    def bounds(self):
        return np.asarray(self.cfg.bounds, dtype=np.float64)

    def stage_sizes(self):
        return self.refine.sizes(self.cfg.seed_lattice ** 3)

    def input_grid(self, obs: Observation):
        """Back-project, crop, FPS-downsample, attach pixel features and voxelize one view."""
        cloud = farthest_point_sample(crop(back_project(obs), self.bounds), self.cfg.fps_samples, 0)
        cloud = attach_pixel_features(cloud, self.pixels(obs.rgb))
        return voxelize(cloud, self.cfg.resolution, self.bounds)

    def volume(self, grid) -> DenseVolume:
        return fuse(grid, self.fusion)

    def __call__(self, grid, counter=None) -> Forward:
        vol = self.volume(grid)
        p0, tokens = self.seeds(vol, counter)
        return Forward(vol, self.refine(p0, vol, counter), tokens)

    def gaussians(self, fwd: Forward, counter=None):
        return gaussians_from_points(fwd.stages[-1], fwd.volume, self.render_head, counter)

    def render_param_names(self):
        return [n for n in self.store if n.startswith(RENDER_PREFIX + ".")]

    def extractor_param_names(self):
        return [n for n in self.store if not n.startswith(RENDER_PREFIX + ".")]
