"""Geometry-grounded pretraining for visuomotor policies, in plain numpy.

Single-view RGB-D goes in, a dense feature volume, a coarse-to-fine point
cloud and a set of renderable Gaussians come out. A small policy is trained
by behaviour cloning while its latent tokens are distilled towards tokens
from the frozen volume.
"""
from . import camera, diffcore, policy, scenes, seedgen, snowflake, splatting, volumetric
from .camera import CameraModel, Observation, PointCloud
from .config import TrainConfig
from .model import GeometryModel, ModelConfig

__version__ = "0.1.0"
__all__ = ["camera", "diffcore", "policy", "scenes", "seedgen", "snowflake", "splatting",
           "volumetric", "CameraModel", "Observation", "PointCloud", "TrainConfig",
           "GeometryModel", "ModelConfig"]
