"""Flat ``key = value`` training configuration.

One assignment per line, ``#`` starts a comment, values are Python literals
(``1e-4``, ``[4, 3, 2, 1]``, ``"reach"``). Unknown keys are rejected.
"""
from __future__ import annotations

import ast
import math
from pathlib import Path

from .camera import DEFAULT_BOUNDS
from .diffcore import ConfigError
from .model import ModelConfig
from .policy import LAMBDA_SCHEDULE

DEFAULTS = {
    "seed": 0,
    # pretraining
    "train.learning_rate": 1e-4,
    "train.weight_decay": 0.01,
    "train.steps": 2000,
    "train.delta": 1000,
    "train.k": [4, 3, 2, 1],
    "train.num_views": 8,
    "train.demos": 50,
    "train.render_views_per_step": 2,
    "train.input_view": 0,
    "train.focal_gamma": 1.0,
    "train.log_every": 1,
    # scenes
    "scene.primitives": 2,
    "scene.checker": False,
    "scene.image_size": 64,
    "scene.gt_samples": 2744,
    "eval.held_out_views": 4,
    # network
    "network.D": 20,
    "network.d": [7, 7, 7],
    "network.fps_sample_num": 512,
    "network.scene_bounds": list(DEFAULT_BOUNDS),
    "network.channels": 32,
    "network.pixel_channels": 16,
    "network.fusion_hidden": 16,
    "network.num_points": 8,
    "network.hidden": 64,
    "network.up_factors": [2, 2, 2],
    "network.pixel_mode": "handcrafted",
    # policy
    "policy.steps": 2000,
    "policy.demos": 20,
    "policy.task": "reach",
    "policy.trajectory_steps": 12,
    "policy.learning_rate": 1e-3,
    "policy.num_latents": 64,
    "policy.channels": 32,
    "policy.patch": 5,
    "policy.lambda_distill": list(LAMBDA_SCHEDULE),
    "policy.multi_step": True,
    "policy.velocity_threshold": 1e-3,
}


def _parse_value(key, text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        raise ConfigError(f"{key}: cannot parse value {text!r}") from None


class TrainConfig(dict):
    """Dictionary of every known key with defaults filled in."""

    def __init__(self, values=None, **overrides):
        super().__init__(DEFAULTS)
        for k, v in {**(values or {}), **overrides}.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            self[k] = v
        self.validate()

    @classmethod
    def from_text(cls, text):
        vals = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            vals[k] = _parse_value(k, v)
        return cls(vals)

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def to_text(self):
        return "".join(f"{k} = {self[k]!r}\n" for k in DEFAULTS)

    def with_(self, **kw):
        vals = dict(self)
        vals.update({k.replace("__", "."): v for k, v in kw.items()})
        return TrainConfig(vals)

    def validate(self):
        steps, delta = self["train.steps"], self["train.delta"]
        if not (isinstance(steps, int) and steps >= 1):
            raise ConfigError("train.steps must be a positive integer")
        if not 0 <= delta <= steps:
            raise ConfigError("train.delta must lie in [0, train.steps]")
        k = list(self["train.k"])
        if not k or any(a < b for a, b in zip(k, k[1:])) or k[-1] != 1 or min(k) < 1:
            raise ConfigError("train.k must be non-increasing positive integers ending at 1")
        for key in ("train.learning_rate", "policy.learning_rate"):
            if not (self[key] > 0 and math.isfinite(self[key])):
                raise ConfigError(f"{key} must be positive")
        d = list(self["network.d"])
        if len(d) != 3 or len(set(d)) != 1:
            raise ConfigError("network.d must list one lattice size three times")
        if self["train.render_views_per_step"] > self["train.num_views"]:
            raise ConfigError("more render views per step than training views")
        if len(self["policy.lambda_distill"]) < 1 or min(self["policy.lambda_distill"]) < 0:
            raise ConfigError("policy.lambda_distill must be non-negative")
        if self["policy.steps"] < 1 or self["policy.demos"] < 1:
            raise ConfigError("policy steps and demos must be positive")
        self.model_config().validate()
        return self

    def model_config(self):
        return ModelConfig(
            resolution=self["network.D"], seed_lattice=self["network.d"][0],
            fps_samples=self["network.fps_sample_num"], bounds=tuple(self["network.scene_bounds"]),
            channels=self["network.channels"], pixel_channels=self["network.pixel_channels"],
            fusion_hidden=self["network.fusion_hidden"], n_points=self["network.num_points"],
            hidden=self["network.hidden"], up_factors=tuple(self["network.up_factors"]),
            pixel_mode=self["network.pixel_mode"])


FULL_SCALE = {
    "train.learning_rate": 1e-4, "train.steps": 100_000, "train.delta": 40_000,
    "train.k": [4, 3, 2, 1], "train.num_views": 8, "train.demos": 50, "network.D": 100,
    "network.d": [7, 7, 7], "network.fps_sample_num": 512, "network.channels": 128,
    "policy.steps": 12_000, "policy.demos": 20, "policy.num_latents": 2048,
}
