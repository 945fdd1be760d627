"""Keyframes, reference tokens and a short distillation run on the reach task.

    python demos/03_policy_distillation.py [steps] [checkpoint.npz]

Without a checkpoint the extractor is freshly initialised, which is enough
to see the mechanics; pass ckpt_final.npz from demo 02 for pretrained tokens.
"""
import sys

import numpy as np

from geoprior import training
from geoprior.config import TrainConfig
from geoprior.data import make_trajectories
from geoprior.model import GeometryModel
from geoprior.policy import lambda_boundaries, select_keyframes

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
cfg = TrainConfig({"policy.steps": steps, "policy.demos": 5})
extractor = (training.load_model(cfg, sys.argv[2]) if len(sys.argv) > 2
             else GeometryModel(cfg.model_config(), seed=cfg["seed"]))

reach = make_trajectories(cfg)
pick = make_trajectories(cfg, count=1, task="pick")
print("reach keyframes:", select_keyframes(reach[0].frames))
print("pick keyframes: ", select_keyframes(pick[0].frames),
      "gripper:", [f.gripper for f in pick[0].frames])

trs = training.keyframe_transitions(reach)
src = training._TokenSource(cfg, extractor)
tok = src.frozen(trs[0].obs)
print("transitions:", len(trs), "reference tokens:", tok.shape,
      "mean token norm:", round(float(np.linalg.norm(tok.data, axis=1).mean()), 4))
print("lambda switches at steps", lambda_boundaries(steps))

res = training.train_policy(cfg, reach, extractor)
mse = training.smoothed([r["action_mse"] for r in res.records], 50)
print(f"action MSE {res.initial['action_mse']:.4f} -> {res.final['action_mse']:.4f} "
      f"(smoothed {mse[0]:.4f} -> {mse[-1]:.4f})")
print(f"distillation {res.initial['distill']:.4f} -> {res.final['distill']:.4f}")
print("extractor untouched:", res.extractor_hash[0] == res.extractor_hash[1])
