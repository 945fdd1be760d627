"""Coarse-to-fine point refinement and Chamfer-L2 supervision."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .camera import DEFAULT_BOUNDS, _check_bounds, farthest_point_indices
from .diffcore import ContractError, MlpBlock
from .diffcore import tensor as T
from .volumetric import DenseVolume, FetchCounter, sample_trilinear


class SpdStage:
    """One point-deconvolution stage: each parent spawns ``r`` displaced children."""

    def __init__(self, store, name, feat_channels, r=2, context_channels=32, hidden=64,
                 cap=0.2, has_context=True, init_scale=0.1):
        if r < 1:
            raise ValueError("upsampling factor must be >= 1")
        self.r = r
        self.cap = cap
        self.has_context = has_context
        self.context_channels = context_channels
        din = feat_channels + 3 + (context_channels if has_context else 0)
        self.displacement = MlpBlock(store, f"{name}.disp", [din, hidden, hidden, 3 * r])
        last = self.displacement.layers[-1].W
        last.data = last.data * init_scale
        self.context = MlpBlock(store, f"{name}.ctx", [din, hidden, context_channels])


def _normalized(points, bounds):
    b = np.asarray(bounds)
    return (points - 0.5 * (b[:3] + b[3:])) * (2.0 / (b[3:] - b[:3]))


def spd_step(parents, volume: DenseVolume, context, stage: SpdStage,
             counter: FetchCounter | None = None):
    """Return ``(children, child_context)``; children are (N * r, 3), clamped to the bounds."""
    parents = T.as_tensor(parents)
    n = parents.shape[0]
    if stage.has_context and context is None:
        raise ContractError("this stage expects a context input")
    feats = sample_trilinear(volume, parents, counter)
    parts = [feats, _normalized(parents, volume.bounds)]
    if stage.has_context:
        parts.append(context)
    h = T.concat(parts, axis=1)
    disp = T.tanh(stage.displacement(h)) * stage.cap
    disp = T.reshape(disp, (n * stage.r, 3))
    b = np.asarray(volume.bounds)
    children = T.clip(T.repeat(parents, stage.r, axis=0) + disp, b[:3], b[3:])
    ctx = T.leaky_relu(stage.context(h))
    return children, T.repeat(ctx, stage.r, axis=0)


class RefinementPyramid:
    def __init__(self, store, feat_channels, factors=(2, 2, 2), context_channels=32, hidden=64,
                 bounds=None, cap_fraction=0.1, name="spd"):
        b = _check_bounds(DEFAULT_BOUNDS if bounds is None else bounds)
        cap = cap_fraction * float(np.linalg.norm(b[3:] - b[:3]))
        self.stages = [SpdStage(store, f"{name}{i}", feat_channels, r, context_channels, hidden,
                                cap, has_context=i > 0) for i, r in enumerate(factors)]

    def sizes(self, n0):
        out = [n0]
        for s in self.stages:
            out.append(out[-1] * s.r)
        return out

    def __call__(self, seeds, volume, counter=None):
        outs = [seeds]
        ctx = None
        p = seeds
        for st in self.stages:
            p, ctx = spd_step(p, volume, ctx, st, counter)
            outs.append(p)
        return outs


def nearest_indices(a, b, k=4):
    """Index into ``b`` of the nearest point for every row of ``a``; ties go to the lowest index.

    Exact KD-tree search; rows whose ``k`` closest candidates are all tied fall
    back to a brute-force scan so the tie rule holds unconditionally.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k = min(k, len(b))
    d, idx = cKDTree(b).query(a, k=k)
    if k == 1:
        return idx
    tied = d == d[:, :1]
    cand = np.where(tied, idx, np.iinfo(np.intp).max)
    out = cand.min(axis=1)
    for i in np.nonzero(tied[:, -1])[0]:
        dd = np.sum((b - a[i]) ** 2, axis=1)
        out[i] = int(np.flatnonzero(dd == dd.min())[0])
    return out


def chamfer_l2(a, b):
    """Symmetric mean of squared nearest-neighbour distances; differentiable in both inputs."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("chamfer distance needs non-empty clouds")
    ia = nearest_indices(a.data, b.data)
    ib = nearest_indices(b.data, a.data)
    da = T.tsum(T.square(a - T.take_rows(b, ia)), axis=1)
    db = T.tsum(T.square(b - T.take_rows(a, ib)), axis=1)
    return T.mean(da) + T.mean(db)


def stage_targets(gt_points, sizes):
    """FPS subsets of the full ground truth, one per stage size (whole set if too small)."""
    gt_points = np.asarray(gt_points)
    if len(gt_points) == 0:
        raise ContractError("empty ground truth")
    return [gt_points[farthest_point_indices(gt_points, n, 0)] for n in sizes]


def reconstruction_loss(predictions, targets):
    """Sum of per-stage Chamfer terms; returns ``(total, [term, ...])``."""
    if len(predictions) != len(targets):
        raise ContractError("one target per stage required")
    terms = [chamfer_l2(p, t) for p, t in zip(predictions, targets)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, terms
