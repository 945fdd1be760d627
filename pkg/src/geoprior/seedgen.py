"""Seed point generation from a dense volume.

Learnable voxel queries attend first to an average-pooled copy of the volume
(coarse cross-attention), then to a handful of trilinearly sampled locations
around their lattice position (deformable cross-attention with a continuous
positional bias). A shallow MLP decodes each refined token to a 3D seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import _check_bounds
from .diffcore import Linear, MlpBlock, Tensor
from .diffcore import tensor as T
from .volumetric import DenseVolume, FetchCounter, sample_trilinear


def pool_windows(D, d):
    """Window boundaries splitting D cells into d near-equal windows."""
    return [(j * D) // d for j in range(d + 1)]


def pooling_matrix(D, d):
    edges = pool_windows(D, d)
    A = np.zeros((d, D))
    for j in range(d):
        A[j, edges[j]:edges[j + 1]] = 1.0 / (edges[j + 1] - edges[j])
    return A


def avg_pool_volume(values, D, d):
    """Average-pool a flat (D**3, C) tensor down to (d**3, C), separably per axis."""
    A = Tensor(pooling_matrix(D, d))
    C = values.shape[1]
    x = T.reshape(values, (D, D * D * C))
    x = T.reshape(A @ x, (d, D, D, C))
    x = T.transpose(x, (1, 0, 2, 3)).reshape(D, d * D * C)
    x = T.transpose(T.reshape(A @ x, (d, d, D, C)), (1, 0, 2, 3))
    x = T.transpose(x, (2, 0, 1, 3)).reshape(D, d * d * C)
    x = T.transpose(T.reshape(A @ x, (d, d, d, C)), (1, 2, 0, 3))
    return T.reshape(x, (d ** 3, C))


def lattice(d):
    """Regular d x d x d lattice of normalised cell-centre positions in [0, 1]^3."""
    ax = (np.arange(d) + 0.5) / d
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)


def to_world(normalized, bounds):
    b = _check_bounds(bounds)
    return b[:3] + np.asarray(normalized) * (b[3:] - b[:3])


@dataclass
class VoxelQuerySet:
    queries: Tensor
    d: int
    reference: np.ndarray  # (d**3, 3) in [0, 1]^3

    @classmethod
    def create(cls, store, d=7, channels=32, name="seed.queries"):
        q = store.add(name, store.rng.normal(scale=0.5, size=(d ** 3, channels)))
        return cls(q, d, lattice(d))


class AttentionProj:
    def __init__(self, store, name, channels):
        self.q = Linear(store, f"{name}.q", channels, channels)
        self.k = Linear(store, f"{name}.k", channels, channels)
        self.v = Linear(store, f"{name}.v", channels, channels)
        self.scale = 1.0 / np.sqrt(channels)


def coarse_cross_attention(queries: VoxelQuerySet, volume: DenseVolume, proj: AttentionProj,
                           logit_bias=None):
    """Attention of every query over all d**3 pooled cells.

    Returns ``(update, weights)``; the proposal queries are ``queries + update``.
    """
    pooled = avg_pool_volume(volume.values, volume.resolution, queries.d)
    q = proj.q(queries.queries)
    k = proj.k(pooled)
    v = proj.v(pooled)
    logits = (q @ T.transpose(k)) * proj.scale
    if logit_bias is not None:
        logits = logits + logit_bias
    w = T.softmax(logits, axis=-1)
    return w @ v, w


def full_cross_attention(q_p, volume: DenseVolume, proj: AttentionProj,
                         counter: FetchCounter | None = None):
    """Reference dense cross-attention over every cell; used for cost comparisons."""
    if counter is not None:
        counter.add(q_p.shape[0] * volume.values.shape[0])
    k = proj.k(volume.values)
    v = proj.v(volume.values)
    w = T.softmax((proj.q(q_p) @ T.transpose(k)) * proj.scale, axis=-1)
    return w @ v, w


def _directions(n):
    if n == 8:
        return np.array([[a, b, c] for a in (-1, 1) for b in (-1, 1) for c in (-1, 1)]) / np.sqrt(3)
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    th = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)


class DeformableAttnParams:
    """Offset predictor, attention projections and continuous positional bias."""

    def __init__(self, store, name="seed.dca", channels=32, n_points=8, hidden=32,
                 offset_cap=0.25, init_radius=0.1, cpb_hidden=16):
        self.n_points = n_points
        self.offset_cap = offset_cap
        self.offsets = MlpBlock(store, f"{name}.offset", [channels, hidden, 3 * n_points])
        init = init_radius / offset_cap * _directions(n_points)
        self.offsets.layers[-1].b.data = np.arctanh(np.clip(init, -0.99, 0.99)).reshape(-1)
        self.proj = AttentionProj(store, f"{name}.attn", channels)
        self.cpb = MlpBlock(store, f"{name}.cpb", [3, cpb_hidden, 1], zero_last=True)


def deformable_offsets(q_p, params: DeformableAttnParams, extent):
    """Per-query offsets (nq, Np, 3) in metres, squashed to |offset| <= cap * extent per axis."""
    nq = q_p.shape[0]
    raw = T.reshape(params.offsets(q_p), (nq, params.n_points, 3))
    return T.tanh(raw) * (params.offset_cap * np.asarray(extent))


def deformable_cross_attention(q_p, volume: DenseVolume, params: DeformableAttnParams,
                               reference, counter: FetchCounter | None = None, use_cpb=True):
    """Sample the volume at reference + learned offsets and attend over the samples.

    ``reference`` is (nq, 3) in normalised [0, 1] coordinates. Returns
    ``(update, weights, locations)``, with weights (nq, Np) softmax-normalised
    after adding the positional bias, and update ``sum_k w_k * V_k``.
    """
    b = np.asarray(volume.bounds)
    extent = b[3:] - b[:3]
    nq, C = q_p.shape
    Np = params.n_points
    p0 = to_world(reference, b)
    off = deformable_offsets(q_p, params, extent)
    loc = T.clip(off + p0[:, None, :], b[:3], b[3:])
    feats = sample_trilinear(volume, T.reshape(loc, (nq * Np, 3)), counter)
    k = T.reshape(params.proj.k(feats), (nq, Np, C))
    v = T.reshape(params.proj.v(feats), (nq, Np, C))
    q = T.reshape(params.proj.q(q_p), (nq, 1, C))
    logits = T.tsum(q * k, axis=-1) * params.proj.scale
    if use_cpb:
        rel = T.reshape((loc - p0[:, None, :]) * (1.0 / extent), (nq * Np, 3))
        logits = logits + T.reshape(params.cpb(rel), (nq, Np))
    w = T.softmax(logits, axis=-1)
    out = T.tsum(v * T.reshape(w, (nq, Np, 1)), axis=1)
    return out, w, loc


def decode_seeds(tokens, decoder: MlpBlock, bounds):
    """Map tokens to coordinates strictly inside ``bounds`` via ``centre + half * tanh``."""
    b = _check_bounds(bounds)
    center = 0.5 * (b[:3] + b[3:])
    half = 0.5 * (b[3:] - b[:3])
    return T.tanh(decoder(tokens)) * half + center


class SeedGenerator:
    def __init__(self, store, channels=32, d=7, n_points=8, hidden=64, name="seed"):
        self.queries = VoxelQuerySet.create(store, d, channels, f"{name}.queries")
        self.coarse = AttentionProj(store, f"{name}.coarse", channels)
        self.dca = DeformableAttnParams(store, f"{name}.dca", channels, n_points)
        self.decoder = MlpBlock(store, f"{name}.decoder", [channels, hidden, 3])
        self.d = d

    def __call__(self, volume: DenseVolume, counter: FetchCounter | None = None):
        upd, _ = coarse_cross_attention(self.queries, volume, self.coarse)
        q_p = self.queries.queries + upd
        upd2, _, _ = deformable_cross_attention(q_p, volume, self.dca, self.queries.reference, counter)
        tokens = q_p + upd2
        return decode_seeds(tokens, self.decoder, volume.bounds), tokens
