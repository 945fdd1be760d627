"""Distillation-based visuomotor policy.

A small token encoder turns one RGB-D observation into ``M`` latent tokens, a
residual latent dynamics model predicts the next latent state from the tokens,
proprioception and a task embedding, and an action head decodes the next
end-effector pose and gripper command. Latents are aligned with tokens
patchified from a frozen pretrained volume through a cosine distillation loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import ConfigError, ContractError, Linear, MlpBlock, Tensor
from .diffcore import tensor as T
from .volumetric import DenseVolume


@dataclass
class TrajectoryFrame:
    observation: object  # camera.Observation or None
    pose: np.ndarray  # position (3) + unit quaternion (4)
    gripper: int
    task_id: int
    expert_action: np.ndarray | None  # next keyframe pose (7) + gripper (1)

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (7,):
            raise ValueError("pose must have 7 entries")
        if abs(np.linalg.norm(self.pose[3:]) - 1) > 1e-9:
            raise ValueError("pose quaternion must be unit-norm")
        if self.gripper not in (0, 1):
            raise ValueError("gripper state must be 0 or 1")

    @property
    def position(self):
        return self.pose[:3]

    @property
    def proprio(self):
        return np.concatenate([self.pose, [float(self.gripper)]])


# keyframes ---------------------------------------------------------------------

def keyframe_candidates(positions, gripper, velocity_threshold):
    T_ = len(positions)
    out = []
    for t in range(T_):
        toggled = t > 0 and gripper[t] != gripper[t - 1]
        stopped = t > 0 and np.linalg.norm(positions[t] - positions[t - 1]) < velocity_threshold
        if toggled or stopped or t == T_ - 1:
            out.append(t)
    return out


def collapse_adjacent(indices):
    """Keep only the last index of every run of consecutive indices."""
    return [k for i, k in enumerate(indices) if i == len(indices) - 1 or indices[i + 1] != k + 1]


def select_keyframes(trajectory, velocity_threshold=1e-3):
    if len(trajectory) == 0:
        raise ContractError("empty trajectory")
    pos = np.array([f.position for f in trajectory])
    grip = [f.gripper for f in trajectory]
    return collapse_adjacent(keyframe_candidates(pos, grip, velocity_threshold))


# encoder -----------------------------------------------------------------------

def patchify_image(rgb, depth, patch=8, depth_scale=0.5):
    """(H, W) RGB-D image -> (num_patches, patch*patch*4) rows plus patch centres in [0, 1]^2."""
    H, W = depth.shape
    ph, pw = H // patch, W // patch
    if ph == 0 or pw == 0:
        raise ConfigError("image smaller than one patch")
    x = np.concatenate([rgb, depth[..., None] * depth_scale], axis=-1)[:ph * patch, :pw * patch]
    x = x.reshape(ph, patch, pw, patch, 4).transpose(0, 2, 1, 3, 4).reshape(ph * pw, -1)
    cy, cx = np.mgrid[0:ph, 0:pw]
    centers = np.stack([(cx.reshape(-1) + 0.5) / pw, (cy.reshape(-1) + 0.5) / ph], axis=1)
    return x, centers


def _pos_embed(centers, n=8):
    out = []
    for k in range(n // 4):
        f = np.pi * 2.0 ** k
        out += [np.sin(f * centers[:, 0]), np.cos(f * centers[:, 0]),
                np.sin(f * centers[:, 1]), np.cos(f * centers[:, 1])]
    return np.stack(out, axis=1)


class CrossAttnBlock:
    def __init__(self, store, name, c):
        self.q = Linear(store, f"{name}.q", c, c)
        self.k = Linear(store, f"{name}.k", c, c)
        self.v = Linear(store, f"{name}.v", c, c)
        self.mlp = MlpBlock(store, f"{name}.mlp", [c, 2 * c, c], residual=True)
        self.scale = 1.0 / math.sqrt(c)

    def __call__(self, lat, ctx):
        w = T.softmax((self.q(lat) @ T.transpose(self.k(ctx))) * self.scale, axis=-1)
        return self.mlp(lat + w @ self.v(ctx))


class PolicyEncoder:
    def __init__(self, store, num_latents=64, channels=32, patch=8, blocks=2, name="enc"):
        self.patch = patch
        self.pe_dim = 8
        self.embed = Linear(store, f"{name}.embed", patch * patch * 4 + self.pe_dim, channels)
        self.latents = store.add(f"{name}.latents", store.rng.normal(scale=0.5, size=(num_latents, channels)))
        self.blocks = [CrossAttnBlock(store, f"{name}.blk{i}", channels) for i in range(blocks)]

    def __call__(self, obs):
        return encode_policy(obs, self)


def encode_policy(obs, encoder: PolicyEncoder):
    x, centers = patchify_image(obs.rgb, obs.depth, encoder.patch)
    tokens = T.leaky_relu(encoder.embed(Tensor(np.concatenate([x, _pos_embed(centers, encoder.pe_dim)], 1))))
    lat = encoder.latents
    for blk in encoder.blocks:
        lat = blk(lat, tokens)
    return lat


# reference tokens --------------------------------------------------------------

def patch_pool(values, D, patch):
    """Mean over non-overlapping patch^3 blocks of a flat (D**3, C) volume."""
    if D % patch:
        raise ConfigError(f"resolution {D} not divisible by patch size {patch}")
    n = D // patch
    C = values.shape[1]
    x = T.reshape(values, (n, patch, n, patch, n, patch, C))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5, 6))
    return T.mean(T.reshape(x, (n ** 3, patch ** 3, C)), axis=1)


def reference_tokens(volume: DenseVolume, patch, num_tokens, projection, frozen=True):
    """Patch-pool the volume, map to token width, keep the ``num_tokens`` largest-norm tokens.

    Kept tokens stay in patch order (ties by index). With ``frozen=True`` the
    result is a constant: no gradient reaches the volume or projection.
    """
    vals = Tensor(volume.values.data) if frozen else volume.values
    proj = projection.data if (frozen and isinstance(projection, Tensor)) else projection
    pooled = patch_pool(vals, volume.resolution, patch)
    tok = pooled @ proj
    if tok.shape[0] < num_tokens:
        raise ConfigError(f"only {tok.shape[0]} patches for {num_tokens} tokens")
    norms = np.linalg.norm(tok.data, axis=1)
    keep = np.sort(np.lexsort((np.arange(len(norms)), -norms))[:num_tokens])
    out = T.take_rows(tok, keep)
    return Tensor(out.data) if frozen else out


def fixed_projection(c_in, c_out, seed=0):
    if c_in == c_out:
        return np.eye(c_in)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(max(c_in, c_out), max(c_in, c_out))))
    return q[:c_in, :c_out]


# dynamics / head ---------------------------------------------------------------

class LatentDynamics:
    def __init__(self, store, channels=32, num_tasks=4, embed=16, hidden=64, name="dyn"):
        self.task_table = store.add(f"{name}.task", store.rng.normal(scale=0.5, size=(num_tasks, embed)))
        self.proprio = Linear(store, f"{name}.proprio", 8, embed)
        self.mlp = MlpBlock(store, f"{name}.mlp", [channels + 2 * embed, hidden, channels], zero_last=True)
        self.num_tasks = num_tasks


def latent_dynamics(x, proprio, task_id, dyn: LatentDynamics):
    if not 0 <= task_id < dyn.num_tasks:
        raise ContractError(f"task id {task_id} outside the embedding table")
    M = x.shape[0]
    cond = T.concat([dyn.proprio(Tensor(np.asarray(proprio, dtype=np.float64)[None])),
                     dyn.task_table[task_id:task_id + 1]], axis=1)
    h = T.concat([x, T.broadcast_to(cond, (M, cond.shape[1]))], axis=1)
    return x + dyn.mlp(h)


class ActionHead:
    def __init__(self, store, channels=32, hidden=64, name="act"):
        self.mlp = MlpBlock(store, f"{name}.mlp", [channels, hidden, 8])


def decode_action(x, head: ActionHead):
    """(8,) action: position (3), unit quaternion (4), gripper probability (1)."""
    out = head.mlp(T.mean(x, axis=0, keepdims=True))[0]
    q = out[3:7] + np.array([1.0, 0.0, 0.0, 0.0])
    q = q / T.sqrt(T.tsum(T.square(q)) + 1e-24)
    return T.concat([out[0:3], q, T.sigmoid(out[7:8])], axis=0)


# losses -------------------------------------------------------------------------

class ZeroNormCounter:
    def __init__(self):
        self.count = 0


def cosine_loss(a, b, counter: ZeroNormCounter | None = None):
    """Mean over tokens of ``1 - cos(a_i, b_i)``; ``b`` is treated as a constant."""
    a = T.as_tensor(a)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if a.shape != bd.shape:
        raise ContractError(f"token shapes differ {a.shape} vs {bd.shape}")
    nb = np.linalg.norm(bd, axis=1)
    na = T.sqrt(T.tsum(T.square(a), axis=1) + 1e-300)
    zero = (na.data < 1e-12) | (nb < 1e-12)
    if counter is not None:
        counter.count += int(zero.sum())
    dot = T.tsum(a * bd, axis=1)
    safe_nb = np.where(zero, 1.0, nb)
    cos = dot / (na * safe_nb + zero.astype(np.float64)) * (~zero).astype(np.float64)
    return T.mean(1.0 - cos)


def distill_loss(x_t, ref_t, x_next, ref_next, counter=None, multi_step=True):
    """Returns ``(total, current_term, next_term)``; ``multi_step=False`` drops the next term."""
    cur = cosine_loss(x_t, ref_t, counter)
    nxt = cosine_loss(x_next, ref_next, counter)
    return (cur + nxt if multi_step else cur), cur, nxt


def policy_loss(action, expert, distill, lam):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    bc = T.tsum(T.square(T.as_tensor(action) - np.asarray(expert, dtype=np.float64)))
    if distill is None or lam == 0:
        return bc, bc
    return bc + distill * lam, bc


LAMBDA_SCHEDULE = (1.0, 0.5, 0.3, 0.2, 0.1, 0.05)


def lambda_boundaries(total_steps, n=6):
    return [math.ceil(i * total_steps / n) for i in range(n)]


def lambda_at(step, total_steps, values=LAMBDA_SCHEDULE):
    """Piecewise-constant value over len(values) equal segments starting at ceil(i*steps/n)."""
    bounds = lambda_boundaries(total_steps, len(values))
    i = max(j for j, b in enumerate(bounds) if step >= b)
    return values[i]


class Policy:
    def __init__(self, store, num_latents=64, channels=32, num_tasks=4, patch=8, hidden=64):
        self.store = store
        self.encoder = PolicyEncoder(store, num_latents, channels, patch)
        self.dynamics = LatentDynamics(store, channels, num_tasks, hidden=hidden)
        self.head = ActionHead(store, channels, hidden)

    def __call__(self, obs, proprio, task_id, tokens=None):
        x = encode_policy(obs, self.encoder) if tokens is None else tokens
        x_next = latent_dynamics(x, proprio, task_id, self.dynamics)
        return x, x_next, decode_action(x_next, self.head)
