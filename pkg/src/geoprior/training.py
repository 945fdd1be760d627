"""Training loops: geometric pretraining, held-out evaluation, policy distillation."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .data import held_out_cameras
from .diffcore import Linear, ParamStore, Tensor, adamw_step, load_store, save_store
from .diffcore import tensor as T
from .model import GeometryModel
from .policy import (Policy, ZeroNormCounter, distill_loss, fixed_projection, lambda_at,
                     policy_loss, reference_tokens, select_keyframes)
from .scenes import raycast
from .snowflake import chamfer_l2, reconstruction_loss, stage_targets
from .splatting import focal_render_loss, image_metrics, rasterize


class NumericalError(RuntimeError):
    pass


class CompatibilityError(RuntimeError):
    pass


# schedules --------------------------------------------------------------------

def k_at(step, delta, ks):
    """Active k: equal segments of the warm-up phase map onto ``ks``; last value afterwards."""
    ks = list(ks)
    if step >= delta or delta <= 0:
        return ks[-1]
    return ks[min(len(ks) - 1, step * len(ks) // delta)]


def scene_runs(steps, n_scenes, delta, ks):
    """Round-robin scene visits; a run started at step s lasts ``k_at(s)`` steps.

    Returns ``(per_step_scene, runs)`` with runs as ``(scene, start, length)``.
    """
    order = np.empty(steps, dtype=np.intp)
    runs = []
    s = 0
    scene = 0
    while s < steps:
        k = k_at(s, delta, ks)
        n = min(k, steps - s)
        order[s:s + n] = scene
        runs.append((scene, s, n))
        s += n
        scene = (scene + 1) % n_scenes
    return order, runs


def checkpoint_steps(steps):
    """Step counts after which checkpoints are written (80% and final)."""
    return sorted({max(1, math.ceil(0.8 * steps)), steps})


# pretraining ------------------------------------------------------------------

@dataclass
class PretrainResult:
    model: GeometryModel
    records: list
    runs: list
    checkpoints: dict = field(default_factory=dict)  # label -> parameter snapshot
    paths: dict = field(default_factory=dict)


def _finite(x, what, step):
    if not np.isfinite(x):
        raise NumericalError(f"non-finite {what} at step {step}")
    return x


def _grad_norm(store, names):
    tot = 0.0
    for n in names:
        g = store[n].grad
        if g is not None:
            tot += float(np.sum(g * g))
    return math.sqrt(tot)


def prepare_scene(model: GeometryModel, scene, input_view=0):
    grid = model.input_grid(scene.observations[input_view])
    return grid, stage_targets(scene.gt.points, model.stage_sizes())


def pretrain(cfg, scenes, out_dir=None, model=None, on_step=None):
    """Optimise the geometry model; L_rec only before ``train.delta``, L_rec + L_rend afterwards."""
    if not scenes:
        raise FileNotFoundError("pretraining needs at least one scene")
    model = model or GeometryModel(cfg.model_config(), seed=cfg["seed"])
    out = Path(out_dir) if out_dir is not None else None
    metrics = io.MetricsWriter(None if out is None else out / "metrics.jsonl")
    timing = io.MetricsWriter(None if out is None else out / "timing.jsonl")
    steps, delta = cfg["train.steps"], cfg["train.delta"]
    cache = [prepare_scene(model, s, cfg["train.input_view"]) for s in scenes]
    order, runs = scene_runs(steps, len(scenes), delta, cfg["train.k"])
    render_names = model.render_param_names()
    n_views = cfg["train.num_views"]
    per_step = cfg["train.render_views_per_step"]
    ckpt_at = checkpoint_steps(steps)
    result = PretrainResult(model, metrics.records, runs)
    for step in range(steps):
        t0 = time.perf_counter()
        si = int(order[step])
        grid, targets = cache[si]
        scene = scenes[si]
        model.store.zero_grad()
        fwd = model(grid)
        rec, terms = reconstruction_loss(fwd.stages, targets)
        loss = rec
        rend_val = None
        if step >= delta:
            g = model.gaussians(fwd)
            views = [(step * per_step + j) % min(n_views, len(scene.observations)) for j in range(per_step)]
            rend = None
            for v in views:
                ob = scene.observations[v]
                img = rasterize(g, ob.camera).image
                term = focal_render_loss(img, ob.rgb, cfg["train.focal_gamma"])
                rend = term if rend is None else rend + term
            rend = rend * (1.0 / len(views))
            rend_val = _finite(float(rend.data), "render loss", step)
            loss = loss + rend
        _finite(float(loss.data), "loss", step)
        T.backward(loss)
        rgn = _grad_norm(model.store, render_names)
        adamw_step(model.store, cfg["train.learning_rate"], cfg["train.weight_decay"])
        rec_row = {"step": step, "scene": si, "k": k_at(step, delta, cfg["train.k"]),
                   "loss": float(loss.data), "rec": float(rec.data),
                   "rend": rend_val, "render_grad_norm": rgn}
        for i, t in enumerate(terms):
            rec_row[f"rec_{i}"] = float(t.data)
        if step % cfg["train.log_every"] == 0 or step == steps - 1:
            metrics.write(rec_row)
        timing.write({"step": step, "ms": 1000.0 * (time.perf_counter() - t0)})
        if on_step is not None:
            on_step(step, rec_row, model)
        if step + 1 in ckpt_at:
            label = "final" if step + 1 == steps else "080"
            result.checkpoints[label] = model.store.snapshot()
            if out is not None:
                p = out / f"ckpt_{label}.npz"
                save_store(p, model.store, {"step": step + 1, "config": cfg.to_text()})
                result.paths[label] = p
    result.checkpoints.setdefault("080", result.checkpoints["final"])
    return result


def load_model(cfg, path):
    model = GeometryModel(cfg.model_config(), seed=cfg["seed"])
    try:
        load_store(path, model.store)
    except (KeyError, ValueError) as exc:
        raise CompatibilityError(f"{path}: {exc}") from exc
    return model


# evaluation -------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list
    mean: dict

    def table(self, title="held-out views"):
        head = f"{'scene':>6} {'view':>4} {'PSNR':>8} {'SSIM':>8} {'Chamfer-L2':>12}"
        lines = [f"# {title}", head]
        for r in self.rows:
            lines.append(f"{r['scene']:>6} {r['view_id']:>4} {r['psnr']:>8.3f} {r['ssim']:>8.4f} {r['chamfer']:>12.6f}")
        m = self.mean
        lines.append(f"{'mean':>6} {'':>4} {m['psnr']:>8.3f} {m['ssim']:>8.4f} {m['chamfer']:>12.6f}")
        return "\n".join(lines) + "\n"


def _mean(vals):
    vals = [float(v) for v in vals]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(cfg, model: GeometryModel, scenes, held_out=None, images=None):
    rows = []
    for scene in scenes:
        grid, _ = prepare_scene(model, scene, cfg["train.input_view"])
        fwd = model(grid)
        cham = float(chamfer_l2(fwd.stages[-1].data, scene.gt.points).data)
        g = model.gaussians(fwd)
        for v, cam in enumerate(held_out_cameras(cfg, scene.spec, held_out)):
            gt = raycast(scene.spec, cam).rgb
            pred = rasterize(g, cam).image.data
            if images is not None:
                images.append((scene.scene_id, v, pred, gt))
            m = image_metrics(pred, gt)
            rows.append({"scene": scene.scene_id, "view_id": v, "psnr": m["psnr"], "ssim": m["ssim"],
                         "chamfer": cham})
    mean = {k: _mean(r[k] for r in rows) for k in ("psnr", "ssim", "chamfer")}
    return EvalReport(rows, mean)


def evaluate_checkpoints(cfg, snapshots: dict, scenes, out_dir=None):
    """Evaluate each labelled snapshot; also reports the per-metric best over checkpoints."""
    out = {}
    for label, snap in snapshots.items():
        model = GeometryModel(cfg.model_config(), seed=cfg["seed"])
        model.store.load(snap)
        out[label] = evaluate(cfg, model, scenes)
    best = {"psnr": max(r.mean["psnr"] for r in out.values()),
            "ssim": max(r.mean["ssim"] for r in out.values()),
            "chamfer": min(r.mean["chamfer"] for r in out.values())}
    if out_dir is not None:
        d = Path(out_dir)
        w = io.MetricsWriter(d / "eval.jsonl")
        text = []
        for label, rep in out.items():
            for r in rep.rows:
                w.write({"checkpoint": label, **r})
            w.write({"checkpoint": label, "scene": "mean", **rep.mean})
            text.append(rep.table(f"checkpoint {label}"))
        w.write({"checkpoint": "best", "scene": "mean", **best})
        text.append(f"# best: PSNR {best['psnr']:.3f}  SSIM {best['ssim']:.4f}  Chamfer-L2 {best['chamfer']:.6f}\n")
        (d / "eval.txt").write_text("\n".join(text))
    return out, best


# policy -----------------------------------------------------------------------

VARIANTS = ("multi-step", "single-step", "pretrain-finetune")


@dataclass
class Transition:
    obs: object
    proprio: np.ndarray
    task_id: int
    expert: np.ndarray
    next_obs: object


def keyframe_transitions(demos, velocity_threshold=1e-3):
    """Every non-terminal frame paired with the observation at its next keyframe."""
    out = []
    for demo in demos:
        fr = demo.frames
        keys = select_keyframes(fr, velocity_threshold)
        for t in range(len(fr) - 1):
            k = next(k for k in keys if k > t)
            out.append(Transition(fr[t].observation, fr[t].proprio, fr[t].task_id,
                                  np.asarray(fr[t].expert_action), fr[k].observation))
    return out


@dataclass
class PolicyResult:
    policy: Policy
    records: list
    initial: dict
    final: dict
    extractor_hash: tuple


def smoothed(values, window=50):
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        window = max(1, len(v))
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


class _TokenSource:
    """Frozen reference tokens cached per observation, plus an optional trainable path."""

    def __init__(self, cfg, extractor: GeometryModel, trainable=False, store=None):
        self.cfg = cfg
        self.extractor = extractor
        self.patch = cfg["policy.patch"]
        self.m = cfg["policy.num_latents"]
        self.proj = fixed_projection(cfg["network.channels"], cfg["policy.channels"], cfg["seed"])
        self.cache = {}
        self.grids = {}
        if trainable:
            # pretrain-finetune baseline: tokens from a trainable copy of the fusion network
            self.copy = GeometryModel(extractor.cfg, store=ParamStore(cfg["seed"] + 1))
            self.copy.store.load(extractor.store.snapshot())
            self.copy_names = [n for n in self.copy.store if n.startswith("fuse.")]
            self.map = Linear(store, "ft.proj", cfg["network.channels"], cfg["policy.channels"])
        else:
            self.copy = None

    def grid(self, obs):
        key = id(obs)
        if key not in self.grids:
            self.grids[key] = self.extractor.input_grid(obs)
        return self.grids[key]

    def frozen(self, obs):
        key = id(obs)
        if key not in self.cache:
            vol = self.extractor.volume(self.grid(obs)).detached()
            self.cache[key] = reference_tokens(vol, self.patch, self.m, self.proj)
        return self.cache[key]

    def trainable(self, obs):
        vol = self.copy.volume(self.grid(obs))
        return reference_tokens(vol, self.patch, self.m, self.map.W, frozen=False)


def _policy_eval(policy, transitions, source, multi_step, finetune=False):
    mse, dist = [], []
    for tr in transitions:
        tokens = source.trainable(tr.obs) if finetune else None
        x, xn, a = policy(tr.obs, tr.proprio, tr.task_id, tokens)
        mse.append(float(np.mean((a.data - tr.expert) ** 2)))
        d, _, _ = distill_loss(x, source.frozen(tr.obs), xn, source.frozen(tr.next_obs))
        dist.append(float(d.data))
    return {"action_mse": float(np.mean(mse)), "distill": float(np.mean(dist))}


def train_policy(cfg, demos, extractor: GeometryModel, variant="multi-step", seed=None, steps=None,
                 out_dir=None):
    """Behaviour cloning with next-keyframe targets plus a scheduled distillation term."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    seed = cfg["seed"] if seed is None else seed
    steps = cfg["policy.steps"] if steps is None else steps
    before = extractor.store.digest()
    transitions = keyframe_transitions(demos, cfg["policy.velocity_threshold"])
    n_tasks = max(tr.task_id for tr in transitions) + 1
    store = ParamStore(seed)
    policy = Policy(store, cfg["policy.num_latents"], cfg["policy.channels"], max(n_tasks, 4))
    finetune = variant == "pretrain-finetune"
    multi = variant == "multi-step"
    source = _TokenSource(cfg, extractor, trainable=finetune, store=store)
    initial = _policy_eval(policy, transitions, source, multi, finetune)
    rng = np.random.default_rng(seed)
    metrics = io.MetricsWriter(None if out_dir is None else Path(out_dir) / "policy_metrics.jsonl")
    counter = ZeroNormCounter()
    schedule = cfg["policy.lambda_distill"]
    perm = np.array([], dtype=np.intp)
    for step in range(steps):
        if len(perm) == 0:
            perm = rng.permutation(len(transitions))
        tr = transitions[int(perm[0])]
        perm = perm[1:]
        store.zero_grad()
        if finetune:
            source.copy.store.zero_grad()
        tokens = source.trainable(tr.obs) if finetune else None
        x, xn, a = policy(tr.obs, tr.proprio, tr.task_id, tokens)
        dist, cur, nxt = distill_loss(x, source.frozen(tr.obs), xn, source.frozen(tr.next_obs),
                                      counter, multi_step=multi)
        lam = 0.0 if finetune else lambda_at(step, steps, schedule)
        loss, bc = policy_loss(a, tr.expert, None if finetune else dist, lam)
        _finite(float(loss.data), "policy loss", step)
        T.backward(loss)
        adamw_step(store, cfg["policy.learning_rate"], cfg["train.weight_decay"])
        if finetune:
            adamw_step(source.copy.store, cfg["policy.learning_rate"], cfg["train.weight_decay"])
        metrics.write({"step": step, "lambda": lam, "loss": float(loss.data), "bc": float(bc.data),
                       "action_mse": float(np.mean((a.data - tr.expert) ** 2)),
                       "distill": float(dist.data), "distill_cur": float(cur.data),
                       "distill_next": float(nxt.data), "zero_norm_tokens": counter.count})
    final = _policy_eval(policy, transitions, source, multi, finetune)
    after = extractor.store.digest()
    if after != before:
        raise CompatibilityError("frozen extractor parameters changed during policy training")
    if out_dir is not None:
        save_store(Path(out_dir) / f"policy_{variant}.npz", store, {"variant": variant, "steps": steps})
    return PolicyResult(policy, metrics.records, initial, final, (before, after))


def run_ablation(cfg, demos, extractor, seeds=(0, 1, 2), steps=None, variants=VARIANTS):
    """Final action MSE and two-term distillation loss per (variant, seed)."""
    table = {v: [] for v in variants}
    for v in variants:
        for s in seeds:
            res = train_policy(cfg, demos, extractor, v, seed=s, steps=steps)
            table[v].append({"seed": s, **res.final})
    return table


def ablation_text(table):
    lines = [f"{'variant':<18} {'seed':>4} {'action MSE':>12} {'distill':>10}"]
    for v, rows in table.items():
        for r in rows:
            lines.append(f"{v:<18} {r['seed']:>4} {r['action_mse']:>12.6f} {r['distill']:>10.6f}")
        lines.append(f"{v:<18} {'mean':>4} {_mean(r['action_mse'] for r in rows):>12.6f} "
                     f"{_mean(r['distill'] for r in rows):>10.6f}")
    return "\n".join(lines) + "\n"
