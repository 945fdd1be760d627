"""Command-line driver.

Exit codes: 0 success, 2 configuration error, 3 I/O or checkpoint error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data, io
from .camera import PointCloud
from .config import TrainConfig
from .diffcore import ConfigError
from .splatting import rasterize
from .training import (CompatibilityError, NumericalError, ablation_text, evaluate_checkpoints,
                       load_model, prepare_scene, pretrain, run_ablation, train_policy)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _config(args):
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = TrainConfig.from_text(f"{k.strip()} = {v}")[k.strip()]
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.with_(**{k.replace(".", "__"): v for k, v in overrides.items()}) if overrides else cfg


def _dump_stages(out, fwd, which):
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(fwd.stages):
        if which == "seeds" and i > 0:
            break
        io.write_ply(out / f"stage_{i}.ply", PointCloud(p.data))


def cmd_generate(cfg, args):
    out = Path(args.out)
    scenes = data.make_scenes(cfg, args.count)
    data.write_dataset(out, scenes)
    if args.trajectories:
        data.write_trajectories(out, data.make_trajectories(cfg))
    (out / "config.txt").write_text(cfg.to_text())
    print(f"wrote {len(scenes)} scenes to {out / 'scenes'}")


def cmd_pretrain(cfg, args):
    out = Path(args.out)
    scenes = data.read_dataset(args.data or out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    res = pretrain(cfg, scenes, out)
    if args.dump_seeds or args.dump_stages:
        for s in scenes:
            grid, _ = prepare_scene(res.model, s, cfg["train.input_view"])
            _dump_stages(out / "points" / s.scene_id, res.model(grid),
                         "stages" if args.dump_stages else "seeds")
    last = res.records[-1]
    print(f"step {last['step']}: rec {last['rec']:.6f} rend {last['rend']}")


def cmd_render(cfg, args):
    out = Path(args.out)
    model = load_model(cfg, args.checkpoint)
    scenes = data.read_dataset(args.data)
    out.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        grid, _ = prepare_scene(model, s, cfg["train.input_view"])
        fwd = model(grid)
        g = model.gaussians(fwd)
        d = out / s.scene_id
        d.mkdir(parents=True, exist_ok=True)
        for v, cam in enumerate(data.held_out_cameras(cfg, s.spec)):
            io.write_ppm(d / f"novel_{v}.ppm", rasterize(g, cam).image.data)
        io.write_ply(d / "pred_full.ply", PointCloud(fwd.stages[-1].data))
        if args.dump_seeds or args.dump_stages:
            _dump_stages(d / "points", fwd, "stages" if args.dump_stages else "seeds")
        if args.dump_volume:
            io.heatmap_slices(fwd.volume.values.data, fwd.volume.resolution, d / "volume")
    print(f"rendered {len(scenes)} scenes to {out}")


def cmd_distill(cfg, args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extractor = load_model(cfg, args.checkpoint)
    try:
        demos = data.read_trajectories(args.data) if args.data else data.make_trajectories(cfg)
    except FileNotFoundError:
        demos = data.make_trajectories(cfg)
    if args.ablation:
        table = run_ablation(cfg, demos, extractor, seeds=range(cfg["seed"], cfg["seed"] + 3))
        (out / "ablation.txt").write_text(ablation_text(table))
        (out / "ablation.json").write_text(json.dumps(table, indent=1))
        print(ablation_text(table))
        return
    res = train_policy(cfg, demos, extractor, args.variant, out_dir=out)
    print(f"action MSE {res.initial['action_mse']:.5f} -> {res.final['action_mse']:.5f}; "
          f"distill {res.initial['distill']:.5f} -> {res.final['distill']:.5f}")


def cmd_eval(cfg, args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = data.read_dataset(args.data)
    snaps = {}
    for path in args.checkpoint:
        p = Path(path)
        label = p.stem.replace("ckpt_", "")
        snaps[label] = load_model(cfg, p).store.snapshot()
    _, best = evaluate_checkpoints(cfg, snaps, scenes, out)
    print((out / "eval.txt").read_text(), end="")


def build_parser():
    parser = argparse.ArgumentParser(prog="geoprior", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return p

    p = common(sub.add_parser("generate-scenes", help="render a synthetic scene dataset"))
    p.add_argument("--count", type=int, help="number of scenes (default train.demos)")
    p.add_argument("--trajectories", action="store_true", help="also script policy demonstrations")
    p.set_defaults(fn=cmd_generate)

    p = common(sub.add_parser("pretrain", help="geometric pretraining"))
    p.add_argument("--data", help="dataset root (default --out)")
    p.add_argument("--dump-seeds", action="store_true")
    p.add_argument("--dump-stages", action="store_true")
    p.set_defaults(fn=cmd_pretrain)

    p = common(sub.add_parser("render", help="render held-out views from a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dump-seeds", action="store_true")
    p.add_argument("--dump-stages", action="store_true")
    p.add_argument("--dump-volume", action="store_true", help="write per-slice feature-norm heatmaps")
    p.set_defaults(fn=cmd_render)

    p = common(sub.add_parser("distill", help="train the policy against a frozen checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="trajectory root (generated from the config if absent)")
    p.add_argument("--variant", default="multi-step",
                   choices=["multi-step", "single-step", "pretrain-finetune"])
    p.add_argument("--ablation", action="store_true", help="run all variants over three seeds")
    p.set_defaults(fn=cmd_distill)

    p = common(sub.add_parser("eval", help="PSNR / SSIM / Chamfer on held-out views"))
    p.add_argument("--checkpoint", required=True, nargs="+")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        args.fn(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CompatibilityError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
