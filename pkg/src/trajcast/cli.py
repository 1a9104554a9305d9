"""Command line entry points: dataset generation, training, evaluation.

Exit codes: 0 success, 2 usage or configuration errors, 3 data errors,
4 numeric failure during training. Relative output paths resolve under
$TRAJCAST_OUTPUT_ROOT when that variable is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import torch

from .features import prepare_scene
from .metrics import evaluate_model, report_to_dict, save_report
from .model import CheckpointError, ModelConfig, RecurrentForecaster, load_checkpoint, predict
from .scene import SceneError
from .smoothing import SmootherParams, UnusableTrackError
from .synthetic import DEFAULT_MIX, KINDS, generate_dataset, load_dataset
from .training import ConfigError, NumericError, TrainConfig, load_config_file, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

OUTPUT_ROOT_ENV = "TRAJCAST_OUTPUT_ROOT"


def _out_path(value: str) -> Path:
    path = Path(value)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _parse_mix(text: str) -> dict[str, float]:
    """Parse 'kind=weight,kind=weight' into a scenario mix."""
    mix = {}
    for item in text.split(","):
        if "=" not in item:
            raise ConfigError(f"mix entry {item!r} is not kind=weight")
        kind, _, raw = item.partition("=")
        kind = kind.strip()
        if kind not in KINDS:
            raise ConfigError(f"unknown scene kind {kind!r} in --mix; expected one of {KINDS}")
        try:
            weight = float(raw)
        except ValueError as exc:
            raise ConfigError(f"mix weight for {kind!r} is not a number: {raw!r}") from exc
        if weight < 0:
            raise ConfigError(f"mix weight for {kind!r} must be non-negative")
        mix[kind] = weight
    if not mix or sum(mix.values()) <= 0:
        raise ConfigError("--mix needs at least one positive weight")
    return mix


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajcast",
        description="Multi-modal trajectory forecasting on lane-mapped scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic scene corpus")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--n", type=int, required=True, help="number of scenes")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--mix", help="scenario mix as kind=weight,kind=weight")
    gen.add_argument("--val-every", type=int, default=10,
                     help="every k-th scene goes to the validation split")
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="train a model on a generated corpus")
    tr.add_argument("--data", required=True, help="dataset directory (from generate)")
    tr.add_argument("--out", required=True, help="run output directory")
    tr.add_argument("--config", help="key = value config file")
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--variant", choices=("full", "social_only", "map_only"), default=None,
                    help="with --no-explicit: which sub-network to train")
    map_group = tr.add_mutually_exclusive_group()
    map_group.add_argument("--map-in-encoder", action="store_true",
                           help="fuse the map once into encoder states instead of the decoder")
    map_group.add_argument("--no-map", action="store_true", help="drop map fusion entirely")
    tr.add_argument("--no-social", action="store_true", help="drop social attention")
    tr.add_argument("--no-explicit", action="store_true",
                    help="train only the full network, not the sub-networks")
    tr.add_argument("--no-augment", action="store_true", help="disable rigid augmentation")
    tr.add_argument("--no-wta", action="store_true",
                    help="disable the annealed endpoint loss scaling")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint and write a report")
    ev.add_argument("--data", required=True, help="dataset directory (from generate)")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", required=True, help="report JSON path")
    ev.add_argument("--split", choices=("val", "train"), default="val")
    ev.add_argument("--variant", choices=("full", "social_only", "map_only"), default="full")
    ev.add_argument("--batch-size", type=int, default=32)
    ev.add_argument("--plot-dir", help="also render forecast images here")
    ev.add_argument("--plot-limit", type=int, default=8)
    ev.set_defaults(func=cmd_eval)
    return parser


def cmd_generate(args) -> int:
    mix = _parse_mix(args.mix) if args.mix else DEFAULT_MIX
    out = _out_path(args.out)
    manifest = generate_dataset(out, args.n, args.seed, mix=mix, val_every=args.val_every)
    n_val = sum(1 for e in manifest["scenes"] if e["file"].startswith("val/"))
    print(f"wrote {args.n} scenes to {out} ({args.n - n_val} train, {n_val} val)")
    return EXIT_OK


def _configs_from_args(args) -> tuple[ModelConfig, TrainConfig, SmootherParams]:
    if args.config:
        model_cfg, train_cfg, smoother = load_config_file(args.config)
    else:
        model_cfg, train_cfg, smoother = ModelConfig(), TrainConfig(), SmootherParams()

    model_updates = {}
    if args.map_in_encoder:
        model_updates["map_stage"] = "encoder"
    if args.no_map:
        model_updates["map_stage"] = None
    if args.no_social:
        model_updates["use_social"] = False
    if model_updates:
        model_cfg = dataclasses.replace(model_cfg, **model_updates)

    train_updates = {}
    for name in ("epochs", "batch_size", "lr", "seed", "variant"):
        value = getattr(args, name)
        if value is not None:
            train_updates[name] = value
    if args.no_explicit:
        train_updates["explicit"] = False
    if args.no_augment:
        train_updates["augment"] = False
    if args.no_wta:
        train_updates["wta"] = False
    if train_updates:
        train_cfg = dataclasses.replace(train_cfg, **train_updates)
    try:
        # re-run validation on the merged values
        model_cfg = ModelConfig(**dataclasses.asdict(model_cfg))
        train_cfg = TrainConfig(**dataclasses.asdict(train_cfg))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return model_cfg, train_cfg, smoother


def _prepare_all(scenes, model_cfg: ModelConfig, smoother: SmootherParams = SmootherParams()):
    return [
        prepare_scene(
            s, lane_points=model_cfg.lane_points, map_radius=model_cfg.map_radius,
            smoother=smoother,
        )
        for s in scenes
    ]


def cmd_train(args) -> int:
    model_cfg, train_cfg, smoother = _configs_from_args(args)
    train_scenes, val_scenes = load_dataset(args.data)
    if not train_scenes or not val_scenes:
        raise SceneError(f"dataset at {args.data} has an empty split")
    torch.manual_seed(train_cfg.seed)
    model = RecurrentForecaster(model_cfg)
    prepared_train = _prepare_all(train_scenes, model_cfg, smoother)
    prepared_val = _prepare_all(val_scenes, model_cfg, smoother)
    out = _out_path(args.out)
    result = train(model, prepared_train, prepared_val, train_cfg, out)
    print(
        f"done: best val minFDE {result.best_val_min_fde:.3f} at epoch "
        f"{result.best_epoch}; checkpoints in {out}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    train_scenes, val_scenes = load_dataset(args.data)
    scenes = val_scenes if args.split == "val" else train_scenes
    if not scenes:
        raise SceneError(f"no scenes in split {args.split!r}")
    prepared = _prepare_all(scenes, model.cfg)
    report = evaluate_model(model, prepared, batch_size=args.batch_size, variant=args.variant)
    out = _out_path(args.out)
    save_report(report, out)
    doc = report_to_dict(report)
    dac_text = "n/a" if doc["dac"] is None else f"{doc['dac']:.3f}"
    print(
        f"{report.n_scenes} scenes: minADE {doc['min_ade']:.3f} "
        f"minFDE {doc['min_fde']:.3f} MR {doc['miss_rate']:.3f} DAC {dac_text}"
    )
    if args.plot_dir:
        from .features import collate
        from .viz import render_forecast

        plot_dir = _out_path(args.plot_dir)
        plot_dir.mkdir(parents=True, exist_ok=True)
        subset = prepared[: args.plot_limit]
        preds = predict(model, collate(subset), variant=args.variant)
        for i, p in enumerate(subset):
            render_forecast(
                p, preds.trajectories[i], preds.probabilities[i],
                out_path=plot_dir / f"{p.scene_id or i}.png",
            )
        print(f"wrote {len(subset)} plots to {plot_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SceneError, UnusableTrackError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
