"""Training loop.

The optimization objective sums the mixture loss of the full decoder with
the losses of the social-only and map-only sub-networks over the same shared
parameters, so each fusion input learns to carry the prediction on its own.
Augmentation applies a fresh random rigid transform per scene per epoch.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .features import PreparedScene, SceneBatch, augment_batch, collate
from .losses import WtaSchedule, mixture_loss, wta_weights
from .metrics import MetricReport, evaluate_model
from .model import ModelConfig, RecurrentForecaster, save_checkpoint
from .smoothing import SmootherParams


class ConfigError(ValueError):
    """Bad or unknown configuration input."""


class NumericError(RuntimeError):
    """Training hit a non-finite loss; the run is aborted."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    lambda_full: float = 1.0
    lambda_social: float = 1.0
    lambda_map: float = 1.0
    explicit: bool = True
    variant: str = "full"  # sub-network to train when explicit is off
    augment: bool = True
    # half-widths of the training-time rigid perturbation; kept well below a
    # full circle so per-scene gradients stay orientation-consistent
    augment_rotation: float = math.pi / 6.0
    augment_translation: float = 3.0
    wta: bool = True
    grad_clip_norm: float | None = 10.0
    lr_factor: float = 0.5
    lr_patience: int = 5

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.variant not in ("full", "social_only", "map_only"):
            raise ConfigError(f"unknown training variant {self.variant!r}")
        if self.augment_rotation < 0 or self.augment_translation < 0:
            raise ConfigError("augmentation half-widths must be non-negative")
        if self.explicit and self.variant != "full":
            raise ConfigError("a single training variant requires explicit = false")


_BOOL_WORDS = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}


def _coerce(name: str, raw: str, typ):
    raw = raw.strip()
    if raw.lower() in ("none", "null"):
        return None
    # unwrap optional annotations like "float | None"
    t = str(typ)
    if t in ("<class 'bool'>", "bool"):
        if raw.lower() not in _BOOL_WORDS:
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[raw.lower()]
    if t in ("<class 'int'>", "int"):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from exc
    if "float" in t:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from exc
    return raw


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig, SmootherParams]:
    """Parse a flat ``key = value`` config into model, train and smoother
    configs.

    Lines starting with '#' are comments. Keys must name fields of one of
    the three configs; anything else is rejected by name.
    """
    groups = [
        ({f.name: f for f in dataclasses.fields(cls)}, {})
        for cls in (ModelConfig, TrainConfig, SmootherParams)
    ]
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        for fields, kw in groups:
            if key in fields:
                kw[key] = _coerce(key, raw, fields[key].type)
                break
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    try:
        return (
            ModelConfig(**groups[0][1]),
            TrainConfig(**groups[1][1]),
            SmootherParams(**groups[2][1]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config_file(path) -> tuple[ModelConfig, TrainConfig, SmootherParams]:
    return parse_config_text(Path(path).read_text())


def _active_variants(model_cfg: ModelConfig, train_cfg: TrainConfig) -> list[tuple[str, float]]:
    if not train_cfg.explicit:
        return [(train_cfg.variant, 1.0)]
    if not model_cfg.use_social or model_cfg.map_stage != "decoder":
        raise ConfigError(
            "explicit sub-network training needs use_social=true and map_stage=decoder"
        )
    return [
        ("full", train_cfg.lambda_full),
        ("social_only", train_cfg.lambda_social),
        ("map_only", train_cfg.lambda_map),
    ]


def batch_loss(
    model: RecurrentForecaster,
    batch: SceneBatch,
    alpha: float,
    variants: list[tuple[str, float]],
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of per-variant mixture losses on one batch."""
    valid = batch.target_valid & batch.agent_mask[:, :, None]
    target_end = batch.target_pos[:, :, -1]
    total = None
    parts: dict[str, float] = {}
    for name, lam in variants:
        mix = model(batch, variant=name)
        scale = wta_weights(mix.mean_pos[:, :, -1], target_end, alpha)
        loss = mixture_loss(mix, batch.target_pos, batch.target_vel, valid, scale)
        parts[name] = float(loss.detach())
        total = lam * loss if total is None else total + lam * loss
    return total, parts


@dataclass
class EpochStats:
    epoch: int
    alpha: float
    losses: dict[str, float]
    val: MetricReport


@dataclass
class TrainResult:
    best_val_min_fde: float
    best_epoch: int
    history: list[EpochStats] = field(default_factory=list)
    best_path: Path | None = None
    last_path: Path | None = None


def _package_source_hash() -> str:
    root = Path(__file__).parent
    digest = hashlib.sha256()
    for path in sorted(root.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _write_manifest(path: Path, model_cfg, train_cfg, extra: dict) -> None:
    doc = {
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg),
        "source_sha256": _package_source_hash(),
        **extra,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


_CSV_COLUMNS = [
    "epoch", "loss_full", "loss_social", "loss_map",
    "val_min_ade", "val_min_fde", "val_miss_rate", "val_dac", "alpha",
]


def train(
    model: RecurrentForecaster,
    train_scenes: list[PreparedScene],
    val_scenes: list[PreparedScene],
    train_cfg: TrainConfig,
    out_dir,
    log=print,
) -> TrainResult:
    """Fit the model, writing checkpoints, a metrics CSV and a run manifest.

    The best checkpoint tracks validation minFDE. A non-finite loss aborts
    with NumericError; checkpoints written so far stay on disk.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not train_scenes or not val_scenes:
        raise ConfigError("training needs non-empty train and validation sets")

    variants = _active_variants(model.cfg, train_cfg)
    torch.manual_seed(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    schedule = WtaSchedule(train_cfg.epochs, enabled=train_cfg.wta)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, factor=train_cfg.lr_factor, patience=train_cfg.lr_patience
    )

    started = time.time()
    _write_manifest(
        out_dir / "manifest.json", model.cfg, train_cfg,
        {"status": "running", "started_unix": started,
         "n_train": len(train_scenes), "n_val": len(val_scenes)},
    )

    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        csv.writer(fh).writerow(_CSV_COLUMNS)

    result = TrainResult(best_val_min_fde=float("inf"), best_epoch=-1)
    best_path = out_dir / "best.pt"
    last_path = out_dir / "last.pt"
    order = np.arange(len(train_scenes))

    for epoch in range(train_cfg.epochs):
        model.train()
        alpha = schedule.alpha(epoch)
        rng.shuffle(order)
        sums = {name: 0.0 for name, _ in variants}
        n_batches = 0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            batch = collate([train_scenes[i] for i in idx])
            if train_cfg.augment:
                batch = augment_batch(
                    batch, rng,
                    (-train_cfg.augment_rotation, train_cfg.augment_rotation),
                    (-train_cfg.augment_translation, train_cfg.augment_translation),
                )
            loss, parts = batch_loss(model, batch, alpha, variants)
            if not torch.isfinite(loss):
                _write_manifest(
                    out_dir / "manifest.json", model.cfg, train_cfg,
                    {"status": "aborted", "started_unix": started,
                     "failed_epoch": epoch, "n_train": len(train_scenes),
                     "n_val": len(val_scenes)},
                )
                raise NumericError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            if train_cfg.grad_clip_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip_norm)
            opt.step()
            for name, value in parts.items():
                sums[name] += value
            n_batches += 1

        means = {name: sums[name] / max(n_batches, 1) for name in sums}
        val = evaluate_model(model, val_scenes, batch_size=train_cfg.batch_size)
        sched.step(val.min_fde)

        stats = EpochStats(epoch=epoch, alpha=alpha, losses=means, val=val)
        result.history.append(stats)
        with open(csv_path, "a", newline="") as fh:
            csv.writer(fh).writerow([
                epoch,
                means.get("full", float("nan")),
                means.get("social_only", float("nan")),
                means.get("map_only", float("nan")),
                val.min_ade, val.min_fde, val.miss_rate, val.dac, alpha,
            ])
        save_checkpoint(model, last_path, extra={"epoch": epoch})
        if val.min_fde < result.best_val_min_fde:
            result.best_val_min_fde = val.min_fde
            result.best_epoch = epoch
            save_checkpoint(model, best_path, extra={"epoch": epoch, "val_min_fde": val.min_fde})
        dac_text = "n/a" if val.dac is None else f"{val.dac:.3f}"
        log(
            f"epoch {epoch:3d} alpha {alpha:.2f} "
            + " ".join(f"{k} {v:.3f}" for k, v in means.items())
            + f" | val minADE {val.min_ade:.3f} minFDE {val.min_fde:.3f}"
            f" MR {val.miss_rate:.3f} DAC {dac_text}"
        )

    result.best_path = best_path
    result.last_path = last_path
    _write_manifest(
        out_dir / "manifest.json", model.cfg, train_cfg,
        {"status": "done", "started_unix": started, "finished_unix": time.time(),
         "n_train": len(train_scenes), "n_val": len(val_scenes),
         "best_epoch": result.best_epoch, "best_val_min_fde": result.best_val_min_fde,
         "outputs": {"best": best_path.name, "last": last_path.name,
                     "metrics": csv_path.name}},
    )
    return result
