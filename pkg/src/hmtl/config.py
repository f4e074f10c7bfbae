"""Flat, sectioned key=value experiment configuration.

Grammar: INI-style sections ``[data] [model] [pretext] [loss] [optim] [run]``
with one ``key = value`` pair per line and ``#`` comments. Lists are comma
separated; the step-decay schedule uses ``epoch:multiplier`` pairs. Every key
is optional and falls back to the library default; unknown keys are rejected
so typos fail loudly. ``dump_config`` and ``parse_config`` round-trip.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

from .datasets import LabeledDataset, TaskKind, load_folder, synth_faces, task_from_name
from .heads import BackboneConfig
from .pretext import AugmentLevel, Region
from .trainer import LossConfig, OptimConfig, PretextConfig, RunConfig


class ConfigError(ValueError):
    """Raised for unparseable or inconsistent configuration input."""


@dataclass(frozen=True)
class DataConfig:
    """Where samples come from: the synthetic generator or a dataset folder."""

    source: str = "synth"  # "synth" | "folder"
    task: str = "classification"
    classes: int = 8
    n: int = 2000
    seed: int = 7
    side: int = 64
    proportions: Optional[Tuple[float, ...]] = None
    root: Optional[str] = None
    val_root: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("synth", "folder"):
            raise ConfigError(f"data source must be 'synth' or 'folder', got {self.source!r}")
        if self.source == "folder" and not self.root:
            raise ConfigError("data source 'folder' requires root=")


_KNOWN_KEYS = {
    "data": {"source", "task", "classes", "n", "seed", "side", "proportions", "root", "val_root"},
    "model": {"resolution", "feature_dim", "num_blocks", "dropout"},
    "pretext": {"kind", "grid", "weights", "region", "square_side", "identity_stub"},
    "loss": {
        "class_weighting",
        "label_smoothing",
        "lambda_sl",
        "lambda_ssh",
        "lambda_rotation",
        "lambda_dec",
        "dec_mode",
        "focal_alpha",
        "focal_gamma",
        "alpha_cat",
        "n_bins",
        "pose_bins",
        "puzzle_loss",
        "rmse_on_mask_only",
        "cache_teacher",
    },
    "optim": {"lr", "schedule", "batch_size"},
    "run": {
        "protocol",
        "augment",
        "epochs",
        "seeds",
        "data_fraction",
        "subset_seed",
        "early_stop_patience",
        "val_fraction",
        "thresholds",
        "stage1_epochs",
        "out_dir",
    },
}


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok.strip())


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _schedule(text: str) -> Tuple[Tuple[int, float], ...]:
    pairs = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        epoch_s, _, mult_s = tok.partition(":")
        pairs.append((int(epoch_s), float(mult_s)))
    return tuple(pairs)


def parse_config(text: str) -> Tuple[RunConfig, DataConfig]:
    """Parse the sectioned key=value grammar into run and data configurations."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc

    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(parser[section]) - _KNOWN_KEYS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")

    def get(section: str, key: str, default=None) -> Optional[str]:
        if parser.has_section(section) and key in parser[section]:
            return parser[section][key].strip()
        return default

    try:
        data = DataConfig(
            source=get("data", "source", "synth"),
            task=get("data", "task", "classification"),
            classes=int(get("data", "classes", "8")),
            n=int(get("data", "n", "2000")),
            seed=int(get("data", "seed", "7")),
            side=int(get("data", "side", "64")),
            proportions=_floats(get("data", "proportions")) if get("data", "proportions") else None,
            root=get("data", "root"),
            val_root=get("data", "val_root"),
        )

        backbone = BackboneConfig(
            resolution=int(get("model", "resolution", str(data.side))),
            feature_dim=int(get("model", "feature_dim", "128")),
            num_blocks=int(get("model", "num_blocks", "4")),
        )

        pretext = None
        if parser.has_section("pretext") and get("pretext", "kind", "") not in ("", "none"):
            region_text = get("pretext", "region")
            region = Region(*_floats(region_text)) if region_text else Region()
            pretext = PretextConfig(
                kind=get("pretext", "kind"),
                grid=int(get("pretext", "grid", "3")),
                region_weights=_floats(get("pretext", "weights")) if get("pretext", "weights") else None,
                inpaint_region=region,
                square_side=float(get("pretext", "square_side", "0.4")),
                identity_stub=_bool(get("pretext", "identity_stub", "false")),
            )

        loss = LossConfig(
            class_weighting=_bool(get("loss", "class_weighting", "true")),
            label_smoothing=float(get("loss", "label_smoothing", "0.1")),
            lambda_sl=float(get("loss", "lambda_sl", "1.0")),
            lambda_ssh=float(get("loss", "lambda_ssh", "1.0")),
            lambda_rotation=float(get("loss", "lambda_rotation", "1.0")),
            lambda_dec=float(get("loss", "lambda_dec", "1.0")),
            dec_mode=get("loss", "dec_mode", "fixed"),
            focal_alpha=float(get("loss", "focal_alpha", "1.0")),
            focal_gamma=float(get("loss", "focal_gamma", "2.0")),
            alpha_cat=float(get("loss", "alpha_cat", "1.0")),
            n_bins=int(get("loss", "n_bins", "20")),
            pose_bins=int(get("loss", "pose_bins", "66")),
            puzzle_loss=get("loss", "puzzle_loss") or None,
            rmse_on_mask_only=_bool(get("loss", "rmse_on_mask_only", "false")),
            cache_teacher=_bool(get("loss", "cache_teacher", "true")),
        )

        lr_text = get("optim", "lr")
        optim = OptimConfig(
            lr=float(lr_text) if lr_text else None,
            schedule=_schedule(get("optim", "schedule", "")),
        )

        patience_text = get("run", "early_stop_patience", "10")
        stage1_text = get("run", "stage1_epochs")
        run = RunConfig(
            protocol=get("run", "protocol", "sl"),
            augment=AugmentLevel(get("run", "augment", "no")),
            pretext=pretext,
            seeds=_ints(get("run", "seeds", "0,1,2")),
            optim=optim,
            epochs=int(get("run", "epochs", "40")),
            batch_size=int(get("optim", "batch_size", "64")),
            data_fraction=float(get("run", "data_fraction", "1.0")),
            subset_seed=int(get("run", "subset_seed", "1234")),
            loss=loss,
            backbone=backbone,
            dropout=float(get("model", "dropout", "0.2")),
            early_stop_patience=None if patience_text.lower() == "none" else int(patience_text),
            val_fraction=float(get("run", "val_fraction", "0.2")),
            thresholds=_floats(get("run", "thresholds", "0.5")),
            stage1_epochs=int(stage1_text) if stage1_text else None,
            out_dir=get("run", "out_dir"),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return run, data


def load_config_file(path) -> Tuple[RunConfig, DataConfig]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"))


def dump_config(run: RunConfig, data: DataConfig) -> str:
    """Serialize configurations back to the sectioned key=value grammar."""
    lines = ["[data]"]
    lines.append(f"source = {data.source}")
    lines.append(f"task = {data.task}")
    lines.append(f"classes = {data.classes}")
    lines.append(f"n = {data.n}")
    lines.append(f"seed = {data.seed}")
    lines.append(f"side = {data.side}")
    if data.proportions:
        lines.append("proportions = " + ",".join(repr(p) for p in data.proportions))
    if data.root:
        lines.append(f"root = {data.root}")
    if data.val_root:
        lines.append(f"val_root = {data.val_root}")

    lines += [
        "",
        "[model]",
        f"resolution = {run.backbone.resolution}",
        f"feature_dim = {run.backbone.feature_dim}",
        f"num_blocks = {run.backbone.num_blocks}",
        f"dropout = {run.dropout!r}",
    ]

    if run.pretext is not None:
        p = run.pretext
        lines += ["", "[pretext]", f"kind = {p.kind}", f"grid = {p.grid}"]
        if p.region_weights is not None:
            lines.append("weights = " + ",".join(repr(w) for w in p.region_weights))
        r = p.inpaint_region
        lines.append(f"region = {r.top!r},{r.left!r},{r.bottom!r},{r.right!r}")
        lines.append(f"square_side = {p.square_side!r}")
        lines.append(f"identity_stub = {str(p.identity_stub).lower()}")

    ls = run.loss
    lines += [
        "",
        "[loss]",
        f"class_weighting = {str(ls.class_weighting).lower()}",
        f"label_smoothing = {ls.label_smoothing!r}",
        f"lambda_sl = {ls.lambda_sl!r}",
        f"lambda_ssh = {ls.lambda_ssh!r}",
        f"lambda_rotation = {ls.lambda_rotation!r}",
        f"lambda_dec = {ls.lambda_dec!r}",
        f"dec_mode = {ls.dec_mode}",
        f"focal_alpha = {ls.focal_alpha!r}",
        f"focal_gamma = {ls.focal_gamma!r}",
        f"alpha_cat = {ls.alpha_cat!r}",
        f"n_bins = {ls.n_bins}",
        f"pose_bins = {ls.pose_bins}",
        f"rmse_on_mask_only = {str(ls.rmse_on_mask_only).lower()}",
        f"cache_teacher = {str(ls.cache_teacher).lower()}",
    ]
    if ls.puzzle_loss:
        lines.append(f"puzzle_loss = {ls.puzzle_loss}")

    lines += ["", "[optim]"]
    if run.optim.lr is not None:
        lines.append(f"lr = {run.optim.lr!r}")
    if run.optim.schedule:
        lines.append("schedule = " + ",".join(f"{e}:{m!r}" for e, m in run.optim.schedule))
    lines.append(f"batch_size = {run.batch_size}")

    lines += [
        "",
        "[run]",
        f"protocol = {run.protocol}",
        f"augment = {run.augment.value}",
        f"epochs = {run.epochs}",
        "seeds = " + ",".join(str(s) for s in run.seeds),
        f"data_fraction = {run.data_fraction!r}",
        f"subset_seed = {run.subset_seed}",
        f"early_stop_patience = {run.early_stop_patience if run.early_stop_patience is not None else 'none'}",
        f"val_fraction = {run.val_fraction!r}",
        "thresholds = " + ",".join(repr(t) for t in run.thresholds),
    ]
    if run.stage1_epochs is not None:
        lines.append(f"stage1_epochs = {run.stage1_epochs}")
    if run.out_dir:
        lines.append(f"out_dir = {run.out_dir}")
    return "\n".join(lines) + "\n"


def build_dataset(data: DataConfig) -> Tuple[LabeledDataset, Optional[LabeledDataset]]:
    """Materialize (train-pool, optional validation) datasets from a data config."""
    task = task_from_name(data.task, data.classes)
    if data.source == "synth":
        return synth_faces(data.n, data.seed, task, side=data.side, proportions=data.proportions), None
    dataset = load_folder(data.root, task)
    val = load_folder(data.val_root, task) if data.val_root else None
    return dataset, val
