"""Training protocols: supervised baselines, self-supervised pre-training with
frozen evaluation and fine-tuning, co-training with auxiliary heads, two-stage
teacher/student in-painting, low-data subsetting, and the ablation that feeds
pretext inputs without auxiliary heads.

Determinism contract: given (dataset, config, seed), the delivered batch
stream and the metric history are reproducible bit-for-bit. Augmentation and
pretext draws come from per-sample generators derived from
(seed, epoch, sample index, stream tag); torch's global generator is seeded
once per seed-run and only consumed by parameter init and dropout.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import losses as L
from . import metrics as M
from .datasets import ImageRecord, LabeledDataset, TaskKind, TaskSpec, class_weights
from .heads import (
    BackboneConfig,
    HeadKind,
    HeadSpec,
    ModelAssembly,
    assemble,
    build_backbone,
    cat_reg_head,
    decoder_head,
    load_checkpoint,
    puzzle_heads,
    rotation_head,
    save_checkpoint,
    strip_ssh,
    supervised_head,
)
from .pretext import (
    AugmentLevel,
    Region,
    default_region_weights,
    make_inpaint,
    make_puzzle,
    make_rotation,
)
from .pretext import augment as augment_image
from .reporting import append_metrics_csv

PROTOCOLS = (
    "sl",
    "ssl_pretrain",
    "frozen_eval",
    "fine_tune",
    "hmtl",
    "hmtl_inpaint_pl_two_stage",
    "pretext_without_ssh",
)

PRETEXT_KINDS = ("puzzle", "rotation", "puzzle_rotation", "inpaint_pwl", "inpaint_pl")

# Stream tags keep augmentation, pretext, shuffling and diagnostics on
# independent substreams of the per-seed randomness.
_TAG_AUGMENT = 3
_TAG_PRETEXT = 5
_TAG_SSH_VAL = 11
_TAG_SHUFFLE = 13
_SPLIT_SEED = 2024
_SUBSET_DEFAULT_SEED = 1234


def _rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng([int(p) for p in parts])


class _IdentityRng:
    """Stub generator forcing the identity permutation (diagnostic hook)."""

    def permutation(self, n: int) -> np.ndarray:
        return np.arange(n)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimConfig:
    """Adaptive-moment optimizer settings with a step-decay schedule.

    ``lr`` of None resolves to the protocol default: 1e-4 for fine-tuning,
    1e-3 for training from random weights. ``schedule`` entries are
    (epoch threshold, multiplier) pairs applied once the epoch is reached.
    """

    lr: Optional[float] = None
    schedule: Tuple[Tuple[int, float], ...] = ()

    def resolve_lr(self, protocol: str) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-4 if protocol == "fine_tune" else 1e-3


def step_decay_lr(epoch: int, base_lr: float, schedule: Sequence[Tuple[int, float]]) -> float:
    """Base rate times the product of multipliers whose thresholds have passed."""
    lr = float(base_lr)
    for threshold, mult in schedule:
        if epoch >= threshold:
            lr *= mult
    return lr


@dataclass(frozen=True)
class PretextConfig:
    kind: str = "puzzle"
    grid: int = 3
    region_weights: Optional[Tuple[float, ...]] = None
    inpaint_region: Region = Region()
    square_side: float = 0.40
    identity_stub: bool = False

    def __post_init__(self):
        if self.kind not in PRETEXT_KINDS:
            raise ValueError(f"unknown pretext kind {self.kind!r}; options: {PRETEXT_KINDS}")
        if self.region_weights is not None and len(self.region_weights) != self.grid**2:
            raise ValueError(
                f"region_weights needs {self.grid ** 2} entries for a {self.grid}x{self.grid} grid"
            )

    @property
    def uses_rotation(self) -> bool:
        return self.kind in ("rotation", "puzzle_rotation")

    @property
    def uses_inpaint(self) -> bool:
        return self.kind in ("inpaint_pwl", "inpaint_pl")

    def weight_map(self) -> Optional[np.ndarray]:
        if self.region_weights is None:
            return None
        return np.asarray(self.region_weights, dtype=np.float64)


@dataclass(frozen=True)
class LossConfig:
    class_weighting: bool = True
    label_smoothing: float = 0.1
    lambda_sl: float = 1.0
    lambda_ssh: float = 1.0
    lambda_rotation: float = 1.0
    lambda_dec: float = 1.0
    dec_mode: str = "fixed"  # "fixed" | "auto"
    focal_alpha: float = 1.0
    focal_gamma: float = 2.0
    alpha_cat: float = 1.0
    n_bins: int = 20
    pose_bins: int = 66
    puzzle_loss: Optional[str] = None  # None -> protocol default
    rmse_on_mask_only: bool = False
    cache_teacher: bool = True

    def __post_init__(self):
        if self.dec_mode not in ("fixed", "auto"):
            raise ValueError(f"dec_mode must be 'fixed' or 'auto', got {self.dec_mode!r}")
        if self.puzzle_loss not in (None, "ce", "focal"):
            raise ValueError(f"puzzle_loss must be 'ce' or 'focal', got {self.puzzle_loss!r}")


@dataclass(frozen=True)
class RunConfig:
    """Full experiment description for one protocol run."""

    protocol: str
    augment: AugmentLevel = AugmentLevel.NO
    pretext: Optional[PretextConfig] = None
    seeds: Tuple[int, ...] = (0, 1, 2)
    optim: OptimConfig = OptimConfig()
    epochs: int = 40
    batch_size: int = 64
    data_fraction: float = 1.0
    subset_seed: int = _SUBSET_DEFAULT_SEED
    loss: LossConfig = LossConfig()
    backbone: BackboneConfig = BackboneConfig()
    dropout: float = 0.2
    early_stop_patience: Optional[int] = 10
    val_fraction: float = 0.2
    thresholds: Tuple[float, ...] = (0.5,)
    stage1_epochs: Optional[int] = None
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; options: {PROTOCOLS}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValueError(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        needs_pretext = self.protocol in ("ssl_pretrain", "hmtl", "pretext_without_ssh", "hmtl_inpaint_pl_two_stage")
        if needs_pretext and self.pretext is None:
            raise ValueError(f"protocol {self.protocol!r} requires a pretext configuration")
        if self.protocol == "hmtl" and self.pretext and self.pretext.kind == "inpaint_pl":
            raise ValueError("perceptual-loss in-painting needs the hmtl_inpaint_pl_two_stage protocol")
        if self.protocol == "ssl_pretrain" and self.pretext and self.pretext.kind == "inpaint_pl":
            raise ValueError("pre-training supports pixel-wise in-painting only (inpaint_pwl)")
        if self.protocol == "hmtl_inpaint_pl_two_stage" and self.pretext and not self.pretext.uses_inpaint:
            raise ValueError("two-stage protocol requires an in-painting pretext")
        if self.protocol == "hmtl" and self.loss.puzzle_loss == "focal":
            raise ValueError("co-training uses cross entropy for puzzle heads; focal is for pre-training")


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train: Dict[str, float] = field(default_factory=dict)
    val: Dict[str, float] = field(default_factory=dict)


@dataclass
class SeedRun:
    seed: int
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val: Dict[str, float] = field(default_factory=dict)
    final_val: Dict[str, float] = field(default_factory=dict)
    steps_to_threshold: Dict[float, Optional[int]] = field(default_factory=dict)
    steps_per_epoch: int = 0
    checkpoint_dir: Optional[str] = None
    transform_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def best_score(self) -> float:
        return self.final_val.get("score", float("-inf"))


@dataclass
class RunResult:
    protocol: str
    seed_runs: List[SeedRun] = field(default_factory=list)

    @property
    def best_index(self) -> int:
        scores = [run.best_score for run in self.seed_runs]
        return int(np.argmax(scores))

    @property
    def best(self) -> SeedRun:
        return self.seed_runs[self.best_index]

    @property
    def best_checkpoint(self) -> Optional[str]:
        return self.best.checkpoint_dir


# ---------------------------------------------------------------------------
# Dataset plumbing
# ---------------------------------------------------------------------------


def split_train_val(dataset: LabeledDataset, val_fraction: float) -> Tuple[List[ImageRecord], List[ImageRecord]]:
    """Deterministic train/val split, stratified per class for categorical tasks.

    The split depends only on the dataset and fraction (fixed internal seed),
    so every seed of a run and every protocol sees the same validation set.
    """
    rng = _rng(_SPLIT_SEED)
    records = dataset.records
    if dataset.task.categorical:
        train: List[ImageRecord] = []
        val: List[ImageRecord] = []
        for cls in range(dataset.task.num_classes):
            idx = [i for i, r in enumerate(records) if r.label == cls]
            order = rng.permutation(len(idx))
            n_val = max(1, int(round(val_fraction * len(idx))))
            chosen = {idx[j] for j in order[:n_val]}
            val.extend(records[i] for i in sorted(chosen))
            train.extend(records[i] for i in sorted(set(idx) - chosen))
    else:
        order = rng.permutation(len(records))
        n_val = max(1, int(round(val_fraction * len(records))))
        val_ids = set(order[:n_val].tolist())
        val = [records[i] for i in sorted(val_ids)]
        train = [records[i] for i in range(len(records)) if i not in val_ids]
    if not train or not val:
        raise ValueError("split produced an empty train or validation set")
    return train, val


def subsample(dataset: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    """Stratified random subset preserving class proportions within rounding."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return dataset
    rng = _rng(seed, 0x5AB)
    records = dataset.records
    picked: List[ImageRecord] = []
    if dataset.task.categorical:
        for cls in range(dataset.task.num_classes):
            idx = [i for i, r in enumerate(records) if r.label == cls]
            n_keep = int(round(fraction * len(idx)))
            if n_keep == 0:
                raise ValueError(
                    f"fraction {fraction} leaves class {cls} empty ({len(idx)} samples)"
                )
            order = rng.permutation(len(idx))[:n_keep]
            picked.extend(records[idx[j]] for j in sorted(order.tolist()))
    else:
        n_keep = max(1, int(round(fraction * len(records))))
        order = rng.permutation(len(records))[:n_keep]
        picked.extend(records[i] for i in sorted(order.tolist()))
    return dataset.replace(picked)


def _subsample_records(records: List[ImageRecord], task: TaskSpec, fraction: float, seed: int) -> List[ImageRecord]:
    if fraction == 1.0:
        return records
    ds = LabeledDataset(task=task, records=list(records))
    return subsample(ds, fraction, seed).records


def _to_chw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


def bin_scheme_for(task: TaskSpec, loss_cfg: LossConfig) -> Optional[L.BinScheme]:
    if task.kind is TaskKind.VALENCE_AROUSAL:
        return L.BinScheme(loss_cfg.n_bins, -1.0, 1.0)
    if task.kind is TaskKind.HEAD_POSE:
        return L.BinScheme(loss_cfg.pose_bins, -99.0, 99.0)
    return None


def _sl_head_specs(task: TaskSpec, cfg: RunConfig) -> List[HeadSpec]:
    if task.categorical:
        return [supervised_head(task.num_classes, dropout=cfg.dropout, label_smoothing=cfg.loss.label_smoothing)]
    scheme = bin_scheme_for(task, cfg.loss)
    return [cat_reg_head(axis, scheme.n_bins, dropout=cfg.dropout) for axis in task.continuous]


def _ssh_head_specs(pretext: PretextConfig) -> List[HeadSpec]:
    if pretext.kind == "puzzle":
        return [puzzle_heads(pretext.grid)]
    if pretext.kind == "rotation":
        return [rotation_head()]
    if pretext.kind == "puzzle_rotation":
        return [puzzle_heads(pretext.grid), rotation_head()]
    return [decoder_head()]


# ---------------------------------------------------------------------------
# Evaluation on untransformed inputs (the supervised path)
# ---------------------------------------------------------------------------


def evaluate_supervised(
    model: ModelAssembly,
    records: Sequence[ImageRecord],
    task: TaskSpec,
    loss_cfg: LossConfig = LossConfig(),
    batch_size: int = 256,
) -> M.MetricSet:
    """Metrics of the supervised head(s) on untransformed images."""
    model.eval()
    images = np.stack([r.image for r in records])
    preds_cls: List[np.ndarray] = []
    preds_reg: List[np.ndarray] = []
    scheme = bin_scheme_for(task, loss_cfg)
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            x = _to_chw(images[start : start + batch_size])
            out = model(x)
            if task.categorical:
                preds_cls.append(out["sl"].argmax(dim=-1).numpy())
            else:
                cols = [L.expectation_from_bins(out[axis], scheme).numpy() for axis in task.continuous]
                preds_reg.append(np.stack(cols, axis=1))
    if task.categorical:
        y_true = np.array([r.label for r in records], dtype=np.int64)
        return M.classification_metrics(y_true, np.concatenate(preds_cls), task.num_classes)
    y_true = np.array([[r.continuous[k] for k in task.continuous] for r in records])
    return M.regression_metrics(np.concatenate(preds_reg, axis=0), y_true, task.continuous)


def val_score(metrics: M.MetricSet, task: TaskSpec) -> float:
    """Scalar selection score: higher is better across all task families."""
    if metrics.accuracy is not None:
        return metrics.accuracy
    if metrics.average_mae is not None:
        return -metrics.average_mae
    if metrics.rmse_per_axis:
        return -float(np.mean(list(metrics.rmse_per_axis.values())))
    raise ValueError("metric set carries no score")


# ---------------------------------------------------------------------------
# The shared training engine
# ---------------------------------------------------------------------------


class _Engine:
    """One seed of one protocol: owns the model, batches, and bookkeeping."""

    def __init__(
        self,
        cfg: RunConfig,
        task: TaskSpec,
        train_records: List[ImageRecord],
        val_records: List[ImageRecord],
        seed: int,
        *,
        supervised: bool,
        ssh_active: bool,
        pretext_inputs: bool,
        model: Optional[ModelAssembly] = None,
        teacher: Optional[ModelAssembly] = None,
    ):
        self.cfg = cfg
        self.task = task
        self.seed = seed
        self.train_records = train_records
        self.val_records = val_records
        self.supervised = supervised
        self.ssh_active = ssh_active
        self.pretext_inputs = pretext_inputs and cfg.pretext is not None
        self.teacher = teacher
        self.counts = {"train_pretext": 0, "val_pretext": 0, "ssh_val_pretext": 0}
        self.scheme = bin_scheme_for(task, cfg.loss)
        self.auto_lambda_dec: Optional[float] = None
        self._last_sl_value: Optional[float] = None
        self._teacher_cache: Dict[str, torch.Tensor] = {}

        torch.manual_seed(int(np.random.SeedSequence([seed, 0xC0DE]).generate_state(1)[0]))
        if model is None:
            backbone = build_backbone(replace(cfg.backbone, seed=seed))
            specs: List[HeadSpec] = []
            if supervised:
                specs.extend(_sl_head_specs(task, cfg))
            if ssh_active and cfg.pretext is not None:
                specs.extend(_ssh_head_specs(cfg.pretext))
            model = assemble(backbone, specs, seed=seed)
        self.model = model

        if self.supervised and task.categorical and cfg.loss.class_weighting:
            counts = np.bincount([r.label for r in train_records], minlength=task.num_classes)
            self.class_weights: Optional[L.ClassWeights] = class_weights(counts)
        else:
            self.class_weights = None

        if teacher is not None:
            teacher.eval()
            for p in teacher.parameters():
                p.requires_grad_(False)

    # -- batch construction --------------------------------------------------

    def _pretext_rng(self, epoch: int, idx: int, tag: int) -> np.random.Generator:
        return _rng(self.seed, epoch, idx, tag)

    def _augmented(self, record: ImageRecord, epoch: int, idx: int) -> np.ndarray:
        pre = self.cfg.pretext
        return augment_image(
            record.image,
            self.cfg.augment,
            self._pretext_rng(epoch, idx, _TAG_AUGMENT),
            enable_rotation=not (self.pretext_inputs and pre is not None and pre.uses_rotation),
            enable_cutout=not (self.pretext_inputs and pre is not None and pre.uses_inpaint),
        )

    def _apply_pretext(self, image: np.ndarray, rng: np.random.Generator, counter: str) -> dict:
        """Transform one image per the configured pretext, returning input + labels."""
        pre = self.cfg.pretext
        out: dict = {"image": image}
        self.counts[counter] += 1
        if pre.kind in ("puzzle", "puzzle_rotation"):
            puzzle_rng = _IdentityRng() if pre.identity_stub else rng
            sample = make_puzzle(image, pre.grid, pre.weight_map(), puzzle_rng)
            out["image"] = sample.image
            out["puzzle_labels"] = sample.labels
            out["puzzle_weights"] = sample.head_weights
        if pre.kind in ("rotation", "puzzle_rotation"):
            if pre.identity_stub:
                out["rotation_label"] = 0
            else:
                sample = make_rotation(out["image"], rng)
                out["image"] = sample.image
                out["rotation_label"] = sample.label
        if pre.uses_inpaint:
            side = 0.0 if pre.identity_stub else pre.square_side
            sample = make_inpaint(image, pre.inpaint_region, side, rng)
            out["image"] = sample.image
            out["inpaint_mask"] = sample.mask
            out["inpaint_original"] = sample.original
        return out

    def _make_batch(self, indices: np.ndarray, epoch: int) -> dict:
        imgs: List[np.ndarray] = []
        batch: dict = {}
        collect: Dict[str, list] = {}
        for idx in indices:
            rec = self.train_records[int(idx)]
            img = self._augmented(rec, epoch, int(idx))
            if self.pretext_inputs:
                sample = self._apply_pretext(img, self._pretext_rng(epoch, int(idx), _TAG_PRETEXT), "train_pretext")
                img = sample["image"]
                if self.ssh_active:
                    # the no-SSH ablation transforms inputs but discards labels
                    for key in ("puzzle_labels", "puzzle_weights", "rotation_label", "inpaint_mask", "inpaint_original"):
                        if key in sample:
                            collect.setdefault(key, []).append(sample[key])
            imgs.append(img)
        batch["x"] = _to_chw(np.stack(imgs))
        if self.supervised:
            if self.task.categorical:
                batch["y"] = torch.tensor([self.train_records[int(i)].label for i in indices], dtype=torch.int64)
            else:
                batch["y_reg"] = {
                    axis: torch.tensor(
                        [self.train_records[int(i)].continuous[axis] for i in indices], dtype=torch.float64
                    )
                    for axis in self.task.continuous
                }
        if "puzzle_labels" in collect:
            batch["puzzle_labels"] = torch.from_numpy(np.stack(collect["puzzle_labels"]))
            batch["puzzle_weights"] = np.stack(collect["puzzle_weights"])
        if "rotation_label" in collect:
            batch["rotation_label"] = torch.tensor(collect["rotation_label"], dtype=torch.int64)
        if "inpaint_mask" in collect:
            batch["inpaint_mask"] = torch.from_numpy(np.stack(collect["inpaint_mask"])).float()
            batch["inpaint_original"] = _to_chw(np.stack(collect["inpaint_original"]))
        return batch

    # -- loss -----------------------------------------------------------------

    def _teacher_features(self, x: torch.Tensor, ids: List[str]) -> torch.Tensor:
        """Frozen-teacher features of original images, cached per sample id."""
        if not self.cfg.loss.cache_teacher:
            with torch.no_grad():
                return self.teacher.features(x)
        missing = [i for i, sid in enumerate(ids) if sid not in self._teacher_cache]
        if missing:
            with torch.no_grad():
                feats = self.teacher.features(x[missing])
            for row, i in enumerate(missing):
                self._teacher_cache[ids[i]] = feats[row]
        return torch.stack([self._teacher_cache[sid] for sid in ids])

    def _decoder_term(self, out: dict, batch: dict, ids: List[str]) -> Tuple[torch.Tensor, float]:
        """Weighted decoder loss and its unweighted value."""
        pre = self.cfg.pretext
        rec_img = out["decoder"]
        if pre.kind == "inpaint_pwl":
            mask = batch["inpaint_mask"].unsqueeze(1) if self.cfg.loss.rmse_on_mask_only else None
            raw = L.pixelwise_rmse(rec_img, batch["inpaint_original"], mask)
        else:
            rec_feats = self.teacher.features(rec_img)
            orig_feats = self._teacher_features(batch["inpaint_original"], ids)
            raw = L.perceptual_decoder_loss(rec_feats, orig_feats, 1.0)
        lam = self._lambda_dec(raw)
        return lam * raw, float(raw.detach())

    def _lambda_dec(self, raw: torch.Tensor) -> float:
        if self.cfg.loss.dec_mode == "fixed":
            return self.cfg.loss.lambda_dec
        if self.auto_lambda_dec is None:
            # Balance the decoder against the supervised term on the first
            # batch, then freeze the coefficient.
            sl = self._last_sl_value if self._last_sl_value is not None else 1.0
            dec = max(float(raw.detach()), 1e-8)
            self.auto_lambda_dec = sl / dec
        return self.auto_lambda_dec

    def _sl_term(self, out: dict, batch: dict) -> Tuple[torch.Tensor, Dict[str, float]]:
        cfg = self.cfg
        stats: Dict[str, float] = {}
        if self.task.categorical:
            raw = L.weighted_ce(out["sl"], batch["y"], self.class_weights, cfg.loss.label_smoothing)
            pred = out["sl"].detach().argmax(dim=-1)
            stats["accuracy"] = float((pred == batch["y"]).float().mean())
            return raw, stats
        total = None
        for axis in self.task.continuous:
            report = L.cat_reg_loss(out[axis], batch["y_reg"][axis], self.scheme, cfg.loss.alpha_cat)
            total = report.total if total is None else total + report.total
        return total, stats

    def _batch_loss(self, out: dict, batch: dict, ids: List[str]) -> Tuple[torch.Tensor, Dict[str, float]]:
        cfg = self.cfg
        terms: List[torch.Tensor] = []
        stats: Dict[str, float] = {}
        self._last_sl_value = None

        for key, head in (("puzzle_labels", "puzzle"), ("rotation_label", "rotation"), ("inpaint_original", "decoder")):
            if key in batch and head not in out:
                raise ValueError(f"batch carries {key} but the model has no {head} head")

        if self.supervised:
            sl_raw, sl_stats = self._sl_term(out, batch)
            self._last_sl_value = float(sl_raw.detach())
            stats.update({f"sl_{k}": v for k, v in sl_stats.items()})
            stats["sl_loss"] = self._last_sl_value
            terms.append(cfg.loss.lambda_sl * sl_raw)

        if self.ssh_active and "puzzle_labels" in batch:
            probs = out["puzzle"]
            labels = batch["puzzle_labels"]
            weights = batch["puzzle_weights"]
            use_focal = self._puzzle_uses_focal()
            correct = 0.0
            for j, p in enumerate(probs):
                y_j = labels[:, j]
                if use_focal:
                    term = cfg.loss.lambda_ssh * L.focal_loss(p, y_j, cfg.loss.focal_alpha, cfg.loss.focal_gamma)
                else:
                    # CE weighted by the region weight that travelled with the
                    # piece now at position j, averaged over the batch
                    w_j = torch.as_tensor(weights[:, j], dtype=p.dtype)
                    term = cfg.loss.lambda_ssh * (w_j * L.per_sample_ce(p, y_j)).mean()
                terms.append(term)
                correct += float((p.detach().argmax(dim=-1) == y_j).float().mean())
            stats["ssh_puzzle_accuracy"] = correct / len(probs)

        if self.ssh_active and "rotation_label" in batch:
            rot_raw = L.weighted_ce(out["rotation"], batch["rotation_label"])
            terms.append(cfg.loss.lambda_rotation * rot_raw)
            pred = out["rotation"].detach().argmax(dim=-1)
            stats["ssh_rotation_accuracy"] = float((pred == batch["rotation_label"]).float().mean())

        if self.ssh_active and "decoder" in out and "inpaint_original" in batch:
            dec_term, dec_raw = self._decoder_term(out, batch, ids)
            terms.append(dec_term)
            stats["ssh_decoder_rmse"] = dec_raw

        if not terms:
            raise ValueError("no loss terms active; check protocol and pretext configuration")
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        stats["loss"] = float(total.detach())
        return total, stats

    def _puzzle_uses_focal(self) -> bool:
        configured = self.cfg.loss.puzzle_loss
        if configured is not None:
            return configured == "focal"
        return self.cfg.protocol == "ssl_pretrain"

    # -- ssh diagnostics on transformed validation inputs ----------------------

    def _evaluate_ssh(self, epoch: int) -> Dict[str, float]:
        pre = self.cfg.pretext
        if pre is None or not self.ssh_active:
            return {}
        self.model.eval()
        stats: Dict[str, float] = {}
        images, puz_labels, rot_labels, originals, masks = [], [], [], [], []
        for idx, rec in enumerate(self.val_records):
            sample = self._apply_pretext(rec.image, self._pretext_rng(epoch, idx, _TAG_SSH_VAL), "ssh_val_pretext")
            images.append(sample["image"])
            if "puzzle_labels" in sample:
                puz_labels.append(sample["puzzle_labels"])
            if "rotation_label" in sample:
                rot_labels.append(sample["rotation_label"])
            if "inpaint_original" in sample:
                originals.append(sample["inpaint_original"])
                masks.append(sample["inpaint_mask"])
        with torch.no_grad():
            out = self.model(_to_chw(np.stack(images)))
            if puz_labels:
                labels = torch.from_numpy(np.stack(puz_labels))
                accs = [
                    float((p.argmax(dim=-1) == labels[:, j]).float().mean()) for j, p in enumerate(out["puzzle"])
                ]
                stats["ssh_puzzle_accuracy"] = float(np.mean(accs))
            if rot_labels:
                pred = out["rotation"].argmax(dim=-1)
                stats["ssh_rotation_accuracy"] = float((pred == torch.tensor(rot_labels)).float().mean())
            if originals:
                rec_img = out["decoder"]
                stats["ssh_decoder_rmse"] = float(L.pixelwise_rmse(rec_img, _to_chw(np.stack(originals))).detach())
        return stats

    # -- main loop -------------------------------------------------------------

    def run(self) -> SeedRun:
        cfg = self.cfg
        result = SeedRun(seed=self.seed)
        n = len(self.train_records)
        steps_per_epoch = math.ceil(n / cfg.batch_size)
        result.steps_per_epoch = steps_per_epoch
        result.steps_to_threshold = {t: None for t in cfg.thresholds}

        base_lr = cfg.optim.resolve_lr(cfg.protocol)
        optimizer = torch.optim.Adam(self.model.parameters(), lr=base_lr)
        best_score = float("-inf")
        best_state: Optional[dict] = None
        stale = 0

        for epoch in range(cfg.epochs):
            lr = step_decay_lr(epoch, base_lr, cfg.optim.schedule)
            for group in optimizer.param_groups:
                group["lr"] = lr

            self.model.train()
            order = _rng(self.seed, _TAG_SHUFFLE, epoch).permutation(n)
            running: Dict[str, float] = {}
            batches = 0
            for start in range(0, n, cfg.batch_size):
                indices = order[start : start + cfg.batch_size]
                batch = self._make_batch(indices, epoch)
                ids = [self.train_records[int(i)].sample_id for i in indices]
                out = self.model(batch["x"])
                loss, stats = self._batch_loss(out, batch, ids)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                batches += 1
                for k, v in stats.items():
                    running[k] = running.get(k, 0.0) + v
            train_stats = {k: v / batches for k, v in running.items()}

            val_stats: Dict[str, float] = {}
            if self.supervised:
                stripped = strip_ssh(self.model)
                metrics = evaluate_supervised(stripped, self.val_records, self.task, cfg.loss)
                val_stats.update(metrics.flat())
                val_stats["score"] = val_score(metrics, self.task)
                self.model.train()
            val_stats.update(self._evaluate_ssh(epoch))
            if not self.supervised:
                val_stats["score"] = self._ssh_score(val_stats)

            record = EpochRecord(epoch=epoch, lr=lr, train=train_stats, val=val_stats)
            result.history.append(record)
            self._append_csv(record)

            acc = val_stats.get("accuracy")
            if acc is not None:
                for threshold in cfg.thresholds:
                    if result.steps_to_threshold[threshold] is None and acc >= threshold:
                        result.steps_to_threshold[threshold] = (epoch + 1) * steps_per_epoch

            score = val_stats["score"]
            if score > best_score:
                best_score = score
                best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
                result.best_epoch = epoch
                result.best_val = dict(val_stats)
                stale = 0
            else:
                stale += 1
                if cfg.early_stop_patience is not None and stale > cfg.early_stop_patience:
                    break

        if cfg.epochs == 0:
            val_stats = {}
            if self.supervised:
                metrics = evaluate_supervised(strip_ssh(self.model), self.val_records, self.task, cfg.loss)
                val_stats.update(metrics.flat())
                val_stats["score"] = val_score(metrics, self.task)
            else:
                val_stats.update(self._evaluate_ssh(0))
                val_stats["score"] = self._ssh_score(val_stats)
            result.best_val = val_stats
            result.best_epoch = -1
        elif best_state is not None:
            self.model.load_state_dict(best_state)

        result.final_val = dict(result.best_val)
        result.transform_counts = dict(self.counts)
        if cfg.out_dir is not None:
            ckpt_dir = Path(cfg.out_dir) / f"seed_{self.seed}" / "checkpoint"
            save_checkpoint(
                self.model,
                ckpt_dir,
                epoch=result.best_epoch,
                seed=self.seed,
                metrics={k: v for k, v in result.final_val.items() if isinstance(v, float)},
            )
            result.checkpoint_dir = str(ckpt_dir)
        return result

    def _ssh_score(self, val_stats: Dict[str, float]) -> float:
        if "ssh_puzzle_accuracy" in val_stats or "ssh_rotation_accuracy" in val_stats:
            keys = [k for k in ("ssh_puzzle_accuracy", "ssh_rotation_accuracy") if k in val_stats]
            return float(np.mean([val_stats[k] for k in keys]))
        if "ssh_decoder_rmse" in val_stats:
            return -val_stats["ssh_decoder_rmse"]
        raise ValueError("no validation signal available")

    def _append_csv(self, record: EpochRecord) -> None:
        if self.cfg.out_dir is None:
            return
        rows = []
        for split, stats in (("train", record.train), ("val", record.val)):
            for key, value in stats.items():
                head, metric = _csv_head_metric(key)
                rows.append((record.epoch, split, head, metric, value))
        path = Path(self.cfg.out_dir) / f"seed_{self.seed}" / "metrics.csv"
        append_metrics_csv(path, rows)


def _csv_head_metric(key: str) -> Tuple[str, str]:
    """Map a flat history key to the (head, metric) columns of the metrics CSV."""
    if key == "loss":
        return "total", "loss"
    if key == "sl_loss":
        return "sl", "loss"
    if key.startswith("ssh_"):
        _, head, metric = key.split("_", 2)
        return head, metric
    if key.startswith("rmse_"):
        return key.split("_", 1)[1], "rmse"
    if key.startswith("mae_"):
        return key.split("_", 1)[1], "mae"
    return "sl", key


# ---------------------------------------------------------------------------
# Protocol entry points
# ---------------------------------------------------------------------------


def _prepare(cfg: RunConfig, dataset: LabeledDataset, val_dataset: Optional[LabeledDataset]):
    if val_dataset is None:
        train, val = split_train_val(dataset, cfg.val_fraction)
    else:
        train, val = list(dataset.records), list(val_dataset.records)
    if cfg.data_fraction < 1.0:
        train = _subsample_records(train, dataset.task, cfg.data_fraction, cfg.subset_seed)
    return train, val


def _run_seeds(
    cfg: RunConfig,
    dataset: LabeledDataset,
    val_dataset: Optional[LabeledDataset],
    *,
    supervised: bool,
    ssh_active: bool,
    pretext_inputs: bool,
    teacher: Optional[ModelAssembly] = None,
    model_factory=None,
) -> RunResult:
    train, val = _prepare(cfg, dataset, val_dataset)
    result = RunResult(protocol=cfg.protocol)
    for seed in cfg.seeds:
        model = model_factory(seed) if model_factory is not None else None
        engine = _Engine(
            cfg,
            dataset.task,
            train,
            val,
            seed,
            supervised=supervised,
            ssh_active=ssh_active,
            pretext_inputs=pretext_inputs,
            model=model,
            teacher=teacher,
        )
        result.seed_runs.append(engine.run())
    return result


def train_sl(cfg: RunConfig, dataset: LabeledDataset, val_dataset: Optional[LabeledDataset] = None) -> RunResult:
    """Supervised baseline: weighted CE (or categorical-regression) training."""
    if cfg.protocol != "sl":
        cfg = replace(cfg, protocol="sl")
    return _run_seeds(cfg, dataset, val_dataset, supervised=True, ssh_active=False, pretext_inputs=False)


def pretrain_ssl(
    cfg: RunConfig,
    dataset: LabeledDataset,
    val_dataset: Optional[LabeledDataset] = None,
    model: Optional[ModelAssembly] = None,
) -> RunResult:
    """Pretext-only training of backbone plus self-supervised heads.

    Puzzle heads use the focal loss in this protocol. A supervised head on an
    injected model is rejected.
    """
    if cfg.protocol != "ssl_pretrain":
        cfg = replace(cfg, protocol="ssl_pretrain")
    if cfg.out_dir is None:
        raise ValueError("pre-training requires out_dir so the checkpoint can be handed off")
    if model is not None and model.supervised_names:
        raise ValueError(f"pre-training rejects models with supervised heads: {model.supervised_names}")
    factory = (lambda seed: model) if model is not None else None
    return _run_seeds(
        cfg, dataset, val_dataset, supervised=False, ssh_active=True, pretext_inputs=True, model_factory=factory
    )


def frozen_eval(
    checkpoint,
    dataset: LabeledDataset,
    head: str = "nonlinear",
    cfg: Optional[RunConfig] = None,
    val_dataset: Optional[LabeledDataset] = None,
) -> RunResult:
    """Train a classifier on frozen pooled features of a checkpointed backbone.

    ``head`` selects a linear probe or a one-hidden-layer (512) nonlinear one.
    The backbone receives zero gradient updates; its parameters are asserted
    bit-identical before and after.
    """
    if head not in ("nonlinear", "linear"):
        raise ValueError(f"head must be 'nonlinear' or 'linear', got {head!r}")
    if not dataset.task.categorical:
        raise ValueError("frozen evaluation expects a categorical task")
    cfg = cfg or RunConfig(protocol="frozen_eval", epochs=30, seeds=(0,))
    if cfg.protocol != "frozen_eval":
        cfg = replace(cfg, protocol="frozen_eval")

    source, _ = load_checkpoint(checkpoint)
    backbone = source.backbone
    state_before = {k: v.detach().clone() for k, v in backbone.state_dict().items()}
    backbone.eval()

    train, val = _prepare(cfg, dataset, val_dataset)
    with torch.no_grad():
        feats_train = torch.cat(
            [backbone(_to_chw(np.stack([r.image for r in train[s : s + 256]])))[0] for s in range(0, len(train), 256)]
        )
        feats_val = torch.cat(
            [backbone(_to_chw(np.stack([r.image for r in val[s : s + 256]])))[0] for s in range(0, len(val), 256)]
        )
    y_train = torch.tensor([r.label for r in train], dtype=torch.int64)
    y_val = np.array([r.label for r in val], dtype=np.int64)

    k = dataset.task.num_classes
    result = RunResult(protocol="frozen_eval")
    for seed in cfg.seeds:
        torch.manual_seed(int(np.random.SeedSequence([seed, 0xF07E]).generate_state(1)[0]))
        d = feats_train.shape[1]
        if head == "nonlinear":
            probe = torch.nn.Sequential(torch.nn.Linear(d, 512), torch.nn.ReLU(), torch.nn.Linear(512, k))
        else:
            probe = torch.nn.Linear(d, k)
        optimizer = torch.optim.Adam(probe.parameters(), lr=cfg.optim.resolve_lr("frozen_eval"))
        run = SeedRun(seed=seed)
        run.steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
        best = float("-inf")
        for epoch in range(cfg.epochs):
            probe.train()
            order = _rng(seed, _TAG_SHUFFLE, epoch).permutation(len(train))
            for start in range(0, len(train), cfg.batch_size):
                idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
                logits = probe(feats_train[idx])
                loss = torch.nn.functional.cross_entropy(logits, y_train[idx])
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            probe.eval()
            with torch.no_grad():
                pred = probe(feats_val).argmax(dim=-1).numpy()
            metrics = M.classification_metrics(y_val, pred, k)
            stats = metrics.flat()
            stats["score"] = metrics.accuracy
            run.history.append(EpochRecord(epoch=epoch, lr=optimizer.param_groups[0]["lr"], val=stats))
            if stats["score"] > best:
                best = stats["score"]
                run.best_epoch = epoch
                run.best_val = dict(stats)
        run.final_val = dict(run.best_val)
        result.seed_runs.append(run)

    state_after = backbone.state_dict()
    for key, tensor in state_before.items():
        if not torch.equal(tensor, state_after[key]):
            raise AssertionError(f"frozen backbone parameter {key} changed during evaluation")
    return result


def fine_tune(
    checkpoint,
    cfg: RunConfig,
    dataset: LabeledDataset,
    val_dataset: Optional[LabeledDataset] = None,
) -> RunResult:
    """Fine-tune all layers of a checkpointed backbone on the supervised task.

    Self-supervised heads in the checkpoint are dropped; a fresh supervised
    head is attached when the checkpoint has none. With zero epochs this is
    exactly an evaluation of the checkpoint's supervised head.
    """
    if cfg.protocol != "fine_tune":
        cfg = replace(cfg, protocol="fine_tune")

    def factory(seed: int) -> ModelAssembly:
        source, _ = load_checkpoint(checkpoint)
        sl_specs = [s for s in source.head_specs if s.kind in (HeadKind.SUPERVISED_CLASSIFIER, HeadKind.CAT_REG, HeadKind.REGRESSION)]
        if sl_specs:
            model = assemble(source.backbone, sl_specs, seed=seed)
            model.sl_heads.load_state_dict(source.sl_heads.state_dict())
        else:
            model = assemble(source.backbone, _sl_head_specs(dataset.task, cfg), seed=seed)
        for p in model.parameters():
            p.requires_grad_(True)
        return model

    return _run_seeds(
        cfg, dataset, val_dataset, supervised=True, ssh_active=False, pretext_inputs=False, model_factory=factory
    )


def train_hmtl(cfg: RunConfig, dataset: LabeledDataset, val_dataset: Optional[LabeledDataset] = None) -> RunResult:
    """Co-train the supervised head with the configured self-supervised heads."""
    if cfg.protocol != "hmtl":
        cfg = replace(cfg, protocol="hmtl")
    return _run_seeds(cfg, dataset, val_dataset, supervised=True, ssh_active=True, pretext_inputs=True)


def pretext_without_ssh(cfg: RunConfig, dataset: LabeledDataset, val_dataset: Optional[LabeledDataset] = None) -> RunResult:
    """Ablation: pretext-transformed inputs, supervised loss only."""
    if cfg.protocol != "pretext_without_ssh":
        cfg = replace(cfg, protocol="pretext_without_ssh")
    return _run_seeds(cfg, dataset, val_dataset, supervised=True, ssh_active=False, pretext_inputs=True)


def train_inpaint_pl_two_stage(
    cfg: RunConfig,
    dataset: LabeledDataset,
    val_dataset: Optional[LabeledDataset] = None,
    teacher_checkpoint=None,
) -> RunResult:
    """Two-stage perceptual-loss in-painting.

    Stage 1 trains a supervised teacher under the same augmentation without
    any cutout; stage 2 trains a fresh student whose decoder matches the
    frozen teacher's features of the reconstruction to those of the original.
    A pre-existing teacher checkpoint skips stage 1.
    """
    if cfg.protocol != "hmtl_inpaint_pl_two_stage":
        cfg = replace(cfg, protocol="hmtl_inpaint_pl_two_stage")

    if teacher_checkpoint is None:
        if cfg.out_dir is None:
            raise ValueError("two-stage training without a teacher checkpoint requires out_dir")
        stage1_cfg = replace(
            cfg,
            protocol="sl",
            pretext=None,
            seeds=(cfg.seeds[0],),
            epochs=cfg.stage1_epochs if cfg.stage1_epochs is not None else cfg.epochs,
            out_dir=str(Path(cfg.out_dir) / "teacher"),
        )
        stage1 = train_sl(stage1_cfg, dataset, val_dataset)
        teacher_checkpoint = stage1.best_checkpoint
    teacher, _ = load_checkpoint(teacher_checkpoint)

    return _run_seeds(
        cfg, dataset, val_dataset, supervised=True, ssh_active=True, pretext_inputs=True, teacher=teacher
    )


def run_protocol(cfg: RunConfig, dataset: LabeledDataset, val_dataset: Optional[LabeledDataset] = None, checkpoint=None) -> RunResult:
    """Dispatch a RunConfig to its protocol implementation."""
    if cfg.protocol == "sl":
        return train_sl(cfg, dataset, val_dataset)
    if cfg.protocol == "ssl_pretrain":
        return pretrain_ssl(cfg, dataset, val_dataset)
    if cfg.protocol == "hmtl":
        return train_hmtl(cfg, dataset, val_dataset)
    if cfg.protocol == "pretext_without_ssh":
        return pretext_without_ssh(cfg, dataset, val_dataset)
    if cfg.protocol == "hmtl_inpaint_pl_two_stage":
        return train_inpaint_pl_two_stage(cfg, dataset, val_dataset, teacher_checkpoint=checkpoint)
    if cfg.protocol == "frozen_eval":
        if checkpoint is None:
            raise ValueError("frozen_eval requires a checkpoint")
        return frozen_eval(checkpoint, dataset, cfg=cfg, val_dataset=val_dataset)
    if cfg.protocol == "fine_tune":
        if checkpoint is None:
            raise ValueError("fine_tune requires a checkpoint")
        return fine_tune(checkpoint, cfg, dataset, val_dataset)
    raise ValueError(f"unknown protocol {cfg.protocol!r}")
