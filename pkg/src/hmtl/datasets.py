"""Dataset abstraction: folder ingestion, class statistics, label binning and
a seeded synthetic face generator that makes every training protocol runnable
at desk scale.

Folder contract (the public ingestion surface):
  * classification / gender: one subfolder per class, lossless images inside;
    folder names sorted lexicographically define the class indices.
  * valence-arousal / head-pose: ``labels.csv`` (UTF-8, comma separated,
    header ``id,valence,arousal`` or ``id,yaw,pitch,roll``) next to an
    ``images/`` folder holding ``<id>.png``.

Loaders normalize pixels to float32 in [0, 1]. There is deliberately no
download command for licensed datasets; callers point the loader at their
own copies.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .losses import BinScheme, ClassWeights

logger = logging.getLogger(__name__)

POSE_ANGLE_LIMIT = 99.0  # degrees; records beyond this are dropped at load time

# Sorted so that generator class indices match what load_folder infers from
# lexicographically ordered class subfolders.
EXPRESSION_NAMES = ("anger", "contempt", "disgust", "fear", "happy", "neutral", "sad", "surprise")
GENDER_NAMES = ("female", "male")

# Generative attribute ranges for the synthetic faces. Class bits select one
# of two disjoint sub-ranges per attribute, so a rule reading the parameters
# recovers the class exactly, while the pixel differences stay subtle enough
# that generalizing from few samples is genuinely hard. Eyes and mouth
# corners are drawn as compact quadrant-local elements, so pretext transforms
# that slice or rotate the image keep every cue readable piece by piece.
MOUTH_CURVE_DOWN = (-0.6, -0.2)
MOUTH_CURVE_UP = (0.2, 0.6)
EYE_NARROW = (0.30, 0.48)
EYE_WIDE = (0.62, 0.85)
MOUTH_THIN = (0.045, 0.07)
MOUTH_THICK = (0.10, 0.13)
ASPECT_NARROW = (0.62, 0.70)
ASPECT_WIDE = (0.74, 0.82)
SYNTH_POSE_RANGE = 60.0
# mild orientation jitter for tasks that do not predict pose
NUISANCE_ROLL = 6.0
NUISANCE_YAW_PITCH = 8.0


class TaskKind(str, Enum):
    CLASSIFICATION = "classification"
    VALENCE_AROUSAL = "valence_arousal"
    HEAD_POSE = "head_pose"
    GENDER = "gender"


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    num_classes: int = 0
    continuous: Tuple[str, ...] = ()

    @property
    def categorical(self) -> bool:
        return self.num_classes > 0 and not self.continuous


def classification_task(num_classes: int = 8) -> TaskSpec:
    return TaskSpec(TaskKind.CLASSIFICATION, num_classes=num_classes)


def valence_arousal_task() -> TaskSpec:
    return TaskSpec(TaskKind.VALENCE_AROUSAL, continuous=("valence", "arousal"))


def head_pose_task() -> TaskSpec:
    return TaskSpec(TaskKind.HEAD_POSE, continuous=("yaw", "pitch", "roll"))


def gender_task() -> TaskSpec:
    return TaskSpec(TaskKind.GENDER, num_classes=2)


def task_from_name(name: str, num_classes: int = 8) -> TaskSpec:
    kind = TaskKind(name)
    if kind is TaskKind.CLASSIFICATION:
        return classification_task(num_classes)
    if kind is TaskKind.VALENCE_AROUSAL:
        return valence_arousal_task()
    if kind is TaskKind.HEAD_POSE:
        return head_pose_task()
    return gender_task()


@dataclass
class ImageRecord:
    """One sample: image tensor, labels, and generator metadata when synthetic."""

    image: np.ndarray
    sample_id: str
    label: Optional[int] = None
    continuous: Optional[Dict[str, float]] = None
    params: Optional[Dict[str, float]] = None

    def __post_init__(self):
        if self.label is None and not self.continuous:
            raise ValueError(f"record {self.sample_id} carries no label")


@dataclass
class LabeledDataset:
    task: TaskSpec
    records: List[ImageRecord]
    class_names: Tuple[str, ...] = ()
    skipped: int = 0
    filtered: int = 0

    def __post_init__(self):
        if not self.records:
            raise ValueError("dataset is empty")
        self.validate()

    def validate(self) -> None:
        for rec in self.records:
            if self.task.categorical:
                if rec.label is None or not 0 <= rec.label < self.task.num_classes:
                    raise ValueError(f"record {rec.sample_id}: label {rec.label} out of range")
            for key in self.task.continuous:
                if rec.continuous is None or key not in rec.continuous:
                    raise ValueError(f"record {rec.sample_id}: missing continuous label {key}")
                val = rec.continuous[key]
                if self.task.kind is TaskKind.VALENCE_AROUSAL and not -1.0 <= val <= 1.0:
                    raise ValueError(f"record {rec.sample_id}: {key}={val} outside [-1, 1]")
                if self.task.kind is TaskKind.HEAD_POSE and abs(val) > POSE_ANGLE_LIMIT:
                    raise ValueError(f"record {rec.sample_id}: {key}={val} outside +-{POSE_ANGLE_LIMIT}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def class_counts(self) -> np.ndarray:
        counts = np.zeros(self.task.num_classes, dtype=np.int64)
        for rec in self.records:
            if rec.label is not None:
                counts[rec.label] += 1
        return counts

    def images(self) -> np.ndarray:
        return np.stack([rec.image for rec in self.records])

    def labels(self) -> np.ndarray:
        return np.array([rec.label for rec in self.records], dtype=np.int64)

    def continuous_matrix(self, keys: Optional[Sequence[str]] = None) -> np.ndarray:
        keys = tuple(keys or self.task.continuous)
        return np.array([[rec.continuous[k] for k in keys] for rec in self.records], dtype=np.float64)

    def replace(self, records: List[ImageRecord]) -> "LabeledDataset":
        return LabeledDataset(
            task=self.task,
            records=records,
            class_names=self.class_names,
            skipped=self.skipped,
            filtered=self.filtered,
        )


def class_weights(counts: Sequence[int]) -> ClassWeights:
    """Inverse-frequency class weights w_c = N / (K * n_c).

    Rarer classes get larger weights; the count-weighted average weight is
    exactly 1, so the expected per-sample weight over the dataset is 1.
    Scaling all counts by a common factor leaves the weights unchanged.
    """
    n = np.asarray(counts, dtype=np.int64)
    if n.ndim != 1 or n.size == 0:
        raise ValueError("counts must be a non-empty vector")
    if np.any(n <= 0):
        raise ValueError(f"every class needs at least one sample, got counts {n.tolist()}")
    total = int(n.sum())
    w = total / (n.size * n.astype(np.float64))
    return ClassWeights(w)


def bin_label(value: float, scheme: BinScheme) -> int:
    """Half-open bin index of a bounded value; the top endpoint maps to the last bin."""
    return scheme.bin_index(value)


# ---------------------------------------------------------------------------
# Folder IO
# ---------------------------------------------------------------------------

_IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg")


def _read_image(path: Path) -> Optional[np.ndarray]:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        return arr
    except Exception as exc:  # noqa: BLE001 - any unreadable file is skipped
        logger.warning("skipping unreadable image %s: %s", path, exc)
        return None


def _write_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_folder(root, task: TaskSpec) -> LabeledDataset:
    """Load a dataset from the documented folder layout for ``task``.

    For categorical tasks a ``num_classes`` of 0 means the class count is
    inferred from the subfolders.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"dataset root {root} is not a directory")
    if task.kind in (TaskKind.CLASSIFICATION, TaskKind.GENDER):
        return _load_class_folders(root, task)
    return _load_manifest_folder(root, task)


def _load_class_folders(root: Path, task: TaskSpec) -> LabeledDataset:
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"no class subfolders under {root}")
    names = tuple(p.name for p in class_dirs)
    if task.num_classes and len(names) != task.num_classes:
        raise ValueError(f"expected {task.num_classes} class folders, found {len(names)}: {names}")
    records: List[ImageRecord] = []
    skipped = 0
    for idx, cdir in enumerate(class_dirs):
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() not in _IMAGE_SUFFIXES:
                continue
            img = _read_image(f)
            if img is None:
                skipped += 1
                continue
            records.append(ImageRecord(image=img, sample_id=f"{cdir.name}/{f.stem}", label=idx))
    if not records:
        raise ValueError(f"no readable images under {root}")
    task = TaskSpec(task.kind, num_classes=len(names))
    return LabeledDataset(task=task, records=records, class_names=names, skipped=skipped)


def _load_manifest_folder(root: Path, task: TaskSpec) -> LabeledDataset:
    manifest = root / "labels.csv"
    if not manifest.exists():
        raise ValueError(f"regression task requires a labels manifest at {manifest}")
    expected = ("id",) + task.continuous
    records: List[ImageRecord] = []
    skipped = 0
    filtered = 0
    with manifest.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != expected:
            raise ValueError(f"manifest header {reader.fieldnames} does not match {list(expected)}")
        for row in reader:
            try:
                values = {k: float(row[k]) for k in task.continuous}
            except (TypeError, ValueError) as exc:
                raise ValueError(f"bad manifest row {row}: {exc}") from exc
            if task.kind is TaskKind.HEAD_POSE and any(abs(v) > POSE_ANGLE_LIMIT for v in values.values()):
                filtered += 1
                continue
            img_path = root / "images" / f"{row['id']}.png"
            img = _read_image(img_path) if img_path.exists() else None
            if img is None:
                logger.warning("missing or unreadable image for id %s", row["id"])
                skipped += 1
                continue
            records.append(ImageRecord(image=img, sample_id=row["id"], continuous=values))
    if not records:
        raise ValueError(f"no usable records in {root}")
    return LabeledDataset(task=task, records=records, skipped=skipped, filtered=filtered)


def write_folder(dataset: LabeledDataset, root) -> Path:
    """Write a dataset in the layout :func:`load_folder` reads back."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if dataset.task.categorical:
        names = dataset.class_names or tuple(f"class{i}" for i in range(dataset.task.num_classes))
        for name in names:
            (root / name).mkdir(exist_ok=True)
        for rec in dataset.records:
            stem = rec.sample_id.split("/")[-1]
            _write_image(root / names[rec.label] / f"{stem}.png", rec.image)
    else:
        (root / "images").mkdir(exist_ok=True)
        with (root / "labels.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("id",) + dataset.task.continuous)
            for rec in dataset.records:
                writer.writerow([rec.sample_id] + [repr(rec.continuous[k]) for k in dataset.task.continuous])
                _write_image(root / "images" / f"{rec.sample_id}.png", rec.image)
    return root


# ---------------------------------------------------------------------------
# Synthetic face generator
# ---------------------------------------------------------------------------


def _apportion(n: int, proportions: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment of n items to the given proportions."""
    p = np.asarray(proportions, dtype=np.float64)
    if np.any(p < 0) or p.sum() <= 0:
        raise ValueError(f"invalid proportions {proportions}")
    p = p / p.sum()
    raw = p * n
    counts = np.floor(raw).astype(np.int64)
    remainder = n - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    for i in range(remainder):
        counts[order[i]] += 1
    return counts.tolist()


def _smooth_mask(q: np.ndarray, softness: float = 6.0) -> np.ndarray:
    """Soft inside-indicator of q <= 1 with a narrow anti-aliased edge."""
    return np.clip((1.0 - q) * softness, 0.0, 1.0)


def _render_face(side: int, p: Dict[str, float], rng: np.random.Generator) -> np.ndarray:
    """Draw one face from its generative parameters onto an RGB canvas.

    Eyes sit in the upper quadrants and the two mouth-corner bands in the
    lower ones; eye openness, corner tilt and band thickness carry the class
    signal within each element.
    """
    coords = (np.arange(side, dtype=np.float64) - (side - 1) / 2.0) / (side / 2.0)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    roll = math.radians(p["roll"])
    xr = math.cos(roll) * xx + math.sin(roll) * yy
    yr = -math.sin(roll) * xx + math.cos(roll) * yy

    yaw = math.radians(p["yaw"])
    pitch = math.radians(p["pitch"])
    dx = 0.35 * math.sin(yaw)
    dy = 0.30 * math.sin(pitch)
    wf = 0.6 + 0.4 * math.cos(yaw)
    hf = 0.6 + 0.4 * math.cos(pitch)
    rx = p["aspect"] * p["head_ry"] * wf
    ry = p["head_ry"] * hf
    cx0, cy0 = p["center_x"], p["center_y"]

    img = np.empty((side, side, 3), dtype=np.float64)
    img[:] = p["bg_shade"]

    def paint(mask: np.ndarray, color: Tuple[float, float, float]) -> None:
        for ch in range(3):
            img[:, :, ch] = img[:, :, ch] * (1.0 - mask) + color[ch] * mask

    head_q = ((xr - cx0) / rx) ** 2 + ((yr - cy0) / ry) ** 2
    shade = p["skin_shade"]
    paint(_smooth_mask(head_q), (0.85 * shade, 0.65 * shade, 0.50 * shade))

    if p["hair"] >= 0.5:
        hair = _smooth_mask(head_q) * (yr < cy0 - 0.55 * ry)
        paint(hair, (0.16, 0.10, 0.06))

    eye_r = p["eye_r"]
    for sign in (-1.0, 1.0):
        ex = cx0 + sign * p["eye_off_x"] * wf + dx
        ey = cy0 - p["eye_off_y"] * hf + dy
        q = ((xr - ex) / eye_r) ** 2 + ((yr - ey) / (eye_r * p["eye_open"])) ** 2
        paint(_smooth_mask(q), (0.05, 0.05, 0.12))

    # mouth corners: short thick bands whose tilt encodes the curvature sign
    tilt = 0.5 * p["mouth_curve"]
    half_len = p["mouth_len"] / 2.0
    for sign in (-1.0, 1.0):
        mx0 = cx0 + sign * p["mouth_off_x"] * wf + dx
        my0 = cy0 + p["mouth_off_y"] * hf + dy
        phi = -sign * tilt  # corners rise outward for positive curvature
        cos_p, sin_p = math.cos(phi), math.sin(phi)
        u = (xr - mx0) * cos_p + (yr - my0) * sin_p
        v = -(xr - mx0) * sin_p + (yr - my0) * cos_p
        band = (np.abs(u) <= half_len) & (np.abs(v) <= p["mouth_thick"])
        paint(band.astype(np.float64), (0.45, 0.10, 0.12))

    img += rng.normal(0.0, 0.02, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # Quantize to 8-bit levels so lossless PNG round trips are exact.
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def _sample_range(rng: np.random.Generator, lo_hi: Tuple[float, float]) -> float:
    return float(rng.uniform(*lo_hi))


def synth_faces(
    n: int,
    seed: int,
    task: TaskSpec,
    side: int = 64,
    proportions: Optional[Sequence[float]] = None,
) -> LabeledDataset:
    """Generate ``n`` procedurally rendered face-like images.

    The generative parameters define the labels: mouth curvature, eye openness
    and mouth thickness select one of 8 expression classes and a continuous
    (valence, arousal) pair; head rotation angles give pose labels; the head
    aspect ratio gives the gender label (head hair is an uninformative
    distractor). ``proportions`` skews the per-class counts for categorical
    tasks; the split is exact largest-remainder apportionment.
    """
    if n <= 0:
        raise ValueError("n must be > 0")
    if task.kind is TaskKind.CLASSIFICATION and not 1 <= task.num_classes <= len(EXPRESSION_NAMES):
        raise ValueError(f"synthetic classification supports 1..{len(EXPRESSION_NAMES)} classes")
    rng = np.random.default_rng([int(seed), 0xFACE])
    records: List[ImageRecord] = []

    if task.categorical:
        k = task.num_classes
        counts = _apportion(n, proportions if proportions is not None else [1.0] * k)
        labels = np.repeat(np.arange(k), counts)
    else:
        labels = np.full(n, -1)

    for i, forced in enumerate(labels):
        p: Dict[str, float] = {
            "center_x": float(rng.uniform(-0.04, 0.04)),
            "center_y": float(rng.uniform(-0.04, 0.04)),
            "head_ry": float(rng.uniform(0.55, 0.72)),
            "skin_shade": float(rng.uniform(0.70, 1.00)),
            "bg_shade": float(rng.uniform(0.05, 0.20)),
            "eye_r": float(rng.uniform(0.09, 0.13)),
            "eye_off_x": float(rng.uniform(0.20, 0.27)),
            "eye_off_y": float(rng.uniform(0.20, 0.27)),
            "mouth_off_x": float(rng.uniform(0.20, 0.27)),
            "mouth_off_y": float(rng.uniform(0.20, 0.27)),
            "mouth_len": float(rng.uniform(0.16, 0.24)),
            "hair": float(rng.random() < 0.5),
            "yaw": 0.0,
            "pitch": 0.0,
            "roll": 0.0,
        }
        if task.kind is not TaskKind.HEAD_POSE:
            p["yaw"] = float(rng.uniform(-NUISANCE_YAW_PITCH, NUISANCE_YAW_PITCH))
            p["pitch"] = float(rng.uniform(-NUISANCE_YAW_PITCH, NUISANCE_YAW_PITCH))
            p["roll"] = float(rng.uniform(-NUISANCE_ROLL, NUISANCE_ROLL))

        if task.kind in (TaskKind.CLASSIFICATION, TaskKind.GENDER) and task.categorical:
            label = int(forced)
        else:
            label = None

        if task.kind is TaskKind.CLASSIFICATION:
            bits = (label & 1, (label >> 1) & 1, (label >> 2) & 1)
            p["mouth_curve"] = _sample_range(rng, MOUTH_CURVE_UP if bits[0] else MOUTH_CURVE_DOWN)
            p["eye_open"] = _sample_range(rng, EYE_WIDE if bits[1] else EYE_NARROW)
            p["mouth_thick"] = _sample_range(rng, MOUTH_THICK if bits[2] else MOUTH_THIN)
            p["aspect"] = float(rng.uniform(ASPECT_NARROW[0], ASPECT_WIDE[1]))
        elif task.kind is TaskKind.GENDER:
            p["aspect"] = _sample_range(rng, ASPECT_WIDE if label else ASPECT_NARROW)
            p["mouth_curve"] = float(rng.uniform(-0.85, 0.85))
            p["eye_open"] = float(rng.uniform(0.25, 0.95))
            p["mouth_thick"] = float(rng.uniform(0.04, 0.16))
        else:
            p["mouth_curve"] = float(rng.uniform(-0.85, 0.85))
            p["eye_open"] = float(rng.uniform(0.25, 0.95))
            p["mouth_thick"] = float(rng.uniform(0.04, 0.16))
            p["aspect"] = float(rng.uniform(ASPECT_NARROW[0], ASPECT_WIDE[1]))

        continuous: Optional[Dict[str, float]] = None
        if task.kind is TaskKind.VALENCE_AROUSAL:
            continuous = {
                "valence": p["mouth_curve"],
                "arousal": 2.0 * p["eye_open"] - 1.0,
            }
        elif task.kind is TaskKind.HEAD_POSE:
            p["yaw"] = float(rng.uniform(-SYNTH_POSE_RANGE, SYNTH_POSE_RANGE))
            p["pitch"] = float(rng.uniform(-SYNTH_POSE_RANGE, SYNTH_POSE_RANGE))
            p["roll"] = float(rng.uniform(-SYNTH_POSE_RANGE, SYNTH_POSE_RANGE))
            continuous = {"yaw": p["yaw"], "pitch": p["pitch"], "roll": p["roll"]}

        image = _render_face(side, p, rng)
        records.append(
            ImageRecord(
                image=image,
                sample_id=f"synth{i:06d}",
                label=label,
                continuous=continuous,
                params=dict(p),
            )
        )

    names: Tuple[str, ...] = ()
    if task.kind is TaskKind.CLASSIFICATION:
        names = EXPRESSION_NAMES[: task.num_classes]
    elif task.kind is TaskKind.GENDER:
        names = GENDER_NAMES
    return LabeledDataset(task=task, records=records, class_names=names)
