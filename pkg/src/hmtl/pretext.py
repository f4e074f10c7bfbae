"""Seeded pretext-input construction: puzzling, rotation, in-painting cutout,
and the three augmentation levels.

Images are H x W x 3 float arrays with values in [0, 1]. Every transform is a
pure function of (inputs, rng): the same seeded generator produces bit-identical
outputs, and no call mutates shared state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

ROTATION_STEPS = 8  # 45-degree increments, labels 0..7

# Defaults for the in-painting cutout region (fractions of the image side)
# and the region-weight map used for 4x4 puzzling.
DEFAULT_INPAINT_REGION_TOP = 0.20
DEFAULT_INPAINT_REGION_LEFT = 0.15
DEFAULT_INPAINT_REGION_BOTTOM = 0.85
DEFAULT_INPAINT_REGION_RIGHT = 0.85
DEFAULT_INPAINT_SQUARE_SIDE = 0.40

CORNER_WEIGHT = 0.5
EDGE_WEIGHT = 0.75
INTERIOR_WEIGHT = 1.0

# Strong-level cutout is 60x60 on a 224-pixel side; other resolutions keep
# the same area fraction.
CUTOUT_REFERENCE_SIDE = 60
CUTOUT_REFERENCE_RESOLUTION = 224


def _as_image(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {arr.shape}")
    return arr


def _require_square(image: np.ndarray) -> int:
    h, w = image.shape[:2]
    if h != w:
        raise ValueError(f"transform requires a square image, got {h}x{w}")
    return h


# ---------------------------------------------------------------------------
# Puzzling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PuzzleSample:
    """A puzzled image with per-position labels and head weights.

    ``labels[j]`` is the original slot index of the piece now sitting at
    output position j (row-major slots).  Placing piece j back into slot
    ``labels[j]`` reconstructs the input exactly; see :func:`unscramble`.
    ``permutation`` stores the same position -> source-slot mapping.
    """

    image: np.ndarray
    labels: np.ndarray
    permutation: np.ndarray
    head_weights: np.ndarray


def _split_pieces(image: np.ndarray, grid: int) -> np.ndarray:
    """Slice a square image into grid**2 row-major pieces, shape (g*g, t, t, 3)."""
    side = image.shape[0]
    t = side // grid
    pieces = image.reshape(grid, t, grid, t, 3).transpose(0, 2, 1, 3, 4)
    return pieces.reshape(grid * grid, t, t, 3)


def _merge_pieces(pieces: np.ndarray, grid: int) -> np.ndarray:
    t = pieces.shape[1]
    out = pieces.reshape(grid, grid, t, t, 3).transpose(0, 2, 1, 3, 4)
    return out.reshape(grid * t, grid * t, 3)


def default_region_weights(grid: int) -> np.ndarray:
    """Corner/edge/interior weight map for an NxN grid.

    Corner slots weigh 0.5, non-corner border slots 0.75, interior slots 1.0.
    """
    w = np.full((grid, grid), INTERIOR_WEIGHT, dtype=np.float64)
    if grid >= 2:
        w[0, :] = EDGE_WEIGHT
        w[-1, :] = EDGE_WEIGHT
        w[:, 0] = EDGE_WEIGHT
        w[:, -1] = EDGE_WEIGHT
        for r in (0, grid - 1):
            for c in (0, grid - 1):
                w[r, c] = CORNER_WEIGHT
    return w.reshape(-1)


def make_puzzle(
    image,
    grid: int,
    weight_map: Optional[Sequence[float]] = None,
    rng: Optional[np.random.Generator] = None,
) -> PuzzleSample:
    """Slice a square image into grid**2 pieces, shuffle them uniformly and merge.

    Args:
        image: square HxWx3 array, side divisible by ``grid``.
        grid: pieces per axis (>= 2).
        weight_map: per-slot positive weights (length grid**2); defaults to ones.
            Each weight travels with its piece: ``head_weights[j]`` equals
            ``weight_map[labels[j]]``.
        rng: seeded generator; only its ``permutation`` method is used.

    Returns:
        PuzzleSample with the merged image, labels, permutation and head weights.
    """
    img = _as_image(image)
    side = _require_square(img)
    if grid < 2:
        raise ValueError(f"grid must be >= 2, got {grid}")
    if side % grid != 0:
        raise ValueError(f"image side {side} is not divisible by grid {grid}")
    n = grid * grid
    if weight_map is None:
        weights = np.ones(n, dtype=np.float64)
    else:
        weights = np.asarray(weight_map, dtype=np.float64).reshape(-1)
        if weights.shape[0] != n:
            raise ValueError(f"weight_map must have {n} entries, got {weights.shape[0]}")
        if np.any(weights <= 0):
            raise ValueError("weight_map entries must all be > 0")
    if rng is None:
        rng = np.random.default_rng()

    perm = np.asarray(rng.permutation(n), dtype=np.int64)
    pieces = _split_pieces(img, grid)
    puzzled = _merge_pieces(pieces[perm], grid)
    return PuzzleSample(
        image=puzzled,
        labels=perm.copy(),
        permutation=perm,
        head_weights=weights[perm],
    )


def unscramble(puzzled, labels) -> np.ndarray:
    """Invert a puzzle: place the piece at position j back into slot labels[j]."""
    img = _as_image(puzzled)
    side = _require_square(img)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    grid = int(round(math.sqrt(lab.shape[0])))
    if grid * grid != lab.shape[0]:
        raise ValueError(f"labels length {lab.shape[0]} is not a perfect square")
    if side % grid != 0:
        raise ValueError(f"image side {side} is not divisible by grid {grid}")
    pieces = _split_pieces(img, grid)
    return _merge_pieces(pieces[np.argsort(lab)], grid)


# ---------------------------------------------------------------------------
# Rotation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RotationSample:
    """An image rotated by label * 45 degrees counter-clockwise."""

    image: np.ndarray
    label: int


def rotate_image(image, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image center.

    Multiples of 90 degrees are exact index remaps; anything else is sampled
    bilinearly with zero fill outside the source.
    """
    img = _as_image(image)
    deg = float(degrees) % 360.0
    quarter = deg / 90.0
    if abs(quarter - round(quarter)) < 1e-12:
        return np.ascontiguousarray(np.rot90(img, k=int(round(quarter)) % 4))

    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(deg)
    sin_t, cos_t = math.sin(theta), math.cos(theta)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # Inverse map: output pixel (r, c) samples the source at a -degrees turn.
    src_r = cy + sin_t * (cc - cx) + cos_t * (rr - cy)
    src_c = cx + cos_t * (cc - cx) - sin_t * (rr - cy)

    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = (src_r - r0)[..., None]
    fc = (src_c - c0)[..., None]

    def sample(ri, ci):
        inside = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = img[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)].astype(np.float64)
        vals[~inside] = 0.0
        return vals

    out = (
        sample(r0, c0) * (1 - fr) * (1 - fc)
        + sample(r0, c0 + 1) * (1 - fr) * fc
        + sample(r0 + 1, c0) * fr * (1 - fc)
        + sample(r0 + 1, c0 + 1) * fr * fc
    )
    return out.astype(np.float32)


def rotate_by_label(image, label: int) -> np.ndarray:
    """Rotate by ``label * 45`` degrees CCW, label in [0, 8)."""
    if not 0 <= int(label) < ROTATION_STEPS:
        raise ValueError(f"rotation label must be in [0, {ROTATION_STEPS}), got {label}")
    return rotate_image(image, 45.0 * int(label))


def make_rotation(image, rng: Optional[np.random.Generator] = None) -> RotationSample:
    """Rotate a square image by a uniformly drawn multiple of 45 degrees CCW."""
    img = _as_image(image)
    _require_square(img)
    if rng is None:
        rng = np.random.default_rng()
    label = int(rng.integers(0, ROTATION_STEPS))
    return RotationSample(image=rotate_by_label(img, label), label=label)


# ---------------------------------------------------------------------------
# In-painting cutout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle in coordinates relative to the image side."""

    top: float = DEFAULT_INPAINT_REGION_TOP
    left: float = DEFAULT_INPAINT_REGION_LEFT
    bottom: float = DEFAULT_INPAINT_REGION_BOTTOM
    right: float = DEFAULT_INPAINT_REGION_RIGHT

    def __post_init__(self):
        if not (0.0 <= self.top < self.bottom <= 1.0 and 0.0 <= self.left < self.right <= 1.0):
            raise ValueError(f"invalid region bounds {self}")


@dataclass(frozen=True)
class InpaintSample:
    """An image with a square zeroed out, the binary mask, and the original."""

    image: np.ndarray
    mask: np.ndarray
    original: np.ndarray


def make_inpaint(
    image,
    region: Region = Region(),
    square_side: float = DEFAULT_INPAINT_SQUARE_SIDE,
    rng: Optional[np.random.Generator] = None,
) -> InpaintSample:
    """Zero out a square placed uniformly at random inside ``region``.

    ``square_side`` is a fraction of the image side; a value of 0 produces an
    all-zero mask and leaves the image untouched.
    """
    img = _as_image(image)
    side = _require_square(img)
    if rng is None:
        rng = np.random.default_rng()
    sq = int(round(float(square_side) * side))
    mask = np.zeros((side, side), dtype=np.uint8)
    if sq == 0:
        return InpaintSample(image=img.copy(), mask=mask, original=img)

    r0 = int(round(region.top * side))
    r1 = int(round(region.bottom * side))
    c0 = int(round(region.left * side))
    c1 = int(round(region.right * side))
    if sq > r1 - r0 or sq > c1 - c0:
        raise ValueError(
            f"cut square of {sq}px does not fit inside region rows [{r0},{r1}) cols [{c0},{c1})"
        )
    top = int(rng.integers(r0, r1 - sq + 1))
    left = int(rng.integers(c0, c1 - sq + 1))
    mask[top : top + sq, left : left + sq] = 1
    cut = img.copy()
    cut[top : top + sq, left : left + sq, :] = 0.0
    return InpaintSample(image=cut, mask=mask, original=img)


# ---------------------------------------------------------------------------
# Augmentation levels
# ---------------------------------------------------------------------------


class AugmentLevel(str, Enum):
    NO = "no"
    WEAK = "weak"
    STRONG = "strong"


# Magnitude ranges per level. "No" keeps only the horizontal flip.
ZOOM_SCALE_RANGE = (0.69, 1.0)
CONTRAST_RANGE = (0.6, 1.4)
WEAK_ROTATION_DEGREES = 15.0
STRONG_ROTATION_DEGREES = 20.0
BRIGHTNESS_DELTA = 0.05
BLUR_KERNELS = (1, 3, 5)
NOISE_VARIANCE = 0.05


def _resize_bilinear(image: np.ndarray, out_side: int) -> np.ndarray:
    h = image.shape[0]
    if h == out_side:
        return image.astype(np.float32)
    scale = h / out_side
    coords = (np.arange(out_side, dtype=np.float64) + 0.5) * scale - 0.5
    i0 = np.floor(coords).astype(np.int64)
    frac = coords - i0
    i0 = np.clip(i0, 0, h - 1)
    i1 = np.clip(i0 + 1, 0, h - 1)
    rows = image[i0] * (1 - frac)[:, None, None] + image[i1] * frac[:, None, None]
    cols = rows[:, i0] * (1 - frac)[None, :, None] + rows[:, i1] * frac[None, :, None]
    return cols.astype(np.float32)


def _central_zoom(image: np.ndarray, scale: float) -> np.ndarray:
    side = image.shape[0]
    crop = max(1, int(round(scale * side)))
    if crop >= side:
        return image
    off = (side - crop) // 2
    return _resize_bilinear(image[off : off + crop, off : off + crop], side)


def cutout_side_for(resolution: int) -> int:
    """Strong-augment cutout side in pixels, scaled from the 60/224 reference."""
    return int(round(CUTOUT_REFERENCE_SIDE / CUTOUT_REFERENCE_RESOLUTION * resolution))


def augment(
    image,
    level: AugmentLevel,
    rng: Optional[np.random.Generator] = None,
    *,
    enable_rotation: bool = True,
    enable_cutout: bool = True,
) -> np.ndarray:
    """Apply one level's augmentation stack with randomly sampled magnitudes.

    Transform order: flip, central zoom, rotation, contrast, brightness,
    channel swap, blur, additive noise, cutout; the output is clamped to [0, 1].
    ``enable_rotation`` / ``enable_cutout`` let a caller drop those two
    transforms when a pretext task owns the corresponding perturbation.
    """
    img = _as_image(image)
    level = AugmentLevel(level)
    if rng is None:
        rng = np.random.default_rng()

    if rng.random() < 0.5:
        img = img[:, ::-1, :].copy()
    if level is AugmentLevel.NO:
        return np.clip(img, 0.0, 1.0)

    _require_square(img)
    img = _central_zoom(img, float(rng.uniform(*ZOOM_SCALE_RANGE)))

    if enable_rotation:
        max_deg = WEAK_ROTATION_DEGREES if level is AugmentLevel.WEAK else STRONG_ROTATION_DEGREES
        img = rotate_image(img, float(rng.uniform(-max_deg, max_deg)))

    contrast = float(rng.uniform(*CONTRAST_RANGE))
    mean = float(img.mean())
    img = mean + (img - mean) * contrast

    if level is AugmentLevel.STRONG:
        img = img + float(rng.uniform(-BRIGHTNESS_DELTA, BRIGHTNESS_DELTA))
        img = img[:, :, rng.permutation(3)]
        kernel = int(rng.choice(BLUR_KERNELS))
        if kernel > 1:
            img = ndimage.uniform_filter(img, size=(kernel, kernel, 1), mode="nearest")
        img = img + rng.normal(0.0, math.sqrt(NOISE_VARIANCE), size=img.shape)
        if enable_cutout:
            side = img.shape[0]
            sq = cutout_side_for(side)
            if sq > 0:
                top = int(rng.integers(0, side - sq + 1))
                left = int(rng.integers(0, side - sq + 1))
                img[top : top + sq, left : left + sq, :] = 0.0

    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Golden fixtures: raw little-endian float32 image + sidecar text header
# ---------------------------------------------------------------------------


def write_fixture(path, image, seed: int, transform: str) -> None:
    """Write ``<path>.f32`` (raw little-endian float32 HxWx3) and ``<path>.hdr``."""
    img = _as_image(image)
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    img.astype("<f4").tofile(base.with_suffix(".f32"))
    header = (
        f"height={img.shape[0]}\n"
        f"width={img.shape[1]}\n"
        f"seed={int(seed)}\n"
        f"transform={transform}\n"
    )
    base.with_suffix(".hdr").write_text(header, encoding="utf-8")


def read_fixture(path):
    """Read a fixture pair written by :func:`write_fixture`.

    Returns (image, header dict with height/width/seed/transform).
    """
    base = Path(path)
    header: dict[str, str] = {}
    for line in base.with_suffix(".hdr").read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            header[key.strip()] = value.strip()
    h, w = int(header["height"]), int(header["width"])
    data = np.fromfile(base.with_suffix(".f32"), dtype="<f4")
    if data.size != h * w * 3:
        raise ValueError(f"fixture payload has {data.size} floats, expected {h * w * 3}")
    meta = {"height": h, "width": w, "seed": int(header["seed"]), "transform": header["transform"]}
    return data.reshape(h, w, 3), meta
