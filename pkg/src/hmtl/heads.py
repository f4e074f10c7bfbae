"""Backbone contract and declarative assembly of supervised, self-supervised
and decoder heads on a shared feature extractor.

The desk-scale backbone is a small stride-2 conv stack; the assembly layer is
backbone-agnostic so an externally trained feature extractor with the same
forward contract can be plugged in. Checkpoints are directories holding a
JSON manifest plus named parameter blobs, and are the hand-off artifact
between the two stages of perceptual-loss in-painting.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

CHECKPOINT_FORMAT_VERSION = 1
DECODER_FILTER_LADDER = (256, 128, 64, 32, 16)
JOINT_BRANCH_WIDTH = 512


@dataclass(frozen=True)
class BackboneConfig:
    """Desk-scale conv backbone: ``num_blocks`` stride-2 blocks ending in a
    pooled feature vector of length ``feature_dim``."""

    resolution: int = 64
    feature_dim: int = 128
    num_blocks: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.resolution % (2**self.num_blocks) != 0:
            raise ValueError(
                f"resolution {self.resolution} is not a power-of-two multiple of the "
                f"final feature map (needs divisibility by {2 ** self.num_blocks})"
            )
        if self.feature_dim % (2 ** (self.num_blocks - 1)) != 0:
            raise ValueError(
                f"feature_dim {self.feature_dim} must be divisible by {2 ** (self.num_blocks - 1)}"
            )

    @property
    def final_map_size(self) -> int:
        return self.resolution // (2**self.num_blocks)

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(self.feature_dim // 2 ** (self.num_blocks - 1 - i) for i in range(self.num_blocks))


class ConvBackbone(nn.Module):
    """Stack of conv(3x3, stride 2) + GroupNorm + ReLU blocks with global
    average pooling.

    GroupNorm keeps train and eval behavior identical (no running statistics),
    which matters for small desk-scale batch streams. ``forward`` returns the
    pooled feature vector and the named intermediate maps (``block1`` ..
    ``blockN``) used for decoder skip connections.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        blocks = []
        in_c = 3
        for out_c in config.channels:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_c, out_c, kernel_size=3, stride=2, padding=1, bias=False),
                    nn.GroupNorm(min(8, out_c), out_c),
                    nn.ReLU(inplace=True),
                )
            )
            in_c = out_c
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def forward(self, x: torch.Tensor):
        maps: Dict[str, torch.Tensor] = {}
        out = x
        for i, block in enumerate(self.blocks, start=1):
            out = block(out)
            maps[f"block{i}"] = out
        pooled = self.pool(out).flatten(1)
        return pooled, maps


def build_backbone(config: BackboneConfig) -> ConvBackbone:
    """Construct the desk backbone with parameters seeded by ``config.seed``."""
    torch.manual_seed(config.seed)
    return ConvBackbone(config)


class HeadKind(str, Enum):
    SUPERVISED_CLASSIFIER = "supervised_classifier"
    PUZZLE = "puzzle"
    ROTATION = "rotation"
    CAT_REG = "cat_reg"
    REGRESSION = "regression"
    DECODER = "decoder"


SUPERVISED_KINDS = (HeadKind.SUPERVISED_CLASSIFIER, HeadKind.CAT_REG, HeadKind.REGRESSION)


@dataclass(frozen=True)
class HeadSpec:
    """Declarative description of one head (or one group of puzzle heads)."""

    kind: HeadKind
    name: str = ""
    num_classes: int = 0
    grid: int = 0
    hidden: Optional[int] = None
    dropout: float = 0.0
    label_smoothing: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @staticmethod
    def from_dict(d: dict) -> "HeadSpec":
        d = dict(d)
        d["kind"] = HeadKind(d["kind"])
        return HeadSpec(**d)


def supervised_head(num_classes: int, dropout: float = 0.2, label_smoothing: float = 0.1) -> HeadSpec:
    return HeadSpec(
        kind=HeadKind.SUPERVISED_CLASSIFIER,
        name="sl",
        num_classes=num_classes,
        dropout=dropout,
        label_smoothing=label_smoothing,
    )


def puzzle_heads(grid: int, hidden: Optional[int] = None) -> HeadSpec:
    """One spec standing for ``grid**2`` position classifiers of ``grid**2`` classes."""
    if grid < 2:
        raise ValueError("puzzle grid must be >= 2")
    return HeadSpec(kind=HeadKind.PUZZLE, name="puzzle", num_classes=grid * grid, grid=grid, hidden=hidden)


def rotation_head(hidden: Optional[int] = None) -> HeadSpec:
    return HeadSpec(kind=HeadKind.ROTATION, name="rotation", num_classes=8, hidden=hidden)


def cat_reg_head(name: str, n_bins: int, dropout: float = 0.2) -> HeadSpec:
    return HeadSpec(kind=HeadKind.CAT_REG, name=name, num_classes=n_bins, dropout=dropout)


def regression_head(name: str, dropout: float = 0.2) -> HeadSpec:
    return HeadSpec(kind=HeadKind.REGRESSION, name=name, num_classes=1, dropout=dropout)


def decoder_head() -> HeadSpec:
    return HeadSpec(kind=HeadKind.DECODER, name="decoder")


class _ClassifierHead(nn.Module):
    """Linear (optionally one hidden layer) classifier emitting softmax probs."""

    def __init__(self, in_dim: int, num_classes: int, hidden: Optional[int] = None, dropout: float = 0.0):
        super().__init__()
        self.drop = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        if hidden:
            self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, num_classes))
        else:
            self.net = nn.Linear(in_dim, num_classes)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.net(self.drop(pooled)), dim=-1)


class _RegressionHead(nn.Module):
    def __init__(self, in_dim: int, dropout: float = 0.0):
        super().__init__()
        self.drop = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        self.net = nn.Linear(in_dim, 1)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.net(self.drop(pooled)).squeeze(-1)


class _Branch(nn.Module):
    """Shared hidden layer feeding a group of linear classifiers."""

    def __init__(self, in_dim: int, width: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, width), nn.ReLU(inplace=True))

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.net(pooled)


class Decoder(nn.Module):
    """Deconvolutional decoder with concatenative skip connections.

    Each block doubles the spatial resolution (transposed conv) and fuses the
    backbone map of matching resolution when one exists; a final 1x1 conv plus
    sigmoid maps to a 3-channel image in [0, 1] at the input resolution.
    """

    def __init__(self, backbone_cfg: BackboneConfig):
        super().__init__()
        n = backbone_cfg.num_blocks
        if n > len(DECODER_FILTER_LADDER):
            raise ValueError(f"decoder supports at most {len(DECODER_FILTER_LADDER)} blocks")
        self.filters = DECODER_FILTER_LADDER[-n:]
        channels = backbone_cfg.channels
        # Block i upsamples from backbone depth n-i to n-i-1 and concatenates
        # the backbone map at that resolution ("block{n-i-1}"); the last block
        # reaches input resolution, where no skip map exists.
        self.skip_sources: List[Optional[str]] = [
            f"block{n - i - 1}" if n - i - 1 >= 1 else None for i in range(n)
        ]
        ups = []
        fuses = []
        in_c = channels[-1]
        for i, f in enumerate(self.filters):
            ups.append(nn.ConvTranspose2d(in_c, f, kernel_size=4, stride=2, padding=1))
            skip = self.skip_sources[i]
            skip_c = channels[n - i - 2] if skip else 0
            fuses.append(
                nn.Sequential(
                    nn.Conv2d(f + skip_c, f, kernel_size=3, padding=1),
                    nn.ReLU(inplace=True),
                )
            )
            in_c = f
        self.ups = nn.ModuleList(ups)
        self.fuses = nn.ModuleList(fuses)
        self.out_conv = nn.Conv2d(self.filters[-1], 3, kernel_size=1)

    def forward(self, maps: Dict[str, torch.Tensor]) -> torch.Tensor:
        x = maps[f"block{len(self.ups)}"]
        for up, fuse, skip in zip(self.ups, self.fuses, self.skip_sources):
            x = up(x)
            if skip is not None:
                x = torch.cat([x, maps[skip]], dim=1)
            x = fuse(x)
        return torch.sigmoid(self.out_conv(x))


class ModelAssembly(nn.Module):
    """Shared backbone with independent supervised and self-supervised heads.

    ``forward`` returns a dict keyed by head name: classifier heads emit
    softmax probabilities, puzzle heads a list of them (one per position),
    the decoder an NCHW image in [0, 1].
    """

    def __init__(self, backbone: ConvBackbone, head_specs: Sequence[HeadSpec]):
        super().__init__()
        specs = list(head_specs)
        classifiers = [s for s in specs if s.kind is HeadKind.SUPERVISED_CLASSIFIER]
        if len(classifiers) > 1:
            raise ValueError("at most one supervised classifier head is allowed")
        if classifiers and any(s.kind in (HeadKind.CAT_REG, HeadKind.REGRESSION) for s in specs):
            raise ValueError("a supervised classifier cannot be combined with cat-reg/regression heads")
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate head names in {names}")

        self.backbone = backbone
        self.head_specs = specs
        d = backbone.feature_dim

        self.sl_heads = nn.ModuleDict()
        self.ssh_heads = nn.ModuleDict()
        self.branches = nn.ModuleDict()

        puzzle_spec = next((s for s in specs if s.kind is HeadKind.PUZZLE), None)
        rotation_spec = next((s for s in specs if s.kind is HeadKind.ROTATION), None)
        joint = puzzle_spec is not None and rotation_spec is not None

        for spec in specs:
            if spec.kind is HeadKind.SUPERVISED_CLASSIFIER:
                self.sl_heads[spec.name] = _ClassifierHead(d, spec.num_classes, spec.hidden, spec.dropout)
            elif spec.kind is HeadKind.CAT_REG:
                self.sl_heads[spec.name] = _ClassifierHead(d, spec.num_classes, spec.hidden, spec.dropout)
            elif spec.kind is HeadKind.REGRESSION:
                self.sl_heads[spec.name] = _RegressionHead(d, spec.dropout)
            elif spec.kind is HeadKind.PUZZLE:
                width = spec.hidden or (JOINT_BRANCH_WIDTH if joint else None)
                head_in = d
                if width:
                    self.branches["puzzle"] = _Branch(d, width)
                    head_in = width
                self.ssh_heads["puzzle"] = nn.ModuleList(
                    [nn.Linear(head_in, spec.num_classes) for _ in range(spec.num_classes)]
                )
            elif spec.kind is HeadKind.ROTATION:
                width = spec.hidden or (JOINT_BRANCH_WIDTH if joint else None)
                head_in = d
                if width:
                    self.branches["rotation"] = _Branch(d, width)
                    head_in = width
                self.ssh_heads["rotation"] = nn.Linear(head_in, spec.num_classes)
            elif spec.kind is HeadKind.DECODER:
                self.ssh_heads["decoder"] = Decoder(backbone.config)
            else:  # pragma: no cover - exhaustive enum
                raise ValueError(f"unknown head kind {spec.kind}")

    @property
    def supervised_names(self) -> List[str]:
        return list(self.sl_heads.keys())

    @property
    def ssh_names(self) -> List[str]:
        return list(self.ssh_heads.keys())

    @property
    def has_ssh(self) -> bool:
        return len(self.ssh_heads) > 0

    def forward(self, x: torch.Tensor) -> Dict[str, object]:
        pooled, maps = self.backbone(x)
        out: Dict[str, object] = {}
        for name, head in self.sl_heads.items():
            out[name] = head(pooled)
        for name, head in self.ssh_heads.items():
            if name == "puzzle":
                feats = self.branches["puzzle"](pooled) if "puzzle" in self.branches else pooled
                out[name] = [torch.softmax(h(feats), dim=-1) for h in head]
            elif name == "rotation":
                feats = self.branches["rotation"](pooled) if "rotation" in self.branches else pooled
                out[name] = torch.softmax(head(feats), dim=-1)
            elif name == "decoder":
                out[name] = head(maps)
        return out

    def features(self, x: torch.Tensor) -> torch.Tensor:
        pooled, _ = self.backbone(x)
        return pooled


def assemble(backbone: ConvBackbone, head_specs: Sequence[HeadSpec], seed: int = 0) -> ModelAssembly:
    """Build an assembly with head parameters seeded by ``seed``."""
    torch.manual_seed(seed)
    return ModelAssembly(backbone, head_specs)


def strip_ssh(model: ModelAssembly) -> ModelAssembly:
    """Return a view with only the supervised head(s); parameters are shared.

    Supervised-head outputs are bit-identical before and after stripping; on a
    model without self-supervised heads this is an identity view.
    """
    sl_specs = [s for s in model.head_specs if s.kind in SUPERVISED_KINDS]
    stripped = ModelAssembly.__new__(ModelAssembly)
    nn.Module.__init__(stripped)
    stripped.backbone = model.backbone
    stripped.head_specs = sl_specs
    stripped.sl_heads = model.sl_heads
    stripped.ssh_heads = nn.ModuleDict()
    stripped.branches = nn.ModuleDict()
    stripped.train(model.training)
    return stripped


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    model: ModelAssembly,
    directory,
    *,
    epoch: int = 0,
    seed: int = 0,
    metrics: Optional[dict] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> Path:
    """Write a checkpoint directory: manifest.json + named parameter blobs."""
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)

    components = {"backbone": model.backbone.state_dict()}
    if len(model.sl_heads):
        components["supervised"] = model.sl_heads.state_dict()
    if len(model.ssh_heads):
        components["auxiliary"] = model.ssh_heads.state_dict()
    if len(model.branches):
        components["branches"] = model.branches.state_dict()
    if optimizer is not None:
        components["optimizer"] = optimizer.state_dict()

    for name, state in components.items():
        torch.save(state, path / f"{name}.pt")

    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone": asdict(model.backbone.config),
        "heads": [s.to_dict() for s in model.head_specs],
        "epoch": int(epoch),
        "seed": int(seed),
        "metrics": {k: float(v) for k, v in (metrics or {}).items()},
        "components": sorted(components.keys()),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def load_checkpoint(directory) -> Tuple[ModelAssembly, dict]:
    """Rebuild a ModelAssembly from a checkpoint directory.

    Returns the model (in eval mode) and the manifest dict.
    """
    path = Path(directory)
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_file}")
    manifest = json.loads(manifest_file.read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")

    backbone = build_backbone(BackboneConfig(**manifest["backbone"]))
    specs = [HeadSpec.from_dict(d) for d in manifest["heads"]]
    model = assemble(backbone, specs, seed=manifest.get("seed", 0))

    model.backbone.load_state_dict(torch.load(path / "backbone.pt", weights_only=True))
    if "supervised" in manifest["components"]:
        model.sl_heads.load_state_dict(torch.load(path / "supervised.pt", weights_only=True))
    if "auxiliary" in manifest["components"]:
        model.ssh_heads.load_state_dict(torch.load(path / "auxiliary.pt", weights_only=True))
    if "branches" in manifest["components"]:
        model.branches.load_state_dict(torch.load(path / "branches.pt", weights_only=True))
    model.eval()
    return model, manifest
