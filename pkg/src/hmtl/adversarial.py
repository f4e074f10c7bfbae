"""Single-step sign-gradient adversarial examples and epsilon-sweep evaluation.

The attack perturbs each pixel by epsilon times the sign of the input gradient
of the supervised-head loss, then clamps back to [0, 1]. Attacks run against
the stripped supervised model, matching inference-time deployment; sign(0) is
0, so zero-gradient pixels stay untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
import torch

from .datasets import ImageRecord, LabeledDataset
from .heads import ModelAssembly, strip_ssh
from .losses import LOG_FLOOR

DEFAULT_EPSILONS = (0.0, 0.001, 0.005, 0.01, 0.02, 0.05)


@dataclass(frozen=True)
class AttackConfig:
    """Epsilon grid for a robustness sweep; values ascending, >= 0."""

    epsilons: Tuple[float, ...] = DEFAULT_EPSILONS
    batch_size: int = 128

    def __post_init__(self):
        if not self.epsilons:
            raise ValueError("epsilon list must not be empty")
        eps = list(self.epsilons)
        if any(e < 0 for e in eps) or eps != sorted(eps):
            raise ValueError(f"epsilons must be ascending and >= 0, got {eps}")


def _sl_probs(model: ModelAssembly, x: torch.Tensor) -> torch.Tensor:
    out = model(x)
    if "sl" not in out:
        raise ValueError("attack target model must expose a supervised classifier head")
    return out["sl"]


def fgsm(image, true_label: int, model: ModelAssembly, epsilon: float) -> np.ndarray:
    """Adversarial image: input plus epsilon times the loss-gradient sign.

    ``image`` is HxWx3 in [0, 1]; the result is clamped back to [0, 1].
    Epsilon 0 returns the input bit-exactly.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    img = np.asarray(image, dtype=np.float32)
    if epsilon == 0.0:
        return img.copy()
    adv = _fgsm_batch(
        strip_ssh(model),
        torch.from_numpy(img[None].transpose(0, 3, 1, 2).copy()),
        torch.tensor([int(true_label)]),
        epsilon,
    )
    return adv[0].permute(1, 2, 0).numpy()


def _fgsm_batch(model: ModelAssembly, x: torch.Tensor, y: torch.Tensor, epsilon: float) -> torch.Tensor:
    model.eval()
    x = x.clone().requires_grad_(True)
    probs = _sl_probs(model, x)
    picked = probs.gather(1, y.view(-1, 1)).squeeze(1)
    loss = -torch.log(torch.clamp(picked, min=LOG_FLOOR)).mean()
    (grad,) = torch.autograd.grad(loss, x)
    with torch.no_grad():
        adv = torch.clamp(x + epsilon * torch.sign(grad), 0.0, 1.0)
    return adv.detach()


@dataclass
class SweepRow:
    epsilon: float
    n: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.n


def epsilon_sweep(
    model: ModelAssembly,
    dataset_or_records,
    config: AttackConfig = AttackConfig(),
) -> List[SweepRow]:
    """Supervised-head accuracy under attack, one row per epsilon.

    The epsilon-0 row is evaluated on the untouched inputs, so it equals the
    clean accuracy exactly.
    """
    records: Sequence[ImageRecord]
    if isinstance(dataset_or_records, LabeledDataset):
        records = dataset_or_records.records
    else:
        records = list(dataset_or_records)
    if not records:
        raise ValueError("no records to attack")
    images = np.stack([r.image for r in records]).transpose(0, 3, 1, 2)
    labels = np.array([r.label for r in records], dtype=np.int64)

    target = strip_ssh(model)
    target.eval()
    rows: List[SweepRow] = []
    for eps in config.epsilons:
        correct = 0
        for start in range(0, len(records), config.batch_size):
            x = torch.from_numpy(images[start : start + config.batch_size].copy()).float()
            y = torch.from_numpy(labels[start : start + config.batch_size])
            if eps > 0:
                x = _fgsm_batch(target, x, y, eps)
            with torch.no_grad():
                pred = _sl_probs(target, x).argmax(dim=-1)
            correct += int((pred == y).sum())
        rows.append(SweepRow(epsilon=eps, n=len(records), correct=correct))
    return rows
