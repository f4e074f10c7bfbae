"""Loss functions for co-training a supervised head with self-supervised heads.

All losses are pure, differentiable scalar-valued functions built on torch
tensors, so analytic gradients are available through autograd. Probability
inputs are expected on the simplex (softmax already applied); logs are floored
at ``LOG_FLOOR`` for numerical safety.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch

LOG_FLOOR = 1e-12
# Callers must pass distributions summing to 1 within 1e-6; the validator
# allows 1e-4 so finite-difference probing (step 1e-5) stays in bounds.
SIMPLEX_ATOL = 1e-4

TensorLike = Union[torch.Tensor, np.ndarray, Sequence[float], float]


def _tensor(x: TensorLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_simplex(probs: torch.Tensor) -> None:
    total = probs.sum(dim=-1)
    if not torch.all((total - 1.0).abs() < SIMPLEX_ATOL):
        raise ValueError("probabilities must sum to 1 along the last dimension")


def _log_probs(probs: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(probs, min=LOG_FLOOR))


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights; all entries strictly positive.

    The inverse-frequency construction (see ``datasets.class_weights``) makes
    the count-weighted average weight equal to 1, so the expected per-sample
    weight over the originating dataset is 1.
    """

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if vals.size == 0 or np.any(vals <= 0):
            raise ValueError("class weights must be a non-empty vector of positive reals")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class HeadLossWeights:
    """Scaling coefficients for the per-head loss terms.

    ``ssh`` is either one scalar (broadcast to every puzzle head) or one entry
    per head; entries may also be per-sample weight vectors when region
    weights travel with puzzle pieces. Weights must be >= 0; zero switches a
    head's contribution off.
    """

    sl: float = 1.0
    ssh: Union[float, Sequence] = 1.0
    rotation: float = 1.0
    decoder: float = 1.0

    def __post_init__(self):
        for name in ("sl", "rotation", "decoder"):
            if float(getattr(self, name)) < 0:
                raise ValueError(f"{name} weight must be >= 0")
        if np.isscalar(self.ssh):
            if float(self.ssh) < 0:
                raise ValueError("ssh weight must be >= 0")

    def ssh_weights(self, n_heads: int) -> list:
        if np.isscalar(self.ssh):
            return [float(self.ssh)] * n_heads
        seq = list(self.ssh)
        if len(seq) != n_heads:
            raise ValueError(f"got {len(seq)} ssh weights for {n_heads} heads")
        return seq


@dataclass(frozen=True)
class BinScheme:
    """Uniform binning of a bounded range, used for categorical-regression heads."""

    n_bins: int = 20
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if self.n_bins < 1 or not self.lo < self.hi:
            raise ValueError(f"invalid bin scheme {self}")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n_bins

    @property
    def centers(self) -> np.ndarray:
        k = np.arange(self.n_bins, dtype=np.float64)
        return self.lo + (k + 0.5) * self.width

    def bin_index(self, value):
        """Half-open binning; the top endpoint maps to the last bin."""
        vals = np.asarray(value, dtype=np.float64)
        if np.any(vals < self.lo) or np.any(vals > self.hi):
            raise ValueError(f"value outside [{self.lo}, {self.hi}]")
        idx = np.floor((vals - self.lo) / self.width).astype(np.int64)
        idx = np.minimum(idx, self.n_bins - 1)
        return idx if vals.ndim else int(idx)


@dataclass
class LossReport:
    """Weighted per-term contributions and their sum for one batch.

    ``terms`` holds each head's weighted contribution; ``total`` is exactly
    their sum. ``raw`` keeps the unweighted values for monitoring.
    """

    total: torch.Tensor
    terms: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.total.detach())


def _per_sample_ce(
    probs: torch.Tensor,
    labels: torch.Tensor,
    class_weights: Optional[ClassWeights],
    smoothing: float,
) -> torch.Tensor:
    """Per-sample weighted cross entropy with optional label smoothing."""
    if probs.ndim == 1:
        probs = probs.unsqueeze(0)
        labels = labels.reshape(1)
    _check_simplex(probs)
    k = probs.shape[-1]
    if torch.any(labels < 0) or torch.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes")
    logp = _log_probs(probs)
    picked = logp.gather(1, labels.view(-1, 1)).squeeze(1)
    if smoothing > 0:
        loss = -((1.0 - smoothing) * picked + smoothing / k * logp.sum(dim=1))
    else:
        loss = -picked
    if class_weights is not None:
        if len(class_weights) != k:
            raise ValueError(f"got {len(class_weights)} class weights for {k} classes")
        w = torch.as_tensor(class_weights.values, dtype=probs.dtype, device=probs.device)
        loss = loss * w[labels]
    return loss


def per_sample_ce(probs: TensorLike, label) -> torch.Tensor:
    """Unweighted cross entropy per sample, shape (B,)."""
    return _per_sample_ce(_tensor(probs), torch.as_tensor(np.asarray(label, dtype=np.int64)), None, 0.0)


def weighted_ce(
    probs: TensorLike,
    label,
    weights: Optional[ClassWeights] = None,
    smoothing: float = 0.0,
) -> torch.Tensor:
    """Weighted categorical cross entropy, -w[y] * log p[y], batch-averaged.

    Accepts a single distribution with an integer label or a (B, K) batch with
    a label vector. ``smoothing`` mixes the one-hot target with the uniform
    distribution before taking the weighted log-likelihood.
    """
    p = _tensor(probs)
    y = torch.as_tensor(np.asarray(label, dtype=np.int64))
    return _per_sample_ce(p, y, weights, float(smoothing)).mean()


def focal_loss(probs: TensorLike, label, alpha: float = 1.0, gamma: float = 2.0) -> torch.Tensor:
    """Focal loss -alpha * (1 - p[y])**gamma * log p[y], batch-averaged."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p = _tensor(probs)
    y = torch.as_tensor(np.asarray(label, dtype=np.int64))
    if p.ndim == 1:
        p = p.unsqueeze(0)
        y = y.reshape(1)
    _check_simplex(p)
    if torch.any(y < 0) or torch.any(y >= p.shape[-1]):
        raise ValueError(f"label out of range for {p.shape[-1]} classes")
    p_true = p.gather(1, y.view(-1, 1)).squeeze(1)
    loss = -alpha * (1.0 - p_true) ** gamma * torch.log(torch.clamp(p_true, min=LOG_FLOOR))
    return loss.mean()


def _weighted_term(weight, per_sample: torch.Tensor) -> torch.Tensor:
    """Scale a per-sample loss by a scalar or per-sample weight, then average."""
    if np.isscalar(weight):
        return float(weight) * per_sample.mean()
    w = torch.as_tensor(np.asarray(weight, dtype=np.float64), dtype=per_sample.dtype)
    if w.shape != per_sample.shape:
        raise ValueError(f"per-sample weight shape {tuple(w.shape)} != batch shape {tuple(per_sample.shape)}")
    return (w * per_sample).mean()


def hmtl_puzzle_loss(
    sl: tuple,
    ssh: Sequence[tuple],
    head_weights: HeadLossWeights = HeadLossWeights(),
    smoothing: float = 0.0,
) -> LossReport:
    """Supervised weighted CE plus one CE term per puzzle head.

    ``sl`` is (probs, label, ClassWeights-or-None); each ``ssh`` entry is
    (probs_j, label_j). Per-head weights come from ``head_weights``; with all
    weights at 1 this is the plain unweighted sum of the head losses.
    """
    sl_probs, sl_label, sl_weights = sl
    lambdas = head_weights.ssh_weights(len(ssh))

    terms: dict = {}
    raw: dict = {}
    sl_raw = weighted_ce(sl_probs, sl_label, sl_weights, smoothing)
    raw["sl"] = sl_raw
    terms["sl"] = head_weights.sl * sl_raw
    for j, (probs_j, label_j) in enumerate(ssh):
        per_sample = _per_sample_ce(_tensor(probs_j), torch.as_tensor(np.asarray(label_j, dtype=np.int64)), None, 0.0)
        raw[f"puzzle_{j}"] = per_sample.mean()
        terms[f"puzzle_{j}"] = _weighted_term(lambdas[j], per_sample)
    total = sum(terms.values())
    return LossReport(total=total, terms=terms, raw=raw)


def hmtl_puzzle_rotation_loss(
    sl: tuple,
    puzzle_ssh: Sequence[tuple],
    rotation_ssh: tuple,
    head_weights: HeadLossWeights = HeadLossWeights(),
    smoothing: float = 0.0,
) -> LossReport:
    """Puzzle co-training loss plus one 8-way rotation CE term."""
    report = hmtl_puzzle_loss(sl, puzzle_ssh, head_weights, smoothing)
    rot_probs, rot_label = rotation_ssh
    rot_raw = weighted_ce(rot_probs, rot_label)
    report.raw["rotation"] = rot_raw
    report.terms["rotation"] = head_weights.rotation * rot_raw
    report.total = report.total + report.terms["rotation"]
    return report


def perceptual_decoder_loss(feat_rec: TensorLike, feat_orig: TensorLike, weight: float = 1.0) -> torch.Tensor:
    """RMSE between softmax-normalized feature vectors, scaled by ``weight``.

    The softmax acts as a normalizer over the feature dimension, which makes
    the loss invariant to a common additive shift of both inputs. Batched
    inputs (B, D) are normalized per row and reduced over the whole batch.
    """
    rec = _tensor(feat_rec)
    orig = _tensor(feat_orig)
    if rec.shape != orig.shape:
        raise ValueError(f"feature shapes differ: {tuple(rec.shape)} vs {tuple(orig.shape)}")
    rec_n = torch.softmax(rec, dim=-1)
    orig_n = torch.softmax(orig, dim=-1)
    return weight * torch.sqrt(torch.mean((rec_n - orig_n) ** 2))


def pixelwise_rmse(rec: TensorLike, orig: TensorLike, mask: Optional[TensorLike] = None) -> torch.Tensor:
    """Root mean squared pixel error, optionally restricted to mask==1 pixels."""
    r = _tensor(rec)
    o = _tensor(orig)
    if r.shape != o.shape:
        raise ValueError(f"image shapes differ: {tuple(r.shape)} vs {tuple(o.shape)}")
    sq = (r - o) ** 2
    if mask is None:
        return torch.sqrt(sq.mean())
    m = _tensor(mask).to(sq.dtype)
    while m.ndim < sq.ndim:
        m = m.unsqueeze(-1)
    m = m.expand_as(sq)
    denom = m.sum()
    if float(denom) == 0.0:
        return torch.zeros((), dtype=sq.dtype)
    return torch.sqrt((sq * m).sum() / denom)


def expectation_from_bins(probs: TensorLike, scheme: BinScheme) -> torch.Tensor:
    """Expected value of the bin centers under ``probs`` (per row for batches)."""
    p = _tensor(probs)
    if p.shape[-1] != scheme.n_bins:
        raise ValueError(f"got {p.shape[-1]} probabilities for {scheme.n_bins} bins")
    centers = torch.as_tensor(scheme.centers, dtype=p.dtype, device=p.device)
    return (p * centers).sum(dim=-1)


def cat_reg_loss(
    probs: TensorLike,
    y_reg: TensorLike,
    scheme: BinScheme,
    alpha: float = 1.0,
    cat_mask: Optional[Sequence[bool]] = None,
) -> LossReport:
    """Categorical-regression loss: alpha * CE on the binned target plus an
    RMSE penalty between the softmax expectation and the continuous target.

    The categorical target is the half-open bin index of ``y_reg`` (the top
    endpoint falls in the last bin). For a batch the regression term is the
    RMSE of the expectation errors over the batch; for a single sample it is
    the absolute error. ``cat_mask`` drops individual samples from the CE term
    only, for records that carry no usable categorical label.
    """
    p = _tensor(probs)
    single = p.ndim == 1
    if single:
        p = p.unsqueeze(0)
    _check_simplex(p)
    y = _tensor(y_reg).reshape(-1)
    if p.shape[0] != y.shape[0]:
        raise ValueError(f"{p.shape[0]} predictions vs {y.shape[0]} targets")
    bins = torch.as_tensor(
        np.asarray(scheme.bin_index(y.detach().cpu().numpy()), dtype=np.int64).reshape(-1)
    )

    ce = _per_sample_ce(p, bins, None, 0.0)
    if cat_mask is not None:
        keep = torch.as_tensor(np.asarray(cat_mask, dtype=bool)).reshape(-1)
        ce = ce[keep]
    cat_term = alpha * (ce.mean() if ce.numel() else torch.zeros((), dtype=p.dtype))

    errors = expectation_from_bins(p, scheme) - y.to(p.dtype)
    reg_term = torch.sqrt((errors**2).mean())

    terms = {"categorical": cat_term, "regression": reg_term}
    return LossReport(total=cat_term + reg_term, terms=terms, raw={"categorical_ce": cat_term / alpha if alpha else cat_term, "regression_rmse": reg_term})


def hmtl_inpaint_loss(
    sl: tuple,
    dec_term: torch.Tensor,
    head_weights: HeadLossWeights = HeadLossWeights(),
    smoothing: float = 0.0,
) -> LossReport:
    """Supervised weighted CE plus an already-weighted decoder reconstruction term."""
    sl_probs, sl_label, sl_weights = sl
    dec = _tensor(dec_term)
    if float(dec.detach()) < 0:
        raise ValueError("decoder term must be >= 0")
    sl_raw = weighted_ce(sl_probs, sl_label, sl_weights, smoothing)
    terms = {"sl": head_weights.sl * sl_raw, "decoder": dec}
    return LossReport(total=terms["sl"] + dec, terms=terms, raw={"sl": sl_raw, "decoder": dec})
