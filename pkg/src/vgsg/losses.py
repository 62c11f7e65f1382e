"""Identity, contrastive and combined training objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, TrainingDivergence, ValidationError
from .numerics import functional as F
from .numerics.tensor import Tensor, as_tensor, tsum


@dataclass
class LossWeights:
    lambda1: float = 4.0  # similarity transfer
    lambda2: float = 0.25  # class-probability transfer
    lambda_ft: float = 1.0  # feature transfer (ablation only)
    tau_p: float = 10.0
    tau_n: float = 40.0
    alpha: float = 0.6
    beta: float = 0.4
    label_smoothing: float = 0.1
    tau: float = 4.0  # relation-matrix temperature
    negatives: str = "hardest"  # "hardest" | "all"

    def __post_init__(self):
        if min(self.tau_p, self.tau_n, self.tau) <= 0:
            raise ConfigurationError("temperatures must be positive")
        if not self.alpha > self.beta:
            raise ConfigurationError(f"need alpha > beta, got {self.alpha} <= {self.beta}")
        if min(self.lambda1, self.lambda2, self.lambda_ft) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError(f"label smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.negatives not in ("hardest", "all"):
            raise ConfigurationError(f"negatives must be 'hardest' or 'all', got {self.negatives!r}")


def smoothed_targets(labels, N: int, eps: float, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if N < 2:
        raise ValidationError("identity loss needs at least 2 classes")
    if labels.size and (labels.min() < 0 or labels.max() >= N):
        raise ValidationError(f"labels must lie in [0, {N}), got range [{labels.min()}, {labels.max()}]")
    t = np.full((labels.size, N), eps / (N - 1), dtype=dtype)
    t[np.arange(labels.size), labels] = 1.0 - eps
    return t


def id_loss(logits, labels, eps: float = 0.1) -> Tensor:
    """Cross entropy against label-smoothed targets: 1-eps on the true class, eps/(N-1) elsewhere.

    ``logits`` may carry leading axes (..., B, N); the per-row losses are
    averaged over B and summed over the leading axes.
    """
    logits = as_tensor(logits)
    N = logits.shape[-1]
    lead = logits.shape[:-2]
    B = logits.shape[-2]
    labels = np.broadcast_to(np.asarray(labels), lead + (B,))
    targets = smoothed_targets(labels.reshape(-1), N, eps, logits.dtype).reshape(logits.shape)
    logp = F.log_softmax(logits, axis=-1)
    return -tsum(logp * targets) * (1.0 / B)


def contrastive_loss(S_pos, S_neg, w: LossWeights | None = None) -> Tensor:
    """(1/B) sum_i [log(1+exp(-tau_p (S+_i - alpha))) + log(1+exp(tau_n (S-_i - beta)))].

    ``S_neg`` may be (B,) or (B, n); with n negatives per anchor the negative
    term is averaged over them.
    """
    w = w or LossWeights()
    S_pos, S_neg = as_tensor(S_pos), as_tensor(S_neg)
    if S_pos.data.size == 0 or S_neg.data.size == 0:
        raise ValidationError("contrastive loss needs at least one positive and one negative pair")
    B = S_pos.shape[0]
    pos = F.softplus((S_pos - w.alpha) * (-w.tau_p))
    neg = F.softplus((S_neg - w.beta) * w.tau_n)
    if neg.ndim == 2:
        neg = neg.mean(axis=1)
    return (pos.sum() + neg.sum()) * (1.0 / B)


def negative_mask(labels_rows, labels_cols) -> np.ndarray:
    return np.asarray(labels_rows)[:, None] != np.asarray(labels_cols)[None, :]


def batch_contrastive(S, labels, w: LossWeights | None = None) -> Tensor:
    """Contrastive loss over a (B_img, B_txt) similarity matrix of paired samples.

    Positives are the matched pairs on the diagonal; negatives are all
    cross-identity pairs, reduced to the hardest one per image anchor unless
    ``w.negatives == 'all'``.
    """
    w = w or LossWeights()
    S = as_tensor(S)
    B = S.shape[0]
    neg = negative_mask(labels, labels)
    if not neg.any(axis=1).all():
        raise ValidationError("every anchor needs at least one in-batch negative")
    rows = np.arange(B)
    S_pos = S[rows, rows]
    if w.negatives == "hardest":
        masked = np.where(neg, S.data, -np.inf)
        S_neg = S[rows, masked.argmax(axis=1)]
        return contrastive_loss(S_pos, S_neg, w)
    pos = F.softplus((S_pos - w.alpha) * (-w.tau_p))
    negm = neg.astype(S.dtype)
    neg_terms = (F.softplus((S - w.beta) * w.tau_n) * negm).sum(axis=1) / negm.sum(axis=1)
    return (pos.sum() + neg_terms.sum()) * (1.0 / B)


TERMS = ("id", "con", "st", "cpt", "ft")


def total_loss(parts: dict, w: LossWeights | None = None) -> Tensor:
    """L_ID + L_Con + lambda1 L_st + lambda2 L_cpt (+ lambda_ft L_ft for the feature-transfer ablation)."""
    w = w or LossWeights()
    for name, value in parts.items():
        v = as_tensor(value).data
        if not np.all(np.isfinite(v)):
            raise TrainingDivergence(name, float(np.ravel(v)[0]))
    scale = {"id": 1.0, "con": 1.0, "st": w.lambda1, "cpt": w.lambda2, "ft": w.lambda_ft}
    unknown = set(parts) - set(scale)
    if unknown:
        raise ValidationError(f"unknown loss terms {sorted(unknown)}")
    total = None
    for name in TERMS:
        if name in parts:
            term = as_tensor(parts[name]) * scale[name]
            total = term if total is None else total + term
    return total if total is not None else as_tensor(0.0)
