"""Vision-guided knowledge transfer.

The teacher branch lets every pixel of an image attend over the words of a
caption, pools the result per stripe, and is used only during training. Its
relation matrices and class probabilities are distilled into the student
(text-only) branch; all teacher quantities are detached at the loss boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, ValidationError
from .numerics import functional as F
from .numerics.nn import Linear, Module
from .numerics.tensor import Parameter, Tensor, as_tensor

# number of (image, caption) pairs pushed through vision-guided attention
CALLS = {"pairs": 0}


def reset_counter() -> None:
    CALLS["pairs"] = 0


@dataclass
class VisionGuidedTextFeatures:
    per_pixel: Tensor  # (..., H*W, C_T)
    per_stripe_pooled: Tensor  # (..., K, C_T)
    weights: np.ndarray  # alpha, (..., H*W, L)


@dataclass
class RelationMatrix:
    values: Tensor  # (B, B), row-stochastic
    tau: float


def vision_guided_attention(V_f, T_f, mask, W1, K: int, pairwise: bool = True) -> VisionGuidedTextFeatures:
    """Pixel-to-word attention.

    V_f: (B_i, H, W, C) visual maps; T_f: (B_t, L, C_T) token features with
    ``mask`` (B_t, L). ``W1`` maps C_T -> C (a ``Linear`` or a (C_T, C) array).
    With ``pairwise`` every image attends over every caption, giving outputs
    indexed (B_i, B_t, ...); otherwise image b attends over caption b only.
    Unbatched (H, W, C) / (L, C_T) inputs are accepted for a single pair.
    """
    V_f, T_f = as_tensor(V_f), as_tensor(T_f)
    mask = np.asarray(mask, dtype=bool)
    single = V_f.ndim == 3
    if single:
        V_f = V_f.reshape(1, *V_f.shape)
        T_f = T_f.reshape(1, *T_f.shape)
        mask = mask[None]
        pairwise = False
    Bi, H, W, C = V_f.shape
    Bt, L, C_T = T_f.shape
    if H % K:
        raise ConfigurationError(f"feature height {H} not divisible by K={K}")
    if not mask.any(axis=-1).all():
        raise DimensionError("vision-guided attention needs at least one valid word per caption")
    U = W1(T_f) if isinstance(W1, Module) else T_f @ as_tensor(W1, T_f)
    if U.shape[-1] != C:
        raise DimensionError(f"W1 maps words to {U.shape[-1]} channels, visual features have {C}")
    V = V_f.reshape(Bi, H * W, C)
    if pairwise:
        logits = V.reshape(Bi, 1, H * W, C) @ U.swapaxes(-1, -2).reshape(1, Bt, C, L)
        alpha = F.softmax(logits, axis=-1, mask=mask[None, :, None, :])
        per_pixel = alpha @ T_f.reshape(1, Bt, L, C_T)
        lead = (Bi, Bt)
        CALLS["pairs"] += Bi * Bt
    else:
        if Bi != Bt:
            raise DimensionError(f"paired attention needs equal batch sizes, got {Bi} and {Bt}")
        logits = V @ U.swapaxes(-1, -2)
        alpha = F.softmax(logits, axis=-1, mask=mask[:, None, :])
        per_pixel = alpha @ T_f
        lead = (Bi,)
        CALLS["pairs"] += Bi
    pooled = per_pixel.reshape(*lead, K, (H // K) * W, C_T).mean(axis=-2)
    if single:
        return VisionGuidedTextFeatures(per_pixel.reshape(H * W, C_T), pooled.reshape(K, C_T), alpha.data[0])
    return VisionGuidedTextFeatures(per_pixel, pooled, alpha.data)


def teacher_similarity(V_l, VT_l) -> Tensor:
    """Cosine between concatenated local visual and vision-guided features.

    (K, C) x (K, C) -> scalar, or (B, K, C) x (B, B, K, C) -> (B, B) where
    entry (a, b) compares image a with the features image a pulled out of
    caption b.
    """
    V_l, VT_l = as_tensor(V_l), as_tensor(VT_l)
    if V_l.ndim == 2:
        return F.cosine_similarity(V_l.reshape(-1), VT_l.reshape(-1))
    B, K, C = V_l.shape
    if VT_l.ndim == 3:
        return F.cosine_similarity(V_l.reshape(B, K * C), VT_l.reshape(B, K * C))
    return F.cosine_similarity(V_l.reshape(B, 1, K * C), VT_l.reshape(B, VT_l.shape[1], K * C))


def relation_matrix(S, tau: float) -> RelationMatrix:
    """Row-wise softmax of S / tau."""
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    return RelationMatrix(F.softmax(as_tensor(S) * (1.0 / tau), axis=-1), tau)


def _values(m) -> Tensor:
    return m.values if isinstance(m, RelationMatrix) else as_tensor(m)


def similarity_transfer_loss(M_s, M_v) -> Tensor:
    """KL(M_v || M_s) averaged over rows; the teacher matrix is detached."""
    return F.kl_divergence(_values(M_v).detach(), _values(M_s))


def class_probability_transfer_loss(P_s, P_v) -> Tensor:
    """Sum over stripes of KL(P_v^k || P_s^k); inputs are (K, B, N) or lists of (B, N)."""
    if isinstance(P_s, (list, tuple)):
        P_s = list(P_s)
    else:
        P_s = [as_tensor(P_s)[k] for k in range(as_tensor(P_s).shape[0])]
    if isinstance(P_v, (list, tuple)):
        P_v = list(P_v)
    else:
        P_v = [as_tensor(P_v)[k] for k in range(as_tensor(P_v).shape[0])]
    if len(P_s) != len(P_v):
        raise ValidationError(f"group count mismatch: student {len(P_s)} vs teacher {len(P_v)}")
    total = None
    for ps, pv in zip(P_s, P_v):
        term = F.kl_divergence(as_tensor(pv).detach(), as_tensor(ps))
        total = term if total is None else total + term
    return total


def feature_transfer_loss(T_l, VT_l) -> Tensor:
    """Mean squared difference to the detached teacher features."""
    T_l = as_tensor(T_l)
    VT = as_tensor(VT_l).detach()
    if T_l.shape != VT.shape:
        raise DimensionError(f"feature shapes differ: {T_l.shape} vs {VT.shape}")
    d = T_l - VT
    return (d * d).mean()


class StripeClassifier(Module):
    """K independent identity classifiers, one per stripe: (B, K, C) -> (K, B, N) logits."""

    def __init__(self, K: int, C: int, N: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, 0.01, size=(K, C, N)))
        self.bias = Parameter(np.zeros((K, 1, N)))

    def forward(self, x) -> Tensor:
        x = as_tensor(x, self.weight)
        return x.transpose(1, 0, 2) @ self.weight + self.bias


class VGKT(Module):
    """Teacher branch: W1 attention projection, pooled-feature projection, stripe classifier."""

    def __init__(self, C_T: int, C: int, K: int, N: int, rng: np.random.Generator):
        super().__init__()
        self.K = K
        self.attn_proj = Linear(C_T, C, rng, bias=False)
        self.feature_proj = Linear(C_T, C, rng)
        self.classifier = StripeClassifier(K, C, N, rng)
        self.mark_teacher()
        self.last_weights: np.ndarray | None = None

    def forward(self, V_f, T_f, mask, pairwise: bool = True) -> Tensor:
        """Projected vision-guided local features, (B, B, K, C) or (B, K, C)."""
        vg = vision_guided_attention(V_f, T_f, mask, self.attn_proj, self.K, pairwise=pairwise)
        self.last_weights = vg.weights
        return self.feature_proj(vg.per_stripe_pooled)
