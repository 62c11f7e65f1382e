"""Semantic-group textual learning.

Token features are expanded from C_T to K*C_T channels, split into K channel
groups, and each group is read out by its own text query through a small
stack of (self-attention, cross-attention, MLP) layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numerics import functional as F
from .numerics.nn import (
    Conv2d,
    LayerNorm,
    Linear,
    MLP,
    MaskedBatchNorm,
    Module,
    ModuleList,
    MultiHeadAttention,
)
from .numerics.tensor import Parameter, Tensor, as_tensor, stack

MAX_PROJECTED_WIDTH = 4096


@dataclass
class SGTLConfig:
    n_layers: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    use_text_query: bool = True
    use_channel_group: bool = True
    eos_source: str = "group"  # "group": group-k slice of projected EOS; "global": raw EOS feature
    projection_norm: str = "batch"  # "batch" | "layer"
    shared_output_projection: bool = False

    def __post_init__(self):
        if self.eos_source not in ("group", "global"):
            raise ConfigurationError(f"eos_source must be 'group' or 'global', got {self.eos_source!r}")
        if self.projection_norm not in ("batch", "layer"):
            raise ConfigurationError(f"projection_norm must be 'batch' or 'layer', got {self.projection_norm!r}")
        if self.n_layers < 0:
            raise ConfigurationError("n_layers must be >= 0")


@dataclass
class GroupedTextFeatures:
    groups: Tensor  # (B, K, L, C_T)
    mask: np.ndarray  # (B, L)
    eos_index: np.ndarray  # (B,)

    @property
    def group_count(self) -> int:
        return self.groups.shape[1]

    def group(self, k: int) -> Tensor:
        return self.groups[:, k]

    def concatenated(self) -> Tensor:
        """Undo the split: (B, L, K*C_T)."""
        B, K, L, C = self.groups.shape
        return self.groups.transpose(0, 2, 1, 3).reshape(B, L, K * C)


@dataclass
class TextQuery:
    word_query: np.ndarray  # (C_T,)
    conditioned_query: np.ndarray  # (C_T,)
    eos_slice: np.ndarray

    def __post_init__(self):
        if not np.array_equal(self.conditioned_query, self.word_query + self.eos_slice):
            raise ValueError("conditioned query must equal word query + EOS slice")


class ChannelProjection(Module):
    """Linear C_T -> K*C_T followed by a normalisation layer."""

    def __init__(self, C_T: int, K: int, rng: np.random.Generator, norm: str = "batch"):
        super().__init__()
        if K * C_T > MAX_PROJECTED_WIDTH:
            raise ConfigurationError(f"projected width K*C_T={K * C_T} exceeds {MAX_PROJECTED_WIDTH}")
        self.K = K
        self.linear = Linear(C_T, K * C_T, rng)
        self.norm = MaskedBatchNorm(K * C_T) if norm == "batch" else LayerNorm(K * C_T)

    def forward(self, x, mask) -> Tensor:
        h = self.linear(x)
        if isinstance(self.norm, MaskedBatchNorm):
            return self.norm(h, mask)
        return self.norm(h)


def channel_project_and_group(T_f, mask, eos_index, projection: ChannelProjection) -> GroupedTextFeatures:
    """Project (B, L, C_T) token features to K*C_T channels and split into K groups."""
    T_f = as_tensor(T_f)
    B, L, C_T = T_f.shape
    projected = projection(T_f, mask)
    K = projection.K
    groups = projected.reshape(B, L, K, C_T).transpose(0, 2, 1, 3)
    return GroupedTextFeatures(groups, np.asarray(mask, dtype=bool), np.asarray(eos_index))


def eos_rows(x: Tensor, eos_index) -> Tensor:
    """Pick the EOS position: (B, L, C) -> (B, C) or (B, K, L, C) -> (B, K, C)."""
    eos_index = np.asarray(eos_index)
    b = np.arange(x.shape[0])
    if x.ndim == 3:
        return x[b, eos_index]
    return x[b, :, eos_index]


def build_text_queries(word_queries, eos_features) -> Tensor:
    """q^k = w^k + EOS^k. word_queries (K, C_T); eos_features (B, K, C_T) or (B, C_T)."""
    w = as_tensor(word_queries)
    e = as_tensor(eos_features, w)
    if e.ndim == 2:
        e = e.reshape(e.shape[0], 1, e.shape[1])
    return w.reshape(1, *w.shape) + e


class SGTLLayer(Module):
    def __init__(self, C_T: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        super().__init__()
        self.ln_self = LayerNorm(C_T)
        self.self_attn = MultiHeadAttention(C_T, heads, rng)
        self.ln_cross = LayerNorm(C_T)
        self.cross_attn = MultiHeadAttention(C_T, heads, rng)
        self.ln_mlp = LayerNorm(C_T)
        self.mlp = MLP(C_T, mlp_ratio * C_T, rng)

    def forward(self, q, groups, mask) -> Tensor:
        """q: (B, K, C_T); groups: (B, K or 1, L, C_T); mask: (B, L)."""
        B, K, C = q.shape
        h = self.ln_self(q)
        q = self.self_attn(h, h, h) + q
        h = self.ln_cross(q).reshape(B, K, 1, C)
        key_mask = np.asarray(mask, dtype=bool)[:, None, :]
        t = self.cross_attn(h, groups, groups, key_mask=key_mask).reshape(B, K, C) + q
        return self.mlp(self.ln_mlp(t)) + t


class SGTL(Module):
    def __init__(self, C_T: int, C: int, K: int, cfg: SGTLConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.K = K
        self.C_T = C_T
        self.projection = ChannelProjection(C_T, K, rng, cfg.projection_norm) if cfg.use_channel_group else None
        self.word_queries = Parameter(rng.normal(0.0, 0.02, size=(K, C_T)))
        self.layers = ModuleList(SGTLLayer(C_T, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.n_layers))
        n_proj = 1 if cfg.shared_output_projection else K
        self.out_weight = Parameter(rng.normal(0.0, 1.0 / math.sqrt(C_T), size=(n_proj, C_T, C)))
        self.out_bias = Parameter(np.zeros((n_proj, 1, C)))

    def group(self, T_f, mask, eos_index) -> GroupedTextFeatures | None:
        if self.projection is None:
            return None
        return channel_project_and_group(T_f, mask, eos_index, self.projection)

    def queries(self, T_f, grouped: GroupedTextFeatures | None, eos_index) -> Tensor:
        B = T_f.shape[0]
        if not self.cfg.use_text_query:
            return self.word_queries.reshape(1, self.K, self.C_T) * np.ones((B, 1, 1), dtype=T_f.dtype)
        if grouped is not None and self.cfg.eos_source == "group":
            return build_text_queries(self.word_queries, eos_rows(grouped.groups, eos_index))
        return build_text_queries(self.word_queries, eos_rows(T_f, eos_index))

    def forward(self, T_f, mask, eos_index) -> Tensor:
        """(B, L, C_T) token features -> (B, K, C) semantic-group local features."""
        T_f = as_tensor(T_f)
        if T_f.ndim != 3 or T_f.shape[-1] != self.C_T:
            raise DimensionError(f"expected (B, L, {self.C_T}) token features, got {T_f.shape}")
        grouped = self.group(T_f, mask, eos_index)
        q = self.queries(T_f, grouped, eos_index)
        B, L, C_T = T_f.shape
        keys = grouped.groups if grouped is not None else T_f.reshape(B, 1, L, C_T)
        return self.readout(q, keys, mask)

    def readout(self, q, keys, mask) -> Tensor:
        """Run the layer stack on queries (B, K, C_T) over keys (B, K|1, L, C_T) and project to C."""
        for layer in self.layers:
            q = layer(q, keys, mask)
        B, K, C_T = q.shape
        out = q.reshape(B, K, 1, C_T) @ self.out_weight + self.out_bias
        return out.reshape(B, K, out.shape[-1])


def sgtl_block(q, group_features, mask, sgtl: SGTL) -> Tensor:
    """Single-group convenience wrapper: q (B, C_T), group (B, L, C_T) -> (B, C)."""
    q = as_tensor(q)
    g = as_tensor(group_features)
    B, L, C_T = g.shape
    if sgtl.K != 1 and not sgtl.cfg.shared_output_projection:
        raise ConfigurationError("sgtl_block on a single group needs a K=1 or shared-projection SGTL")
    out = sgtl.readout(q.reshape(B, 1, C_T), g.reshape(B, 1, L, C_T), mask)
    return out.reshape(B, out.shape[-1])


def local_similarity(V_l, T_l) -> Tensor:
    """Cosine similarity of the concatenated K local features.

    Accepts (K, C) pairs (scalar result) or batched (B, K, C) pairs, in which
    case the full (B_img, B_txt) matrix is returned.
    """
    V_l, T_l = as_tensor(V_l), as_tensor(T_l)
    if V_l.shape[-2:] != T_l.shape[-2:]:
        raise DimensionError(f"local feature shapes differ: {V_l.shape} vs {T_l.shape}")
    if V_l.ndim == 2:
        return F.cosine_similarity(V_l.reshape(-1), T_l.reshape(-1))
    Bv, K, C = V_l.shape
    return F.cosine_matrix(V_l.reshape(Bv, K * C), T_l.reshape(T_l.shape[0], K * C))


class LocalConvText(Module):
    """Ablation stand-in for SGTL: K independent token convolutions, masked mean, projection."""

    def __init__(self, C_T: int, C: int, K: int, rng: np.random.Generator):
        super().__init__()
        self.K = K
        self.convs = ModuleList(Conv2d(C_T, C_T, rng, kernel=(3, 1)) for _ in range(K))
        self.proj = ModuleList(Linear(C_T, C, rng) for _ in range(K))

    def forward(self, T_f, mask, eos_index=None) -> Tensor:
        T_f = as_tensor(T_f)
        B, L, C_T = T_f.shape
        m = np.asarray(mask, dtype=T_f.dtype)
        x = (T_f * m[..., None]).reshape(B, L, 1, C_T)
        outs = []
        for conv, proj in zip(self.convs, self.proj):
            h = F.gelu(conv(x)).reshape(B, L, C_T)
            outs.append(proj(F.masked_mean(h, mask, axis=1)))
        return stack(outs, axis=1)
