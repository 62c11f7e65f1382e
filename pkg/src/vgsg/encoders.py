"""Small visual/text encoders, attention pooling and stripe partitioning.

Feature maps are kept channel-last internally: a batch of visual maps is
(B, H, W, C) and a batch of token features is (B, L, C_T).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ValidationError, VocabularyError
from .numerics import functional as F
from .numerics.nn import (
    Conv2d,
    Embedding,
    LayerNorm,
    Linear,
    MLP,
    Module,
    ModuleList,
    MultiHeadAttention,
)
from .numerics.tensor import Parameter, Tensor, as_tensor

PAD, SOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<sos>", "<eos>", "<unk>")

# two 2x downsampling blocks followed by a stride-1 block
VISUAL_STRIDE = 4


@dataclass
class EncoderConfig:
    C: int = 64
    C_T: int = 64
    H: int = 8
    W: int = 4
    L_max: int = 32
    vocab_size: int = 128
    text_layers: int = 2
    drop_path_rate: float = 0.1
    K: int = 4
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.L_max < 3:
            raise ConfigurationError(f"L_max must be >= 3 (SOS + token + EOS), got {self.L_max}")
        if self.K < 1:
            raise ConfigurationError(f"K must be >= 1, got {self.K}")
        if self.H % self.K:
            raise ConfigurationError(f"feature height H={self.H} not divisible by K={self.K}")
        if self.C_T % self.heads:
            raise ConfigurationError(f"C_T={self.C_T} not divisible by {self.heads} heads")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigurationError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")

    @property
    def image_height(self) -> int:
        return self.H * VISUAL_STRIDE

    @property
    def image_width(self) -> int:
        return self.W * VISUAL_STRIDE


@dataclass
class VisualFeatureMap:
    features: Tensor  # (H, W, C), or (B, H, W, C) when batched
    source_id: int | None = None
    image_id: int | None = None


@dataclass
class TextFeatureSequence:
    features: Tensor  # (L, C_T), or (B, L, C_T) when batched
    mask: np.ndarray  # True = real token (SOS/EOS included)
    eos_index: np.ndarray | int
    truncated: np.ndarray | bool = False


@dataclass
class FramedTokens:
    tokens: np.ndarray  # (B, L_max) int
    mask: np.ndarray  # (B, L_max) bool
    eos_index: np.ndarray  # (B,)
    truncated: np.ndarray = field(default=None)  # (B,) bool


class Tokenizer:
    """Whitespace tokenizer over a fixed word list (special tokens first)."""

    def __init__(self, words):
        words = list(words)
        if tuple(words[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            words = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text) -> list[int]:
        pieces = text.split() if isinstance(text, str) else list(text)
        return [self.index.get(w, UNK) for w in pieces]

    def decode(self, ids) -> list[str]:
        return [self.words[i] for i in ids]


def frame_tokens(token_lists, L_max: int, vocab_size: int) -> FramedTokens:
    """Wrap each id list as [SOS] ids [EOS] and pad to ``L_max``.

    Sequences longer than ``L_max - 2`` are truncated and flagged.
    """
    B = len(token_lists)
    tokens = np.full((B, L_max), PAD, dtype=np.int64)
    mask = np.zeros((B, L_max), dtype=bool)
    eos = np.zeros(B, dtype=np.int64)
    truncated = np.zeros(B, dtype=bool)
    for b, ids in enumerate(token_lists):
        ids = [int(i) for i in ids]
        if not ids:
            raise ValidationError(f"caption {b} is empty")
        bad = [i for i in ids if i < 0 or i >= vocab_size]
        if bad:
            raise VocabularyError(f"caption {b}: token id(s) {bad[:5]} outside vocabulary of size {vocab_size}")
        if len(ids) > L_max - 2:
            ids = ids[: L_max - 2]
            truncated[b] = True
        n = len(ids)
        tokens[b, 0] = SOS
        tokens[b, 1 : n + 1] = ids
        tokens[b, n + 1] = EOS
        mask[b, : n + 2] = True
        eos[b] = n + 1
    return FramedTokens(tokens, mask, eos, truncated)


class AttentionPool(Module):
    """Single-query, single-head attention pooling over positions.

    Output is the attention-weighted sum of the input features themselves, so
    a single position pools to itself and uniform logits give the mean.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.key = Linear(dim, dim, rng)
        self.query = Parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), size=dim))
        self.scale = 1.0 / math.sqrt(dim)
        self.last_weights: np.ndarray | None = None

    def forward(self, x, mask=None) -> Tensor:
        x = as_tensor(x, self.query)
        B, N, C = x.shape
        logits = (self.key(x) @ self.query.reshape(C, 1)).reshape(B, N) * self.scale
        w = F.softmax(logits, axis=-1, mask=mask)
        self.last_weights = w.data
        return (w.reshape(B, 1, N) @ x).reshape(B, C)


def self_attention_pool(x, pool: AttentionPool, mask=None) -> Tensor:
    """Pool a (N, C) sequence or (B, N, C) batch with ``pool``."""
    x = as_tensor(x, pool.query)
    if x.ndim == 2:
        m = None if mask is None else np.asarray(mask)[None]
        return pool(x.reshape(1, *x.shape), m).reshape(x.shape[-1])
    return pool(x, mask)


class VisualEncoder(Module):
    """conv3x3 -> channel LayerNorm -> GELU -> 2x2 pool, twice, then a stride-1 block."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        c1, c2 = max(cfg.C // 4, 4), max(cfg.C // 2, 4)
        self.cfg = cfg
        self.conv1 = Conv2d(3, c1, rng)
        self.norm1 = LayerNorm(c1)
        self.conv2 = Conv2d(c1, c2, rng)
        self.norm2 = LayerNorm(c2)
        self.conv3 = Conv2d(c2, cfg.C, rng)
        self.norm3 = LayerNorm(cfg.C)
        self.passes = 0

    def forward(self, images) -> Tensor:
        """images: (B, 3, H0, W0) channel-first array -> (B, H, W, C)."""
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ConfigurationError(f"expected images of shape (B, 3, H0, W0), got {images.shape}")
        B, _, H0, W0 = images.shape
        if H0 % VISUAL_STRIDE or W0 % VISUAL_STRIDE:
            raise ConfigurationError(f"image {H0}x{W0} not divisible by total stride {VISUAL_STRIDE}")
        self.passes += B
        x = Tensor(images.transpose(0, 2, 3, 1).astype(self.conv1.weight.dtype))
        x = F.avg_pool2x2(F.gelu(self.norm1(self.conv1(x))))
        x = F.avg_pool2x2(F.gelu(self.norm2(self.conv2(x))))
        return F.gelu(self.norm3(self.conv3(x)))


class TextLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.ln1 = LayerNorm(cfg.C_T)
        self.attn = MultiHeadAttention(cfg.C_T, cfg.heads, rng)
        self.ln2 = LayerNorm(cfg.C_T)
        self.mlp = MLP(cfg.C_T, cfg.mlp_ratio * cfg.C_T, rng)

    def forward(self, x, mask, drop_rate, rng) -> Tensor:
        h = self.ln1(x)
        x = x + F.drop_path(self.attn(h, h, h, key_mask=mask), drop_rate, rng, self.training)
        return x + F.drop_path(self.mlp(self.ln2(x)), drop_rate, rng, self.training)


class TextEncoder(Module):
    """Token + learned position embeddings, pre-norm transformer layers, final LayerNorm."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = Embedding(cfg.vocab_size, cfg.C_T, rng)
        self.position_embedding = Parameter(rng.normal(0.0, 0.02, size=(cfg.L_max, cfg.C_T)))
        self.layers = ModuleList(TextLayer(cfg, rng) for _ in range(cfg.text_layers))
        self.ln_final = LayerNorm(cfg.C_T)
        self.passes = 0

    def forward(self, tokens: np.ndarray, mask: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        tokens = np.asarray(tokens)
        B, L = tokens.shape
        if L > self.cfg.L_max:
            raise ConfigurationError(f"sequence length {L} exceeds L_max={self.cfg.L_max}")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise VocabularyError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        self.passes += B
        x = self.token_embedding(tokens) + self.position_embedding[:L]
        for layer in self.layers:
            x = layer(x, mask, self.cfg.drop_path_rate, rng)
        return self.ln_final(x)


def visual_encode(image, encoder: VisualEncoder, source_id=None, image_id=None) -> VisualFeatureMap:
    """Encode one (3, H0, W0) image into a (H, W, C) feature map."""
    image = np.asarray(image)
    if not np.all(np.isfinite(image)):
        raise ValidationError("image contains non-finite values")
    fmap = encoder(image[None])
    return VisualFeatureMap(fmap.reshape(fmap.shape[1:]), source_id, image_id)


def text_encode(tokens, encoder: TextEncoder, rng: np.random.Generator | None = None) -> TextFeatureSequence:
    """Encode one caption (list of vocabulary ids, without SOS/EOS)."""
    cfg = encoder.cfg
    framed = frame_tokens([tokens], cfg.L_max, cfg.vocab_size)
    feats = encoder(framed.tokens, framed.mask, rng)
    return TextFeatureSequence(
        feats.reshape(feats.shape[1:]), framed.mask[0], int(framed.eos_index[0]), bool(framed.truncated[0])
    )


def partition_stripes(fmap, K: int) -> list:
    """Split a (H, W, C) or (B, H, W, C) map into K horizontal stripes, top to bottom."""
    features = fmap.features if isinstance(fmap, VisualFeatureMap) else as_tensor(fmap)
    H = features.shape[-3]
    if K < 1 or H % K:
        raise ConfigurationError(f"cannot split height {H} into K={K} equal stripes")
    h = H // K
    return [features[..., k * h : (k + 1) * h, :, :] for k in range(K)]


def stripe_tokens(fmap: Tensor, K: int) -> Tensor:
    """(B, H, W, C) -> (B, K, (H/K)*W, C); pixel order within a stripe is row-major."""
    B, H, W, C = fmap.shape
    if H % K:
        raise ConfigurationError(f"cannot split height {H} into K={K} equal stripes")
    return fmap.reshape(B, K, (H // K) * W, C)
