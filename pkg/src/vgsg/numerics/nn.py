"""Minimal module system: parameter discovery, train/eval modes, state dicts."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DimensionError, Parameter, Tensor, as_tensor


class Module:
    training = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield f"{prefix}{name}", value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def mark_teacher(self) -> "Module":
        for p in self.parameters():
            p.teacher = True
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for m in self.modules():
            for k, v in m._buffers.items():
                m._buffers[k] = v.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param:{n}": p.data.copy() for n, p in self.named_parameters()}
        state.update({f"buffer:{n}": b.copy() for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = {f"param:{n}" for n in params} | {f"buffer:{n}" for n, _ in self.named_buffers()}
        missing = expected - set(state)
        unexpected = {k for k in state if k.startswith(("param:", "buffer:"))} - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for n, p in params.items():
            value = np.asarray(state[f"param:{n}"])
            if value.shape != p.shape:
                raise DimensionError(f"{n}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
        for m_prefix, m in self._prefixed_modules():
            for k in list(m._buffers):
                m._buffers[k] = np.array(state[f"buffer:{m_prefix}{k}"], dtype=m._buffers[k].dtype)

    def _prefixed_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value._prefixed_modules(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = list(modules)

    def _children(self):
        for i, m in enumerate(self._items):
            yield str(i), m

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, std: float | None = None):
        super().__init__()
        std = 1.0 / math.sqrt(in_dim) if std is None else std
        self.weight = Parameter(_normal(rng, (in_dim, out_dim), std))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x) -> Tensor:
        out = as_tensor(x, self.weight) @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        self.weight = Parameter(_normal(rng, (num, dim), std))

    def forward(self, ids: np.ndarray) -> Tensor:
        return self.weight[np.asarray(ids)]


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with separate Q/K/V/output projections.

    Inputs carry arbitrary leading batch axes: query (..., Lq, D), key/value
    (..., Lk, D). ``key_mask`` (True = valid) must broadcast to (..., Lk).
    The most recent attention weights are kept in ``last_weights``.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise DimensionError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, L, D = x.shape
        return x.reshape(*lead, L, self.heads, self.head_dim).swapaxes(-2, -3)

    def forward(self, query, key, value, key_mask=None) -> Tensor:
        q = self._split(self.q(query))
        k = self._split(self.k(key))
        v = self._split(self.v(value))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        mask = None
        if key_mask is not None:
            m = np.asarray(key_mask, dtype=bool)
            mask = m[..., None, None, :]
        attn = F.softmax(scores, axis=-1, mask=mask)
        self.last_weights = attn.data
        ctx = (attn @ v).swapaxes(-2, -3)
        *lead, Lq, h, d = ctx.shape
        return self.out(ctx.reshape(*lead, Lq, h * d))


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, kernel=(3, 3), bias: bool = True):
        super().__init__()
        kh, kw = kernel
        std = 1.0 / math.sqrt(cin * kh * kw)
        self.weight = Parameter(_normal(rng, (kh, kw, cin, cout), std))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x) -> Tensor:
        return F.conv2d(x, self.weight, self.bias)


class MaskedBatchNorm(Module):
    """Per-feature normalisation over all valid (sample, token) positions.

    Training uses batch statistics restricted to ``mask``; evaluation uses the
    running averages.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(dim))
        self.register_buffer("running_var", np.ones(dim))

    def forward(self, x, mask) -> Tensor:
        x = as_tensor(x)
        m = np.asarray(mask, dtype=x.dtype)[..., None]
        if self.training:
            n = m.sum()
            if n < 1:
                raise DimensionError("MaskedBatchNorm needs at least one valid position")
            lead = tuple(range(x.ndim - 1))
            mu = (x * m).sum(axis=lead) / n
            centred = x - mu
            var = (centred * centred * m).sum(axis=lead) / n
            xhat = centred / (var + self.eps).sqrt()
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            self._buffers["running_mean"] = (1 - self.momentum) * rm + self.momentum * mu.data
            self._buffers["running_var"] = (1 - self.momentum) * rv + self.momentum * var.data
        else:
            mu = self._buffers["running_mean"]
            var = self._buffers["running_var"]
            xhat = (x - mu) / np.sqrt(var + self.eps)
        return xhat * self.gain + self.bias
