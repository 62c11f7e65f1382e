"""Fused differentiable kernels built on :mod:`vgsg.numerics.tensor`."""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    DegenerateInputError,
    DimensionError,
    Tensor,
    ValidationError,
    as_tensor,
    clip_min,
    log,
    record,
    rule,
    sqrt,
    tsum,
)

KL_FLOOR = 1e-12


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-stabilised softmax. ``mask`` (True = valid) zeroes excluded entries exactly."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis (shape {x.shape})")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise DegenerateInputError("softmax slice has no valid (unmasked) entries")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return record(out, (x,), "softmax", saved=(out, axis))


@rule("softmax")
def _softmax_back(node, g):
    out, axis = node.saved
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return record(out, (x,), "log_softmax", saved=(out, axis))


@rule("log_softmax")
def _log_softmax_back(node, g):
    out, axis = node.saved
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    n = x.shape[-1]
    if n < 2:
        raise DimensionError(f"layer_norm needs a normalised dimension >= 2, got {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    parents = [x]
    out = xhat
    if gain is not None:
        out = out * gain.data
        parents.append(gain)
    if bias is not None:
        out = out + bias.data
        parents.append(bias)
    flags = (gain is not None, bias is not None)
    return record(out, parents, "layer_norm", saved=(xhat, inv, flags))


@rule("layer_norm")
def _layer_norm_back(node, g):
    xhat, inv, (has_gain, has_bias) = node.saved
    x = node._parents[0]
    grads = []
    dxhat = g * node._parents[1].data if has_gain else g
    n = xhat.shape[-1]
    dx = inv / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    grads.append(dx if x.requires_grad else None)
    lead = tuple(range(g.ndim - 1))
    if has_gain:
        grads.append((g * xhat).sum(axis=lead))
    if has_bias:
        grads.append(g.sum(axis=lead))
    return tuple(grads)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    return record(0.5 * x.data * (1.0 + t), (x,), "gelu", saved=t)


@rule("gelu")
def _gelu_back(node, g):
    x = node._parents[0].data
    t = node.saved
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),)


def softplus(x) -> Tensor:
    """log(1 + e^x), overflow-safe."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return record(out.astype(x.dtype, copy=False), (x,), "softplus")


@rule("softplus")
def _softplus_back(node, g):
    x = node._parents[0].data
    return (g * 0.5 * (1.0 + np.tanh(0.5 * x)),)


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 'same' convolution on channel-last input.

    x: (B, H, W, Cin); weight: (kh, kw, Cin, Cout) with odd kh, kw.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel must be odd-sized, got {kh}x{kw}")
    B, H, W, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((B, H, W, cout), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            out += xp[:, dy : dy + H, dx : dx + W, :] @ weight.data[dy, dx]
    parents = [x, weight]
    if bias is not None:
        out += bias.data
        parents.append(bias)
    return record(out, parents, "conv2d", saved=xp)


@rule("conv2d")
def _conv2d_back(node, g):
    x, weight = node._parents[:2]
    xp = node.saved
    kh, kw, cin, cout = weight.shape
    B, H, W, _ = x.shape
    ph, pw = kh // 2, kw // 2
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(weight.data)
    g2 = g.reshape(-1, cout)
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, dy : dy + H, dx : dx + W, :]
            gw[dy, dx] = patch.reshape(-1, cin).T @ g2
            gxp[:, dy : dy + H, dx : dx + W, :] += g @ weight.data[dy, dx].T
    gx = gxp[:, ph : ph + H, pw : pw + W, :]
    grads = [gx, gw]
    if len(node._parents) == 3:
        grads.append(g2.sum(axis=0))
    return tuple(grads)


def avg_pool2x2(x) -> Tensor:
    """2x2 average pooling on channel-last (B, H, W, C)."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"avg_pool2x2 needs even spatial dims, got {H}x{W}")
    return x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))


def l2_norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    return sqrt(tsum(x * x, axis=axis, keepdims=keepdims))


def cosine_similarity(u, v, axis: int = -1) -> Tensor:
    """u.v / (|u||v|) along ``axis``; zero-norm inputs raise rather than return 0."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[axis] != v.shape[axis]:
        raise DimensionError(f"cosine_similarity length mismatch: {u.shape} vs {v.shape}")
    _require_nonzero(u.data, axis, "u")
    _require_nonzero(v.data, axis, "v")
    return tsum(u * v, axis=axis) / (l2_norm(u, axis) * l2_norm(v, axis))


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarities between rows: (n, d) x (m, d) -> (n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    _require_nonzero(a.data, -1, "rows of a")
    _require_nonzero(b.data, -1, "rows of b")
    an = a / l2_norm(a, -1, keepdims=True)
    bn = b / l2_norm(b, -1, keepdims=True)
    return an @ bn.swapaxes(-1, -2)


def _require_nonzero(arr: np.ndarray, axis: int, what: str) -> None:
    norms = np.sqrt((arr * arr).sum(axis=axis))
    bad = np.flatnonzero(np.atleast_1d(norms) == 0.0)
    if bad.size:
        raise DegenerateInputError(f"zero-norm vector in {what} at flat position(s) {bad[:5].tolist()}")


def _check_stochastic(p: np.ndarray, name: str, atol: float = 1e-5) -> None:
    s = p.sum(axis=-1)
    if not np.all(np.abs(s - 1.0) <= atol):
        worst = float(np.max(np.abs(s - 1.0)))
        raise ValidationError(f"{name} rows must sum to 1 (max deviation {worst:.3g})")
    if np.any(p < 0):
        raise ValidationError(f"{name} has negative entries")


def kl_divergence(p, q, floor: float = KL_FLOOR, validate: bool = True) -> Tensor:
    """Mean over rows of sum_j p log(p / q), natural log.

    Pass a detached ``p`` for teacher/student distillation; gradients then only
    reach ``q``.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
    if validate:
        _check_stochastic(p.data, "p")
        _check_stochastic(q.data, "q")
    terms = p * (log(clip_min(p, floor)) - log(clip_min(q, floor)))
    rows = tsum(terms, axis=-1)
    return rows.mean()


def drop_path(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Per-sample stochastic depth on a residual branch (first axis = sample)."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("drop_path in training mode needs an explicit rng")
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep).astype(x.dtype) / keep
    return x * mask


def masked_mean(x, mask, axis: int) -> Tensor:
    """Mean over ``axis`` counting only positions where ``mask`` is true."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=x.dtype)
    m = m.reshape(m.shape + (1,) * (x.ndim - m.ndim))
    count = m.sum(axis=axis, keepdims=True)
    if np.any(count == 0):
        raise DegenerateInputError("masked_mean over a slice with no valid positions")
    return tsum(x * m, axis=axis) / np.squeeze(count, axis=axis)
