"""Finite-difference verification suite behind ``vgsg gradcheck``.

Two layers: one small case per registered backward rule (so a broken rule is
named directly), then every model variant end to end on a tiny float64
configuration with stochastic depth off, probing every parameter coordinate.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .encoders import EncoderConfig
from .losses import LossWeights, total_loss
from .model import ABLATIONS, ModelConfig, VGSGModel
from .numerics import functional as F
from .numerics.gradcheck import GradCheckReport, grad_check
from .numerics.nn import MaskedBatchNorm
from .numerics.tensor import BACKWARD_RULES, Parameter, Tensor
from .numerics import tensor as T
from .sgtl import SGTLConfig
from .synthdata import GenerationConfig, generate, sample_batch


def _p(rng, *shape, positive=False, name=""):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Parameter(x, name=name)


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (f, params). Each case reduces to a scalar through a fixed random projection."""

    def proj(shape):
        return rng.normal(size=shape)

    a, b = _p(rng, 3, 4, name="a"), _p(rng, 3, 4, name="b")
    pos = _p(rng, 3, 4, positive=True, name="pos")
    m1, m2 = _p(rng, 2, 3, 4, name="m1"), _p(rng, 4, 5, name="m2")
    w34, w35, w24 = proj((3, 4)), proj((2, 3, 5)), proj((2, 4))
    w_t, w_g, w_cat, w_st = proj((4, 2, 3)), proj((2, 2)), proj((5, 4)), proj((3, 2, 4))
    w_cos, w_pool, w_bn = proj((2, 3)), proj((2, 2, 2, 3)), proj((2, 5, 4))
    mask = np.array([[True, True, False, True]] * 3)
    x_img = _p(rng, 2, 4, 4, 3, name="x")
    k_conv = _p(rng, 3, 3, 3, 2, name="w")
    b_conv = _p(rng, 2, name="bias")
    w_conv = proj((2, 4, 4, 2))
    gain, bias = _p(rng, 4, name="gain"), _p(rng, 4, name="bias")
    c1, c2 = _p(rng, 2, 4, name="c1"), _p(rng, 3, 4, name="c2")
    idx = np.array([2, 0, 2])

    def s(x, w):
        return (x * w).sum()

    cases = {
        "add": (lambda: s(a + b[0], w34), [a, b]),
        "sub": (lambda: s(a - b, w34), [a, b]),
        "mul": (lambda: s(a * b, w34), [a, b]),
        "div": (lambda: s(a / pos, w34), [a, pos]),
        "neg": (lambda: s(-a, w34), [a]),
        "power": (lambda: s(pos**1.5, w34), [pos]),
        "exp": (lambda: s(a.exp(), w34), [a]),
        "log": (lambda: s(pos.log(), w34), [pos]),
        "sqrt": (lambda: s(pos.sqrt(), w34), [pos]),
        "tanh": (lambda: s(a.tanh(), w34), [a]),
        "clip_min": (lambda: s(T.clip_min(pos, 0.01), w34), [pos]),
        "matmul": (lambda: s(m1 @ m2, w35), [m1, m2]),
        "sum": (lambda: s(a.sum(axis=1, keepdims=True) * a, w34), [a]),
        "reshape": (lambda: s(a.reshape(4, 3), w34.reshape(4, 3)), [a]),
        "transpose": (lambda: s(m1.transpose(2, 0, 1), w_t), [m1]),
        "getitem": (lambda: s(a[1:, ::2], w_g) + s(a[idx], w34), [a]),
        "concat": (lambda: s(T.concat([c1, c2], axis=0), w_cat), [c1, c2]),
        "stack": (lambda: s(T.stack([a, b], axis=1), w_st), [a, b]),
        "softmax": (lambda: s(F.softmax(a, axis=-1, mask=mask), w34), [a]),
        "log_softmax": (lambda: s(F.log_softmax(a, axis=-1), w34), [a]),
        "layer_norm": (lambda: s(F.layer_norm(a, gain, bias), w34), [a, gain, bias]),
        "gelu": (lambda: s(F.gelu(a), w34), [a]),
        "softplus": (lambda: s(F.softplus(a), w34), [a]),
        "conv2d": (lambda: s(F.conv2d(x_img, k_conv, b_conv), w_conv), [x_img, k_conv, b_conv]),
    }
    # composite functions built from the primitives above
    bn = MaskedBatchNorm(4)
    bn.astype(np.float64)
    seq = _p(rng, 2, 5, 4, name="seq")
    seq_mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    p_rows = F.softmax(Tensor(rng.normal(size=(3, 4))), axis=-1).data
    cases.update({
        "cosine_matrix": (lambda: s(F.cosine_matrix(c1, c2), w_cos), [c1, c2]),
        "kl_divergence": (lambda: F.kl_divergence(p_rows, F.softmax(a, axis=-1)), [a]),
        "avg_pool2x2": (lambda: s(F.avg_pool2x2(x_img), w_pool), [x_img]),
        "masked_mean": (lambda: s(F.masked_mean(seq, seq_mask, axis=1), w24), [seq]),
        "masked_batch_norm": (lambda: s(bn(seq, seq_mask), w_bn), [seq, bn.gain, bn.bias]),
        "mean": (lambda: s(a.mean(axis=0) * a, w34), [a]),
    })
    return cases


def tiny_setup(seed: int = 0):
    gcfg = GenerationConfig(seed=seed, n_train=4, n_test=0, samples_per_identity=2, noise_level=0.1,
                            K=2, image_height=16, image_width=8, palette_size=4)
    ds = generate(gcfg)
    enc = EncoderConfig(C=4, C_T=4, H=4, W=2, L_max=12, vocab_size=ds.vocab_size, text_layers=1,
                        drop_path_rate=0.0, K=2, heads=2, mlp_ratio=2)
    batch = sample_batch(ds, np.random.default_rng([seed, 3]), 8, 2)
    labels = np.searchsorted(ds.identities("train"), batch.identities)
    return enc, batch, labels


def model_variants() -> dict:
    """name -> (ModelConfig overrides, SGTLConfig overrides, LossWeights overrides)."""
    out = {}
    for name, (lc, sg, vg, tm) in ABLATIONS.items():
        out[f"model:{name}"] = (dict(use_local_conv=lc, use_sgtl=sg, use_vgkt=vg, transfer_mode=tm), {}, {})
    full = dict(use_local_conv=False, use_sgtl=True, use_vgkt=True)
    for tm in ("none", "feature", "similarity", "class_prob"):
        out[f"model:full/transfer={tm}"] = ({**full, "transfer_mode": tm}, {}, {})
    sgtl = dict(use_local_conv=False, use_sgtl=True, use_vgkt=False, transfer_mode="none")
    out["model:sgtl/word-query"] = (sgtl, {"use_text_query": False}, {})
    out["model:sgtl/no-channel-group"] = (sgtl, {"use_channel_group": False}, {})
    out["model:sgtl/word-query,no-channel-group"] = (sgtl, {"use_text_query": False, "use_channel_group": False}, {})
    out["model:full/eos=global,layer-norm,shared-proj"] = (
        {**full, "transfer_mode": "both"},
        {"eos_source": "global", "projection_norm": "layer", "shared_output_projection": True},
        {},
    )
    out["model:full/all-negatives"] = ({**full, "transfer_mode": "both"}, {}, {"negatives": "all"})
    return out


def model_case(name: str, seed: int = 0):
    mo, so, wo = model_variants()[name]
    enc, batch, labels = tiny_setup(seed)
    sgtl_cfg = dataclasses.replace(SGTLConfig(heads=2, mlp_ratio=2), **so)
    cfg = ModelConfig(encoder=enc, sgtl=sgtl_cfg, num_classes=4, **mo)
    model = VGSGModel(cfg, np.random.default_rng([seed, 11]))
    # At the 0.02 init scale the first LayerNorm sees almost no spread across
    # 4 channels; its curvature then makes step-1e-5 differences carry ~1e-4
    # truncation error (shrinking as step**2), so probe at a wider point.
    for p in (model.text.token_embedding.weight, model.text.position_embedding):
        p.data = p.data * 25.0
    model.train()
    w = LossWeights(**wo)
    rng = np.random.default_rng(0)
    named = [(n, p) for n, p in model.named_parameters() if p.trainable]
    ref, frozen = {}, {}

    def f():
        out = model.forward_train(batch.images, batch.captions, labels, w, rng, frozen_teacher=frozen)
        loss = total_loss(out.parts, w)
        # bring the loss to O(1) so rounding noise stays below the relative-error floor
        scale = ref.setdefault("scale", 1.0 / max(abs(float(loss.data)), 1.0))
        return loss * scale

    return f, [p for _, p in named], [n for n, _ in named]


def run_suite(seed: int = 0, tol: float = 1e-4, step: float = 1e-5, only=()) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    reports = []

    def wanted(name):
        return not only or any(o in name for o in only)

    cases = op_cases(rng)
    missing = set(BACKWARD_RULES) - set(cases)
    for name in sorted(missing):
        reports.append(GradCheckReport(f"op:{name}", float("inf"), False, 0, message="no verification case"))
    for name, (f, params) in cases.items():
        if wanted(f"op:{name}"):
            reports.append(grad_check(f, params, step=step, tol=tol, name=f"op:{name}",
                                      names=[p.name or f"p{i}" for i, p in enumerate(params)]))
    for name in model_variants():
        if wanted(name):
            f, params, names = model_case(name, seed)
            reports.append(grad_check(f, params, step=step, tol=tol, name=name, names=names))
    return reports
