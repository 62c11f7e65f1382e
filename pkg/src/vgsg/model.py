"""The full VGSG model with ablation switches.

Training-time forward produces every loss part; inference only ever touches
the global branch and the student local branch (no pairwise image-caption
computation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses as LS
from .encoders import AttentionPool, EncoderConfig, FramedTokens, TextEncoder, VisualEncoder, frame_tokens, stripe_tokens
from .errors import ConfigurationError
from .numerics import functional as F
from .numerics.nn import Linear, Module, ModuleList
from .numerics.tensor import Tensor, no_grad, stack
from .sgtl import SGTL, LocalConvText, SGTLConfig, eos_rows, local_similarity
from .vgkt import VGKT, StripeClassifier, class_probability_transfer_loss, feature_transfer_loss
from .vgkt import relation_matrix, similarity_transfer_loss, teacher_similarity

TRANSFER_MODES = ("none", "feature", "similarity", "class_prob", "both")

# component ablation, rows of the component table: (use_local_conv, use_sgtl, use_vgkt, transfer_mode)
ABLATIONS = {
    "baseline": (False, False, False, "none"),
    "local": (True, False, False, "none"),
    "sgtl": (False, True, False, "none"),
    "local+vgkt": (True, False, True, "both"),
    "full": (False, True, True, "both"),
}

# short CLI names for the transfer variants
TRANSFER_ALIASES = {"none": "none", "feature": "feature", "st": "similarity", "cpt": "class_prob", "both": "both"}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sgtl: SGTLConfig = field(default_factory=SGTLConfig)
    num_classes: int = 200
    use_local_conv: bool = False
    use_sgtl: bool = True
    use_vgkt: bool = True
    transfer_mode: str = "both"

    def __post_init__(self):
        if self.transfer_mode not in TRANSFER_MODES:
            raise ConfigurationError(f"transfer_mode must be one of {TRANSFER_MODES}, got {self.transfer_mode!r}")
        if self.use_local_conv and self.use_sgtl:
            raise ConfigurationError("use_local_conv and use_sgtl are alternative local text branches")
        if self.use_vgkt and not self.has_local:
            raise ConfigurationError("use_vgkt requires a local branch (use_sgtl or use_local_conv)")
        if self.transfer_mode != "none" and not self.use_vgkt:
            raise ConfigurationError(f"transfer_mode={self.transfer_mode!r} requires use_vgkt")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")

    @property
    def has_local(self) -> bool:
        return self.use_local_conv or self.use_sgtl

    @classmethod
    def for_ablation(cls, name: str, **kw) -> "ModelConfig":
        if name not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        lc, sg, vg, tm = ABLATIONS[name]
        return cls(use_local_conv=lc, use_sgtl=sg, use_vgkt=vg, transfer_mode=tm, **kw)


@dataclass
class ForwardOutput:
    parts: dict  # loss name -> scalar Tensor
    S_g: Tensor
    S_l: Tensor | None = None
    S_v: Tensor | None = None
    M_s: Tensor | None = None
    M_v: Tensor | None = None
    P_s: Tensor | None = None  # (K, B, N)
    P_v: Tensor | None = None


def _frozen(store: dict | None, key: str, value: Tensor) -> Tensor:
    if store is None:
        return value
    if key in store:
        return Tensor(store[key])
    store[key] = value.data.copy()
    return value


def trim(framed: FramedTokens) -> FramedTokens:
    """Drop trailing all-padding columns."""
    L = int(framed.eos_index.max()) + 1
    return FramedTokens(framed.tokens[:, :L], framed.mask[:, :L], framed.eos_index, framed.truncated)


class VGSGModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        e = cfg.encoder
        self.visual = VisualEncoder(e, rng)
        self.text = TextEncoder(e, rng)
        self.pool_global = AttentionPool(e.C, rng)
        self.text_proj = Linear(e.C_T, e.C, rng)
        self.global_cls = Linear(e.C, cfg.num_classes, rng, std=0.01)
        if cfg.has_local:
            self.pool_local = ModuleList(AttentionPool(e.C, rng) for _ in range(e.K))
            if cfg.use_sgtl:
                self.sgtl = SGTL(e.C_T, e.C, e.K, cfg.sgtl, rng)
            else:
                self.local_conv = LocalConvText(e.C_T, e.C, e.K, rng)
            self.local_cls = StripeClassifier(e.K, e.C, cfg.num_classes, rng)
        if cfg.use_vgkt:
            self.vgkt = VGKT(e.C_T, e.C, e.K, cfg.num_classes, rng)

    # -- pieces ---------------------------------------------------------
    def frame(self, captions) -> FramedTokens:
        e = self.cfg.encoder
        return trim(frame_tokens(captions, e.L_max, e.vocab_size))

    def local_text(self, T_f, mask, eos_index) -> Tensor:
        branch = self.sgtl if self.cfg.use_sgtl else self.local_conv
        return branch(T_f, mask, eos_index)

    def local_visual(self, V_f) -> Tensor:
        tokens = stripe_tokens(V_f, self.cfg.encoder.K)
        return stack([pool(tokens[:, k]) for k, pool in enumerate(self.pool_local)], axis=1)

    def global_visual(self, V_f) -> Tensor:
        B, H, W, C = V_f.shape
        return self.pool_global(V_f.reshape(B, H * W, C))

    def global_text(self, T_f, eos_index) -> Tensor:
        return self.text_proj(eos_rows(T_f, eos_index))

    # -- training -------------------------------------------------------
    def forward_train(
        self, images, captions, labels, w: LS.LossWeights, rng: np.random.Generator, frozen_teacher: dict | None = None
    ) -> ForwardOutput:
        """One training forward. ``labels`` are class indices in [0, num_classes).

        ``frozen_teacher`` is for finite-difference checks: an empty dict is
        filled with the teacher targets of this call, and a filled one replaces
        them, so the oracle sees the same constants the stop-gradient does.
        """
        cfg = self.cfg
        framed = self.frame(captions)
        V_f = self.visual(images)
        T_f = self.text(framed.tokens, framed.mask, rng)
        V_g = self.global_visual(V_f)
        T_g = self.global_text(T_f, framed.eos_index)
        S_g = F.cosine_matrix(V_g, T_g)
        ids = [self.global_cls(V_g), self.global_cls(T_g)]
        con = [LS.batch_contrastive(S_g, labels, w)]
        out = ForwardOutput(parts={}, S_g=S_g)

        if cfg.has_local:
            V_l = self.local_visual(V_f)
            T_l = self.local_text(T_f, framed.mask, framed.eos_index)
            S_l = local_similarity(V_l, T_l)
            con.append(LS.batch_contrastive(S_l, labels, w))
            logits_s = self.local_cls(T_l)
            ids += [self.local_cls(V_l), logits_s]
            out.S_l = S_l

        if cfg.use_vgkt:
            VT_all = self.vgkt(V_f, T_f, framed.mask, pairwise=True)  # (B, B, K, C)
            B = V_f.shape[0]
            rows = np.arange(B)
            VT_l = VT_all[rows, rows]  # matched pairs, (B, K, C)
            S_v = teacher_similarity(V_l, VT_all)
            con.append(LS.batch_contrastive(S_v, labels, w))
            logits_v = self.vgkt.classifier(VT_l)
            ids.append(logits_v)
            out.S_v = S_v
            mode = cfg.transfer_mode
            if mode in ("similarity", "both"):
                M_v = _frozen(frozen_teacher, "M_v", relation_matrix(S_v, w.tau).values)
                M_s = relation_matrix(S_l, w.tau).values
                out.parts["st"] = similarity_transfer_loss(M_s, M_v)
                out.M_s, out.M_v = M_s, M_v
            if mode in ("class_prob", "both"):
                P_v = _frozen(frozen_teacher, "P_v", F.softmax(logits_v, axis=-1))
                P_s = F.softmax(logits_s, axis=-1)
                out.parts["cpt"] = class_probability_transfer_loss(P_s, P_v)
                out.P_s, out.P_v = P_s, P_v
            if mode == "feature":
                out.parts["ft"] = feature_transfer_loss(T_l, _frozen(frozen_teacher, "VT_l", VT_l))

        id_total = None
        for logits in ids:
            term = LS.id_loss(logits, labels, w.label_smoothing)
            id_total = term if id_total is None else id_total + term
        con_total = con[0]
        for c in con[1:]:
            con_total = con_total + c
        out.parts = {"id": id_total, "con": con_total, **out.parts}
        return out

    # -- inference ------------------------------------------------------
    def encode_images(self, images, chunk: int = 64):
        """(N, 3, H0, W0) -> global (N, C) and local (N, K, C) or None, without gradients."""
        g, l = [], []
        with no_grad():
            for s in range(0, len(images), chunk):
                V_f = self.visual(images[s : s + chunk])
                g.append(self.global_visual(V_f).data)
                if self.cfg.has_local:
                    l.append(self.local_visual(V_f).data)
        return np.concatenate(g), (np.concatenate(l) if l else None)

    def encode_texts(self, captions, chunk: int = 64):
        g, l = [], []
        with no_grad():
            for s in range(0, len(captions), chunk):
                framed = self.frame(captions[s : s + chunk])
                T_f = self.text(framed.tokens, framed.mask, None)
                g.append(self.global_text(T_f, framed.eos_index).data)
                if self.cfg.has_local:
                    l.append(self.local_text(T_f, framed.mask, framed.eos_index).data)
        return np.concatenate(g), (np.concatenate(l) if l else None)


def parameter_groups(model: VGSGModel) -> set[str]:
    """Top-level component names that own parameters, e.g. {'visual', 'text', 'sgtl', ...}."""
    return {name.split(".", 1)[0] for name, _ in model.named_parameters()}
