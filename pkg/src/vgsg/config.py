"""Run configuration: one flat, hashable view of every hyperparameter."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .encoders import EncoderConfig
from .errors import ConfigurationError
from .kvfile import format_kv, parse_kv
from .losses import LossWeights
from .sgtl import SGTLConfig

# keys left out of the hash: where things live does not change what is computed
UNHASHED = ("data", "out")
# SGTL switches are owned by the train section and copied into the SGTL config
MIRRORED = {"sgtl.use_text_query": "train.use_text_query", "sgtl.use_channel_group": "train.use_channel_group"}


@dataclass
class TrainConfig:
    epochs: int = 30
    decay_epoch: int = 24
    base_lr: float = 1e-3  # published 3.5e-4 is too slow for 30 desk epochs
    lr_decay_factor: float = 0.1
    text_lr_scale: float = 1.0  # text-encoder lr = base lr * scale
    batch_size: int = 32
    per_identity: int = 4
    grad_clip: float = 5.0  # global-norm clip, 0 disables
    seed: int = 0
    dtype: str = "float32"
    weights: LossWeights = field(default_factory=LossWeights)
    use_local_conv: bool = False
    use_sgtl: bool = True
    use_vgkt: bool = True
    use_text_query: bool = True
    use_channel_group: bool = True
    transfer_mode: str = "both"
    debug_checks: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.epochs > 0 and not 0 <= self.decay_epoch < self.epochs:
            raise ConfigurationError(f"decay_epoch={self.decay_epoch} must lie in [0, epochs={self.epochs})")
        if self.base_lr < 0 or self.text_lr_scale < 0:
            raise ConfigurationError("learning rates must be non-negative")
        if self.batch_size < 1 or self.per_identity < 1 or self.batch_size % self.per_identity:
            raise ConfigurationError(
                f"batch_size={self.batch_size} must be a positive multiple of per_identity={self.per_identity}"
            )
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.grad_clip < 0:
            raise ConfigurationError("grad_clip must be >= 0")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        """Published schedule: 50 epochs, lr 3.5e-4 decayed after 40, batch 96 with 4 pairs per identity, no clipping."""
        base = dict(epochs=50, decay_epoch=40, base_lr=3.5e-4, batch_size=96, per_identity=4, grad_clip=0.0)
        base.update(kw)
        return cls(**base)

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * (self.lr_decay_factor if epoch >= self.decay_epoch else 1.0)


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sgtl: SGTLConfig = field(default_factory=SGTLConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str = ""
    out: str = ""

    def __post_init__(self):
        self.sgtl = dataclasses.replace(
            self.sgtl, use_text_query=self.train.use_text_query, use_channel_group=self.train.use_channel_group
        )

    def to_items(self) -> dict:
        return {k: v for k, v in _flatten(self).items() if k not in MIRRORED}

    def serialize(self) -> str:
        return format_kv(self.to_items())

    def hash(self) -> str:
        items = {k: v for k, v in self.to_items().items() if k not in UNHASHED}
        return hashlib.sha256(format_kv(items).encode()).hexdigest()[:16]

    @classmethod
    def from_items(cls, items: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Overlay ``items`` (flat dotted keys, string or typed values) on ``base``."""
        flat = (base or cls()).to_items()
        for k, v in items.items():
            if k not in flat:
                raise ConfigurationError(f"unknown config key {k!r}")
            flat[k] = v
        return _build(cls, flat, "")

    @classmethod
    def parse(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_items(parse_kv(text, "<config>"), base)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = _fmt(v)
    return out


def _coerce(text, like, key: str):
    if not isinstance(text, str):
        return text
    try:
        if isinstance(like, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError as e:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from e
    return text


def _build(cls, flat: dict, prefix: str):
    default = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        like = getattr(default, f.name)
        if dataclasses.is_dataclass(like):
            kwargs[f.name] = _build(type(like), flat, key + ".")
        elif key in flat:
            kwargs[f.name] = _coerce(flat[key], like, key)
    return cls(**kwargs)
