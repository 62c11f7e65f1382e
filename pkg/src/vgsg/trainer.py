"""Training loop: Adam, step-decay schedule, checkpoints and resume."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synthdata as sd
from .config import RunConfig, TrainConfig
from .errors import IntegrityError, TrainingDivergence
from .losses import TERMS, total_loss
from .model import ModelConfig, VGSGModel

log = logging.getLogger(__name__)

CHECKPOINT_FINAL = "final.npz"
CHECKPOINT_BEST = "best.npz"
LOG_NAME = "train_log.jsonl"


class CheckpointWriteError(OSError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def build_model(cfg: RunConfig, num_classes: int) -> VGSGModel:
    t = cfg.train
    mcfg = ModelConfig(
        encoder=cfg.encoder,
        sgtl=cfg.sgtl,
        num_classes=num_classes,
        use_local_conv=t.use_local_conv,
        use_sgtl=t.use_sgtl,
        use_vgkt=t.use_vgkt,
        transfer_mode=t.transfer_mode,
    )
    model = VGSGModel(mcfg, np.random.default_rng([t.seed, 7]))
    return model.astype(np.dtype(t.dtype))


def adam_update(model: VGSGModel, state: AdamState, lr: float, text_lr_scale: float = 1.0, clip: float = 0.0) -> float:
    """One Adam step on every trainable parameter; returns the pre-clip global gradient norm."""
    params = [(n, p) for n, p in model.named_parameters() if p.trainable]
    norm = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for _, p in params)))
    scale = clip / norm if clip > 0 and norm > clip else 1.0
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, p in params:
        g = p.grad * scale if scale != 1.0 else p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        step_lr = lr * text_lr_scale if name.startswith("text.") else lr
        if step_lr == 0.0:
            continue
        p.data -= (step_lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return norm


def distillation_loss(parts: dict, w):
    terms = []
    if "st" in parts:
        terms.append(parts["st"] * w.lambda1)
    if "cpt" in parts:
        terms.append(parts["cpt"] * w.lambda2)
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def check_stop_gradient(model: VGSGModel, parts: dict, w) -> None:
    """Backward the distillation terms alone and require zero gradient on the teacher."""
    d = distillation_loss(parts, w)
    if d is None:
        return
    model.zero_grad()
    d.backward()
    leaked = [n for n, p in model.named_parameters() if p.teacher and np.any(p.grad != 0)]
    model.zero_grad()
    if leaked:
        raise AssertionError(f"distillation gradient reached teacher parameters: {leaked}")


@dataclass
class StepResult:
    parts: dict  # name -> float
    total: float
    grad_norm: float


def train_step(model, batch: sd.Batch, labels, opt: AdamState, cfg: TrainConfig, lr: float, rng, dump_dir=None):
    w = cfg.weights
    model.train()
    out = model.forward_train(batch.images, batch.captions, labels, w, rng)
    try:
        total = total_loss(out.parts, w)
    except TrainingDivergence as e:
        if dump_dir is not None:
            e.dump_path = dump_batch(batch, dump_dir)
        raise
    if cfg.debug_checks:
        check_stop_gradient(model, out.parts, w)
    model.zero_grad()
    total.backward()
    norm = adam_update(model, opt, lr, cfg.text_lr_scale, cfg.grad_clip)
    parts = {k: float(v.data) for k, v in out.parts.items()}
    return StepResult(parts, float(total.data), norm)


def dump_batch(batch: sd.Batch, directory) -> str:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "divergent_batch.npz"
    L = max(len(c) for c in batch.captions)
    caps = np.full((len(batch.captions), L), -1, dtype=np.int64)
    for i, c in enumerate(batch.captions):
        caps[i, : len(c)] = c
    np.savez(path, images=batch.images, captions=caps, identities=batch.identities)
    return str(path)


# --------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    epoch: int  # completed epochs
    config: RunConfig
    config_hash: str
    dataset_fingerprint: str
    class_ids: np.ndarray  # train identity id of each class index
    state: dict
    opt: AdamState
    best_loss: float
    log: list


def save_checkpoint(path, model: VGSGModel, ck: Checkpoint) -> Path:
    path = Path(path)
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    for name, m in ck.opt.m.items():
        arrays[f"adam_m/{name}"] = m
        arrays[f"adam_v/{name}"] = ck.opt.v[name]
    meta = {
        "config_hash": ck.config_hash,
        "epoch": ck.epoch,
        "config": ck.config.serialize(),
        "dataset_fingerprint": ck.dataset_fingerprint,
        "adam_t": ck.opt.t,
        "best_loss": ck.best_loss,
        "rng": {"seed_sequence": [ck.config.train.seed, ck.epoch]},
        "log": ck.log,
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(meta)), class_ids=ck.class_ids, **arrays)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointWriteError(f"cannot write checkpoint {path}: {e}") from e
    return path


def read_checkpoint(path) -> tuple[Checkpoint, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["header"]))
        arrays = {k: z[k] for k in z.files}
    cfg = RunConfig.parse(meta["config"])
    state = {k[len("model/") :]: v for k, v in arrays.items() if k.startswith("model/")}
    opt = AdamState(t=int(meta["adam_t"]))
    for k, v in arrays.items():
        if k.startswith("adam_m/"):
            opt.m[k[7:]] = v.copy()
        elif k.startswith("adam_v/"):
            opt.v[k[7:]] = v.copy()
    ck = Checkpoint(
        epoch=int(meta["epoch"]),
        config=cfg,
        config_hash=meta["config_hash"],
        dataset_fingerprint=meta["dataset_fingerprint"],
        class_ids=arrays["class_ids"],
        state=state,
        opt=opt,
        best_loss=float(meta["best_loss"]),
        log=meta["log"],
    )
    return ck, meta


def load_model(path) -> tuple[VGSGModel, Checkpoint]:
    ck, _ = read_checkpoint(path)
    model = build_model(ck.config, len(ck.class_ids))
    model.load_state_dict(ck.state)
    model.eval()
    return model, ck


# --------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: VGSGModel
    log: list  # per-epoch records
    steps: list = field(default_factory=list)  # per-step StepResult
    final: Path | None = None
    best: Path | None = None
    config_hash: str = ""


def class_index(ds: sd.Dataset) -> np.ndarray:
    return ds.identities("train")


def run(
    cfg: RunConfig,
    ds: sd.Dataset,
    out_dir,
    resume=None,
    stop_after: int | None = None,
    quiet: bool = False,
) -> TrainResult:
    """Train for ``cfg.train.epochs`` epochs, writing checkpoints and a JSONL log to ``out_dir``.

    ``stop_after`` ends the run after that many completed epochs, as an
    interruption would; ``resume`` continues from a checkpoint path.
    """
    t = cfg.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    class_ids = class_index(ds)
    model = build_model(cfg, len(class_ids))
    opt = AdamState()
    start, best_loss, records = 0, float("inf"), []
    chash = cfg.hash()
    if resume is not None:
        ck, _ = read_checkpoint(resume)
        if ck.config_hash != chash:
            raise IntegrityError(f"checkpoint config hash {ck.config_hash} != run config hash {chash}")
        if ck.dataset_fingerprint != ds.fingerprint():
            raise IntegrityError("checkpoint was trained on a different dataset")
        model.load_state_dict(ck.state)
        opt, start, best_loss, records = ck.opt, ck.epoch, ck.best_loss, list(ck.log)

    def checkpoint(epoch):
        return Checkpoint(epoch, cfg, chash, ds.fingerprint(), class_ids, {}, opt, best_loss, records)

    log_path = out_dir / LOG_NAME
    if resume is None:
        log_path.write_text("")
    final = out_dir / CHECKPOINT_FINAL
    best = out_dir / CHECKPOINT_BEST
    if t.epochs == 0 or start == 0 and resume is None:
        save_checkpoint(final, model, checkpoint(0))
    steps = []
    end = t.epochs if stop_after is None else min(t.epochs, stop_after)
    for epoch in range(start, end):
        rng = np.random.default_rng([t.seed, epoch])
        lr = t.lr_at(epoch)
        tic = time.perf_counter()
        sums = {k: 0.0 for k in TERMS}
        seen, total, n = set(), 0.0, 0
        for batch in sd.iterate_epoch(ds, rng, t.batch_size, t.per_identity):
            labels = np.searchsorted(class_ids, batch.identities)
            res = train_step(model, batch, labels, opt, t, lr, rng, dump_dir=out_dir)
            steps.append(res)
            for k, v in res.parts.items():
                sums[k] += v
                seen.add(k)
            total += res.total
            n += 1
        rec = {"epoch": epoch, "lr": lr, "steps": n}
        rec.update({k: sums[k] / max(n, 1) for k in TERMS if k in seen})
        rec["total"] = total / max(n, 1)
        rec["wall_time"] = round(time.perf_counter() - tic, 3)
        records.append(rec)
        with open(log_path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        if not quiet:
            log.info("epoch %d  lr %.2e  total %.4f  (%.1fs)", epoch, lr, rec["total"], rec["wall_time"])
        if rec["total"] < best_loss:
            best_loss = rec["total"]
            save_checkpoint(best, model, checkpoint(epoch + 1))
        save_checkpoint(final, model, checkpoint(epoch + 1))
    if not best.exists():
        save_checkpoint(best, model, checkpoint(start))
    model.eval()
    return TrainResult(model, records, steps, final, best, chash)
