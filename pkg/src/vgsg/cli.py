"""Command-line entry point: gen, train, eval, gradcheck, ablate.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 training, 5 integrity, 6 verification.

Configuration precedence (lowest to highest): built-in defaults, ``--config``
file, ``--set key=value`` overrides, then dedicated flags such as ``--epochs``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from functools import partial
from pathlib import Path

from . import evaluator as ev
from . import synthdata as sd
from . import trainer
from .config import RunConfig
from .errors import ConfigurationError, IngestionError, IntegrityError, TrainingDivergence
from .kvfile import KVParseError, read_kv
from .model import ABLATIONS, TRANSFER_ALIASES

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_TRAIN, EXIT_INTEGRITY, EXIT_VERIFY = 0, 2, 3, 4, 5, 6
OUTPUT_ROOT_ENV = "VGSG_OUTPUT_ROOT"
CONFIG_NAME = "config.txt"

# suite -> ordered (row name, config overrides)
SUITES = {
    "components": [(name, {}) for name in ABLATIONS],
    "sgtl": [
        ("word-query", {"ablation": "sgtl", "train.use_text_query": False, "train.use_channel_group": False}),
        ("text-query", {"ablation": "sgtl", "train.use_text_query": True, "train.use_channel_group": False}),
        ("word-query+cg", {"ablation": "sgtl", "train.use_text_query": False, "train.use_channel_group": True}),
        ("text-query+cg", {"ablation": "sgtl", "train.use_text_query": True, "train.use_channel_group": True}),
    ],
    "vgkt": [(name, {"transfer": name}) for name in ("none", "feature", "st", "cpt", "both")],
}

log = logging.getLogger("vgsg")


class UsageError(Exception):
    pass


def ablation_items(name: str) -> dict:
    lc, sg, vg, tm = ABLATIONS[name]
    return {"train.use_local_conv": lc, "train.use_sgtl": sg, "train.use_vgkt": vg, "train.transfer_mode": tm}


def transfer_items(name: str) -> dict:
    """The first transfer row is the model without the teacher branch at all."""
    mode = TRANSFER_ALIASES[name]
    if mode == "none":
        return ablation_items("sgtl")
    return {**ablation_items("full"), "train.transfer_mode": mode}


def variant_items(suite: str, variant: str) -> dict:
    for name, spec in SUITES[suite]:
        if name != variant:
            continue
        items = {}
        if suite == "components":
            items.update(ablation_items(name))
        if "ablation" in spec:
            items.update(ablation_items(spec["ablation"]))
        if "transfer" in spec:
            items.update(transfer_items(spec["transfer"]))
        items.update({k: v for k, v in spec.items() if k.startswith("train.")})
        return items
    raise UsageError(f"unknown variant {variant!r} in suite {suite!r}")


# --------------------------------------------------------------------- parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--epochs", type=int)
    p.add_argument("--decay-epoch", type=int)
    p.add_argument("--lr", type=float, dest="base_lr")
    p.add_argument("--text-lr-scale", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--per-identity", type=int)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--paper-faithful", action="store_true", help="published schedule, no gradient clipping")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vgsg", description="Semantic-group text learning with vision-guided distillation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--identities", type=int, default=200, help="training identities")
    g.add_argument("--val-identities", type=int, default=0)
    g.add_argument("--test-identities", type=int, default=50)
    g.add_argument("--samples-per-identity", type=int, default=4)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--K", type=int, default=4)
    g.add_argument("--palette", type=int, default=6)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=16)
    g.add_argument("--jobs", type=int, default=1)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--ablation", choices=list(ABLATIONS))
    t.add_argument("--transfer", choices=list(TRANSFER_ALIASES))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--debug-checks", action="store_true", help="assert the stop-gradient contract every step")
    _add_config_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="config the checkpoint is expected to match")
    e.add_argument("--split", default="test", choices=sd.SPLITS)
    e.add_argument("--out")
    e.add_argument("--export-embeddings", metavar="PATH")
    e.add_argument("--force", action="store_true", help="evaluate despite a config or dataset mismatch")

    c = sub.add_parser("gradcheck", help="finite-difference verification of every backward rule and module")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--only", action="append", default=[], help="run only cases whose name contains this")

    a = sub.add_parser("ablate", help="train and evaluate a suite of variants")
    a.add_argument("--data", required=True)
    a.add_argument("--suite", required=True)
    a.add_argument("--seeds", type=int, default=1, help="number of seeds (base seed, base+1, ...)")
    a.add_argument("--variants", help="comma-separated subset of the suite's variants, in suite order")
    a.add_argument("--out")
    a.add_argument("--jobs", type=int, default=1)
    _add_config_flags(a)
    return ap


# --------------------------------------------------------------------- config assembly


def resolve_config(args, ds: sd.Dataset, extra: dict | None = None) -> RunConfig:
    items = {}
    if args.config:
        try:
            items.update(read_kv(args.config))
        except OSError as e:
            raise OSError(f"cannot read config {args.config}: {e}") from e
        except KVParseError as e:
            raise UsageError(str(e)) from e
    for kv in args.set:
        if "=" not in kv:
            raise UsageError(f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        items[k.strip()] = v.strip()
    if args.paper_faithful:
        items.update({"train.epochs": 50, "train.decay_epoch": 40, "train.batch_size": 96,
                      "train.grad_clip": 0.0, "train.base_lr": 3.5e-4})
    if getattr(args, "ablation", None):
        items.update(ablation_items(args.ablation))
    if getattr(args, "transfer", None):
        items.update(transfer_items(args.transfer))
    items.update(extra or {})
    flags = {
        "epochs": "train.epochs", "decay_epoch": "train.decay_epoch", "base_lr": "train.base_lr",
        "text_lr_scale": "train.text_lr_scale", "batch_size": "train.batch_size",
        "per_identity": "train.per_identity", "grad_clip": "train.grad_clip", "lambda1": "train.weights.lambda1",
        "lambda2": "train.weights.lambda2", "seed": "train.seed", "dtype": "train.dtype",
    }
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            items[key] = value
    if getattr(args, "debug_checks", False):
        items["train.debug_checks"] = True
    if "train.epochs" in items and "train.decay_epoch" not in items:
        # keep the default decay point inside a shortened schedule
        epochs = int(items["train.epochs"])
        default = RunConfig().train
        if epochs > 0 and default.decay_epoch >= epochs:
            items["train.decay_epoch"] = min(epochs - 1, round(epochs * default.decay_epoch / default.epochs))
    m = ds.manifest
    items.update({
        "encoder.vocab_size": ds.vocab_size,
        "encoder.K": m.K,
        "encoder.H": m.image_height // 4,
        "encoder.W": m.image_width // 4,
        "data": str(getattr(args, "data", "")),
    })
    return RunConfig.from_items(items)


def output_dir(args, cfg: RunConfig, kind: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / f"{kind}-{cfg.hash()}"


def write_config(path: Path, cfg: RunConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"# config_hash = {cfg.hash()}\n" + cfg.serialize())


# --------------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    if args.identities < 2:
        raise UsageError(f"need >= 2 identities, got {args.identities}")
    try:
        gcfg = sd.GenerationConfig(
            seed=args.seed, n_train=args.identities, n_val=args.val_identities, n_test=args.test_identities,
            samples_per_identity=args.samples_per_identity, noise_level=args.noise, K=args.K,
            image_height=args.height, image_width=args.width, palette_size=args.palette,
        )
    except ConfigurationError as e:
        raise UsageError(str(e)) from e
    ds = sd.generate(gcfg, jobs=args.jobs)
    sd.save(ds, args.out)
    counts = {s: len(ds.split(s).identities) for s in sd.SPLITS}
    print(
        f"wrote {args.out}: {gcfg.n_identities} identities "
        f"(train {gcfg.n_train}, val {gcfg.n_val}, test {gcfg.n_test}), "
        f"samples train {counts['train']} val {counts['val']} test {counts['test']}, "
        f"vocabulary {ds.vocab_size}, sha256 {ds.fingerprint()[:16]}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    ds = sd.load(args.data)
    cfg = resolve_config(args, ds)
    out = output_dir(args, cfg, "train")
    cfg = RunConfig.from_items({"out": str(out)}, cfg)
    write_config(out / CONFIG_NAME, cfg)
    res = trainer.run(cfg, ds, out, resume=args.resume)
    print(f"trained {len(res.log)} epoch(s); config {res.config_hash}; checkpoints {res.final} {res.best}")
    if res.log:
        last = res.log[-1]
        print("final epoch: " + "  ".join(f"{k}={last[k]:.4f}" for k in last if k not in ("epoch", "steps", "wall_time")))
    return EXIT_OK


def check_integrity(ck: trainer.Checkpoint, ds: sd.Dataset, config_path: str | None) -> list[str]:
    problems = []
    if ck.config.hash() != ck.config_hash:
        problems.append(f"checkpoint header hash {ck.config_hash} != hash of its stored config {ck.config.hash()}")
    if config_path:
        expected = RunConfig.parse(Path(config_path).read_text())
        if expected.hash() != ck.config_hash:
            problems.append(f"config {config_path} hash {expected.hash()} != checkpoint hash {ck.config_hash}")
    if ds.fingerprint() != ck.dataset_fingerprint:
        problems.append("dataset fingerprint differs from the one the checkpoint was trained on")
    return problems


def evaluate_checkpoint(path, ds: sd.Dataset, split: str = "test"):
    model, ck = trainer.load_model(path)
    index = ev.build_index(model, ds, split)
    return ck, index, ev.evaluate_both(index)


def metrics_payload(config_hash: str, metrics: dict) -> dict:
    return {
        "config_hash": config_hash,
        **{d: {k: round(v, 6) for k, v in m.row().items()} for d, m in metrics.items()},
    }


def cmd_eval(args) -> int:
    ds = sd.load(args.data)
    ck, _ = trainer.read_checkpoint(args.checkpoint)
    problems = check_integrity(ck, ds, args.config)
    if problems:
        for p in problems:
            print(f"integrity: {p}", file=sys.stderr)
        if not args.force:
            print("refusing to evaluate (use --force to override)", file=sys.stderr)
            return EXIT_INTEGRITY
    ck, index, metrics = evaluate_checkpoint(args.checkpoint, ds, args.split)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"variant": "model", "direction": d, **{k: f"{v:.2f}" for k, v in m.row().items()},
             "seed_median": f"seed {ck.config.train.seed}"} for d, m in metrics.items()]
    (out / "metrics.csv").write_text(ev.to_csv(rows))
    (out / "metrics.txt").write_text(f"# config_hash = {ck.config_hash}\n" + ev.to_grid(rows))
    (out / "metrics.json").write_text(json.dumps(metrics_payload(ck.config_hash, metrics), indent=2) + "\n")
    for d, m in metrics.items():
        print(f"{d:12s} R1 {m.rank1:6.2f}  R5 {m.rank5:6.2f}  R10 {m.rank10:6.2f}  mAP {m.mAP:6.2f}")
    if args.export_embeddings:
        ev.export_embeddings(index, args.export_embeddings)
        print(f"embeddings written to {args.export_embeddings}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import verify

    reports = verify.run_suite(seed=args.seed, tol=args.tol, step=args.step, only=args.only)
    for r in reports:
        print(r.line())
    failed = [r.name for r in reports if not r.passed]
    worst = max((r.max_rel_error for r in reports), default=0.0)
    print(f"{len(reports)} checks, {len(failed)} failed, max relative error {worst:.3e}")
    if failed:
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _train_and_eval(base_items: dict, data: str, out_root: str, suite: str, variant: str, seed: int) -> dict:
    ds = sd.load(data)
    items = {**base_items, **variant_items(suite, variant)}
    items["train.seed"] = base_items.get("train.seed", 0) + seed
    cfg = RunConfig.from_items(items)
    out = Path(out_root) / variant.replace("+", "_") / f"seed{seed}"
    cfg = RunConfig.from_items({"out": str(out)}, cfg)
    write_config(out / CONFIG_NAME, cfg)
    res = trainer.run(cfg, ds, out, quiet=True)
    return ev.evaluate_both(ev.build_index(res.model, ds))


def cmd_ablate(args) -> int:
    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {sorted(SUITES)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    ds = sd.load(args.data)
    base = resolve_config(args, ds)
    items = {k: v for k, v in base.to_items().items() if k != "out"}
    items["train.seed"] = base.train.seed
    out = output_dir(args, base, f"ablate-{args.suite}")
    variants = [name for name, _ in SUITES[args.suite]]
    if args.variants:
        wanted = args.variants.split(",")
        unknown = sorted(set(wanted) - set(variants))
        if unknown:
            raise UsageError(f"unknown variants {unknown} in suite {args.suite!r}; choose from {variants}")
        variants = [v for v in variants if v in wanted]
    fn = partial(_train_and_eval, items, str(args.data), str(out), args.suite)
    results, csv_text, grid = ev.ablation_report(fn, variants, list(range(args.seeds)), jobs=args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(csv_text)
    (out / "ablation.txt").write_text(f"# suite = {args.suite}\n# config_hash = {base.hash()}\n" + grid)
    print(grid, end="")
    done = sum(r.metrics is not None for r in results)
    print(f"{done}/{len(results)} runs completed; report in {out}")
    return EXIT_OK if done else EXIT_TRAIN


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as e:
        dump = getattr(e, "dump_path", None)
        print(f"training aborted: {e}" + (f"; batch dumped to {dump}" if dump else ""), file=sys.stderr)
        return EXIT_TRAIN
    except IntegrityError as e:
        print(f"integrity error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (IngestionError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
