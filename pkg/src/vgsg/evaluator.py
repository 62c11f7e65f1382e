"""Retrieval evaluation: index building, similarity fusion, Rank-K, mAP, ablation tables."""

from __future__ import annotations

import csv
import io
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import partial
from pathlib import Path

import numpy as np

from . import synthdata as sd
from . import vgkt
from .errors import DegenerateInputError, DimensionError, ProtocolError, ValidationError

EMB_MAGIC = b"VGSGEMB1"
CSV_HEADER = ("variant", "direction", "rank1", "rank5", "rank10", "map", "seed_median")
DIRECTIONS = ("text->image", "image->text")


@dataclass
class RetrievalIndex:
    gallery_global: np.ndarray  # (Ng, C) image side
    gallery_local: np.ndarray | None  # (Ng, K, C)
    query_global: np.ndarray  # (Nq, C) caption side
    query_local: np.ndarray | None
    gallery_labels: np.ndarray
    query_labels: np.ndarray
    encoder_passes: int = 0
    attention_calls: int = 0

    def __post_init__(self):
        if self.gallery_global.shape[-1] != self.query_global.shape[-1]:
            raise DimensionError("gallery and query embedding widths differ")
        if (self.gallery_local is None) != (self.query_local is None):
            raise DimensionError("local embeddings must be present on both sides or neither")
        if self.gallery_local is not None and self.gallery_local.shape[1:] != self.query_local.shape[1:]:
            raise DimensionError(f"local shapes differ: {self.gallery_local.shape} vs {self.query_local.shape}")


@dataclass
class MetricsReport:
    direction: str
    rank1: float
    rank5: float
    rank10: float
    mAP: float
    ranks: np.ndarray = field(repr=False, default=None)  # 1-based rank of the first correct item per query

    def __post_init__(self):
        if not self.rank1 <= self.rank5 <= self.rank10 <= 100.0:
            raise ValidationError(f"Rank-K not monotone: {self.rank1}, {self.rank5}, {self.rank10}")

    def row(self) -> dict:
        return {"rank1": self.rank1, "rank5": self.rank5, "rank10": self.rank10, "map": self.mAP}


def build_index(model, ds: sd.Dataset, split: str = "test") -> RetrievalIndex:
    """Encode every image and every caption of ``split`` exactly once."""
    arr = ds.split(split)
    if len(arr.identities) == 0:
        raise ValidationError(f"split {split!r} is empty")
    model.eval()
    v0, t0 = model.visual.passes, model.text.passes
    a0 = vgkt.CALLS["pairs"]
    g_glob, g_loc = model.encode_images(arr.images)
    q_glob, q_loc = model.encode_texts(arr.captions)
    passes = (model.visual.passes - v0) + (model.text.passes - t0)
    return RetrievalIndex(
        g_glob, g_loc, q_glob, q_loc, arr.identities.copy(), arr.identities.copy(),
        encoder_passes=passes, attention_calls=vgkt.CALLS["pairs"] - a0,
    )


def _normalise(x: np.ndarray, side: str) -> np.ndarray:
    x = x.reshape(len(x), -1).astype(np.float64)
    n = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(n == 0)
    if bad.size:
        raise DegenerateInputError(f"zero-norm embedding for {side} sample {int(bad[0])}")
    return x / n[:, None]


def similarity_matrix(index: RetrievalIndex) -> np.ndarray:
    """(Nq, Ng): global cosine plus, when present, cosine of the concatenated local features."""
    S = _normalise(index.query_global, "query") @ _normalise(index.gallery_global, "gallery").T
    if index.query_local is not None:
        S = S + _normalise(index.query_local, "query") @ _normalise(index.gallery_local, "gallery").T
    return S


def _order(sim: np.ndarray) -> np.ndarray:
    # descending similarity; equal scores keep gallery order
    return np.argsort(-sim, axis=1, kind="stable")


def _relevance(sim, q_labels, g_labels) -> np.ndarray:
    sim = np.asarray(sim)
    q_labels, g_labels = np.asarray(q_labels), np.asarray(g_labels)
    if sim.shape != (len(q_labels), len(g_labels)):
        raise DimensionError(f"similarity {sim.shape} does not match {len(q_labels)} queries x {len(g_labels)} gallery")
    rel = q_labels[:, None] == g_labels[None, :]
    missing = np.flatnonzero(~rel.any(axis=1))
    if missing.size:
        raise ProtocolError(f"query {int(missing[0])} has no correct gallery item")
    return np.take_along_axis(rel, _order(sim), axis=1)


def first_hit_ranks(sim, q_labels, g_labels) -> np.ndarray:
    return np.argmax(_relevance(sim, q_labels, g_labels), axis=1) + 1


def rank_k(sim, q_labels, g_labels, k: int) -> float:
    """Percent of queries with a correct item in the top ``k``."""
    ranks = first_hit_ranks(sim, q_labels, g_labels)
    return 100.0 * np.count_nonzero(ranks <= k) / len(ranks)


def mean_average_precision(sim, q_labels, g_labels) -> float:
    """Interpolation-free AP over the full ranking, averaged over queries.

    Summed as exact rationals so the result does not depend on summation order.
    """
    rel = _relevance(sim, q_labels, g_labels)
    total = Fraction(0)
    for row in rel:
        pos = np.flatnonzero(row) + 1
        total += sum(Fraction(j, int(p)) for j, p in enumerate(pos, start=1)) / len(pos)
    return float(100 * total / len(rel))


def evaluate(sim, q_labels, g_labels, direction: str) -> MetricsReport:
    ranks = first_hit_ranks(sim, q_labels, g_labels)
    n = len(ranks)
    r = [100.0 * np.count_nonzero(ranks <= k) / n for k in (1, 5, 10)]
    return MetricsReport(direction, *r, mean_average_precision(sim, q_labels, g_labels), ranks)


def evaluate_both(index: RetrievalIndex) -> dict:
    S = similarity_matrix(index)
    return {
        "text->image": evaluate(S, index.query_labels, index.gallery_labels, "text->image"),
        "image->text": evaluate(S.T, index.gallery_labels, index.query_labels, "image->text"),
    }


# --------------------------------------------------------------------- embedding export


def _emb_record(x: np.ndarray, K: int) -> bytes:
    x = np.ascontiguousarray(x, dtype="<f4")
    n = x.shape[0]
    dim = int(np.prod(x.shape[1:]))
    return EMB_MAGIC + struct.pack("<III", n, dim, K) + x.tobytes()


def export_embeddings(index: RetrievalIndex, path) -> Path:
    """Two records, gallery then queries; each row is the global vector followed by the K local vectors."""
    path = Path(path)
    K = 0 if index.gallery_local is None else index.gallery_local.shape[1]
    blobs = []
    for g, l in ((index.gallery_global, index.gallery_local), (index.query_global, index.query_local)):
        rows = g if l is None else np.concatenate([g, l.reshape(len(l), -1)], axis=1)
        blobs.append(_emb_record(rows, K))
    path.write_bytes(b"".join(blobs))
    return path


def read_embeddings(path) -> list[tuple[np.ndarray, int]]:
    data = Path(path).read_bytes()
    out, off = [], 0
    while off < len(data):
        if data[off : off + 8] != EMB_MAGIC:
            raise ValidationError(f"bad magic at byte {off}")
        n, dim, K = struct.unpack_from("<III", data, off + 8)
        off += 20
        size = n * dim * 4
        arr = np.frombuffer(data[off : off + size], dtype="<f4").reshape(n, dim)
        out.append((arr, K))
        off += size
    return out


# --------------------------------------------------------------------- ablation tables


@dataclass
class VariantResult:
    variant: str
    seed: int
    metrics: dict | None  # direction -> MetricsReport
    error: str | None = None


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def report_rows(results: list[VariantResult], variants: list[str]) -> list[dict]:
    """Per-seed rows plus one median row per (variant, direction)."""
    rows = []
    for v in variants:
        runs = [r for r in results if r.variant == v]
        ok = [r for r in runs if r.metrics is not None]
        for r in runs:
            if r.metrics is None:
                rows.append({"variant": v, "direction": "-", "rank1": "", "rank5": "", "rank10": "", "map": "",
                             "seed_median": f"seed {r.seed} failed: {r.error}"})
                continue
            for d in DIRECTIONS:
                m = r.metrics[d].row()
                rows.append({"variant": v, "direction": d, **{k: _fmt(x) for k, x in m.items()},
                             "seed_median": f"seed {r.seed}"})
        if not ok:
            continue
        for d in DIRECTIONS:
            med = {k: _fmt(float(np.median([r.metrics[d].row()[k] for r in ok])))
                   for k in ("rank1", "rank5", "rank10", "map")}
            rows.append({"variant": v, "direction": d, **med, "seed_median": f"median of {len(ok)}"})
    return rows


def median_rank1(results: list[VariantResult], variant: str, direction: str = "text->image") -> float:
    vals = [r.metrics[direction].rank1 for r in results if r.variant == variant and r.metrics is not None]
    return float(np.median(vals)) if vals else float("nan")


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def to_grid(rows: list[dict]) -> str:
    table = [list(CSV_HEADER)] + [[str(r[c]) for c in CSV_HEADER] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(CSV_HEADER))]
    lines = []
    for j, row in enumerate(table):
        lines.append(" | ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _attempt(train_fn, variant: str, seed: int) -> VariantResult:
    try:
        return VariantResult(variant, seed, train_fn(variant, seed))
    except Exception as e:  # noqa: BLE001 - reported as an annotated row
        return VariantResult(variant, seed, None, f"{type(e).__name__}: {e}")


def ablation_report(train_fn, variants: list[str], seeds: list[int], jobs: int = 1):
    """Run ``train_fn(variant, seed) -> metrics dict`` over the grid.

    A variant that raises is kept as an annotated row rather than aborting
    the report. With ``jobs > 1`` runs go to worker processes (``train_fn``
    must then be picklable); results are collected in grid order either way.
    Returns (results, csv text, grid text).
    """
    if not seeds:
        raise ValidationError("ablation needs at least one seed")
    grid = [(v, s) for v in variants for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(partial(_attempt, train_fn), *zip(*grid)))
    else:
        results = [_attempt(train_fn, v, s) for v, s in grid]
    rows = report_rows(results, variants)
    return results, to_csv(rows), to_grid(rows)
