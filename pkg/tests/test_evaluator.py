import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vgsg import evaluator as ev
from vgsg.errors import DegenerateInputError, ProtocolError, ValidationError
from vgsg.model import ModelConfig, VGSGModel


def sorted_gallery(row):
    """Full sort by descending score, ties by gallery index."""
    return sorted(range(len(row)), key=lambda j: (-row[j], j))


def oracle_rank_k(sim, ql, gl, k):
    hits = 0
    for i, row in enumerate(sim):
        top = sorted_gallery(row)[:k]
        hits += any(gl[j] == ql[i] for j in top)
    return 100.0 * hits / len(sim)


def oracle_map(sim, ql, gl):
    total = Fraction(0)
    for i, row in enumerate(sim):
        found, ap = 0, Fraction(0)
        for pos, j in enumerate(sorted_gallery(row), start=1):
            if gl[j] == ql[i]:
                found += 1
                ap += Fraction(found, pos)
        total += ap / found
    return float(100 * total / len(sim))


def random_instance(r):
    nq, ng = r.integers(1, 51, size=2)
    n_ids = int(r.integers(1, max(2, ng // 2) + 1))
    gl = r.integers(0, n_ids, size=ng)
    ql = r.choice(gl, size=nq)
    if r.random() < 0.5:
        sim = r.integers(-3, 4, size=(nq, ng)).astype(float)  # plenty of ties
    else:
        sim = r.uniform(-2, 2, size=(nq, ng))
    return sim, ql, gl


def test_matches_sort_oracles_on_200_matrices():
    r = np.random.default_rng(0)
    for _ in range(200):
        sim, ql, gl = random_instance(r)
        for k in (1, 5, 10):
            assert ev.rank_k(sim, ql, gl, k) == oracle_rank_k(sim, ql, gl, k)
        assert ev.mean_average_precision(sim, ql, gl) == oracle_map(sim, ql, gl)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_rank_monotone(seed):
    sim, ql, gl = random_instance(np.random.default_rng(seed))
    m = ev.evaluate(sim, ql, gl, "text->image")
    assert m.rank1 <= m.rank5 <= m.rank10 <= 100.0


def test_identity_diagonal():
    labels = np.arange(7)
    m = ev.evaluate(np.eye(7), labels, labels, "text->image")
    assert m.rank1 == 100.0 and m.mAP == 100.0


def test_correct_item_sixth_for_every_query():
    n = 10
    labels = np.arange(n)
    sim = np.zeros((n, n))
    for q in range(n):
        for off in range(1, 6):
            sim[q, (q + off) % n] = 1.0 + off  # five wrong items above the right one
        sim[q, q] = 0.5
    assert np.all(ev.first_hit_ranks(sim, labels, labels) == 6)
    assert ev.rank_k(sim, labels, labels, 5) == 0.0
    assert ev.rank_k(sim, labels, labels, 10) == 100.0


def test_map_hand_example():
    sim = np.array([[0.9, 0.1], [0.9, 0.1]])
    assert ev.mean_average_precision(sim, [0, 1], [0, 1]) == 75.0


def test_ties_keep_gallery_order():
    sim = np.zeros((1, 4))
    assert ev.first_hit_ranks(sim, [7], [1, 7, 7, 2])[0] == 2


def test_query_without_match():
    with pytest.raises(ProtocolError):
        ev.rank_k(np.zeros((1, 2)), [3], [0, 1], 1)


def index(qg, gg, ql=None, gl=None, qloc=None, gloc=None):
    ql = np.arange(len(qg)) if ql is None else ql
    gl = np.arange(len(gg)) if gl is None else gl
    return ev.RetrievalIndex(gg, gloc, qg, qloc, np.asarray(gl), np.asarray(ql))


def test_similarity_matches_double_loop():
    r = np.random.default_rng(1)
    qg, gg = r.normal(size=(5, 6)), r.normal(size=(7, 6))
    ql, gll = r.normal(size=(5, 3, 6)), r.normal(size=(7, 3, 6))
    S = ev.similarity_matrix(index(qg, gg, qloc=ql, gloc=gll))
    cos = lambda a, b: a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    for q in range(5):
        for g in range(7):
            ref = cos(qg[q], gg[g]) + cos(ql[q].ravel(), gll[g].ravel())
            assert abs(S[q, g] - ref) <= 1e-6
    assert np.all(np.abs(S) <= 2.0 + 1e-12)


def test_identical_embedding_scores_two():
    r = np.random.default_rng(2)
    gg, gl = r.normal(size=(6, 4)), r.normal(size=(6, 2, 4))
    S = ev.similarity_matrix(index(gg[2:3].copy(), gg, qloc=gl[2:3].copy(), gloc=gl))
    assert abs(S[0, 2] - 2.0) < 1e-12
    assert np.argmax(S[0]) == 2 and np.sum(S[0] >= S[0, 2] - 1e-12) == 1


def test_zero_norm_names_sample():
    gg = np.ones((3, 4))
    gg[1] = 0.0
    with pytest.raises(DegenerateInputError, match="gallery sample 1"):
        ev.similarity_matrix(index(np.ones((2, 4)), gg))


def test_directions_use_transpose():
    r = np.random.default_rng(3)
    labels = np.repeat(np.arange(4), 2)
    idx = index(r.normal(size=(8, 5)), r.normal(size=(8, 5)), labels, labels)
    both = ev.evaluate_both(idx)
    S = ev.similarity_matrix(idx)
    assert np.array_equal(both["image->text"].ranks, ev.first_hit_ranks(S.T, labels, labels))


def build_model(ds, enc, sgtl, **kw):
    cfg = ModelConfig(encoder=enc, sgtl=sgtl, num_classes=len(ds.identities("train")), **kw)
    return VGSGModel(cfg, np.random.default_rng(0))


def test_build_index_counts_and_determinism(tiny_ds, tiny_encoder, tiny_sgtl):
    model = build_model(tiny_ds, tiny_encoder, tiny_sgtl)
    a = ev.build_index(model, tiny_ds)
    n = len(tiny_ds.split("test").identities)
    assert a.encoder_passes == 2 * n
    assert a.attention_calls == 0
    b = ev.build_index(model, tiny_ds)
    assert np.array_equal(a.query_local, b.query_local) and np.array_equal(a.gallery_global, b.gallery_global)


def test_build_index_without_teacher(tiny_ds, tiny_encoder, tiny_sgtl):
    model = build_model(tiny_ds, tiny_encoder, tiny_sgtl, use_vgkt=False, transfer_mode="none")
    assert not hasattr(model, "vgkt")
    idx = ev.build_index(model, tiny_ds)
    assert idx.query_local.shape[1:] == (tiny_encoder.K, tiny_encoder.C)


def test_empty_split(tiny_ds, tiny_encoder, tiny_sgtl):
    with pytest.raises(ValidationError):
        ev.build_index(build_model(tiny_ds, tiny_encoder, tiny_sgtl), tiny_ds, "val")


def test_embedding_export(tmp_path):
    r = np.random.default_rng(4)
    idx = index(r.normal(size=(3, 4)), r.normal(size=(5, 4)), qloc=r.normal(size=(3, 2, 4)),
                gloc=r.normal(size=(5, 2, 4)))
    path = ev.export_embeddings(idx, tmp_path / "emb.bin")
    raw = path.read_bytes()
    assert raw[:8] == b"VGSGEMB1"
    assert struct.unpack_from("<III", raw, 8) == (5, 12, 2)
    (g, K1), (q, K2) = ev.read_embeddings(path)
    assert K1 == K2 == 2
    assert np.array_equal(g[:, :4], idx.gallery_global.astype("<f4"))
    assert np.array_equal(q[:, 4:], idx.query_local.reshape(3, -1).astype("<f4"))


def fake_metrics(variant, seed):
    if variant == "broken":
        raise RuntimeError("diverged")
    r = np.random.default_rng([sum(map(ord, variant)), seed])
    labels = np.repeat(np.arange(5), 2)
    sim = r.normal(size=(10, 10))
    return {"text->image": ev.evaluate(sim, labels, labels, "text->image"),
            "image->text": ev.evaluate(sim.T, labels, labels, "image->text")}


def test_ablation_report_rows_and_determinism():
    variants = ["baseline", "sgtl", "full"]
    res, csv1, grid1 = ev.ablation_report(fake_metrics, variants, [0, 1, 2])
    _, csv2, grid2 = ev.ablation_report(fake_metrics, variants, [0, 1, 2])
    assert csv1 == csv2 and grid1 == grid2
    lines = csv1.splitlines()
    assert lines[0] == "variant,direction,rank1,rank5,rank10,map,seed_median"
    medians = [l for l in lines if l.endswith("median of 3")]
    assert [l.split(",")[0] for l in medians] == ["baseline", "baseline", "sgtl", "sgtl", "full", "full"]
    r1 = [r.metrics["text->image"].rank1 for r in res if r.variant == "sgtl"]
    assert ev.median_rank1(res, "sgtl") == float(np.median(r1))


def test_single_seed_median_equals_value():
    res, csv_text, _ = ev.ablation_report(fake_metrics, ["full"], [0])
    rows = [l.split(",") for l in csv_text.splitlines()[1:]]
    seed_row = [r for r in rows if r[6] == "seed 0" and r[1] == "text->image"][0]
    med_row = [r for r in rows if r[6] == "median of 1" and r[1] == "text->image"][0]
    assert seed_row[2:6] == med_row[2:6]


def test_failed_variant_is_annotated():
    res, csv_text, _ = ev.ablation_report(fake_metrics, ["full", "broken"], [0])
    assert "seed 0 failed: RuntimeError: diverged" in csv_text
    assert "full,text->image" in csv_text
