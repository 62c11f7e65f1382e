import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vgsg.numerics import functional as F
from vgsg.numerics import tensor as T
from vgsg.numerics.gradcheck import grad_check
from vgsg.numerics.nn import MaskedBatchNorm
from vgsg.numerics.tensor import DegenerateInputError, DimensionError, Parameter, Tensor, ValidationError


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_orthogonal():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(x)).data, x)
    assert np.array_equal((Tensor([[1.0, 0.0]]) @ Tensor([[0.0], [1.0]])).data, [[0.0]])


@settings(max_examples=60, deadline=None)
@given(m=st.integers(1, 16), k=st.integers(1, 16), n=st.integers(1, 16), seed=st.integers(0, 2**31))
def test_matmul_matches_triple_loop(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(m, k)), r.normal(size=(k, n))
    got = (Tensor(a) @ Tensor(b)).data
    ref = triple_loop(a, b)
    assert np.all(np.abs(got - ref) <= 1e-12 * np.maximum(1.0, np.abs(ref)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
        Tensor(np.ones((3, 4))) @ Tensor(np.ones((5, 2)))


# ---------------------------------------------------------------- softmax


def test_softmax_examples():
    assert np.allclose(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)
    assert np.allclose(F.softmax(Tensor([math.log(2.0), 0.0])).data, [2 / 3, 1 / 3], atol=1e-12)


def test_softmax_empty_axis():
    with pytest.raises(DimensionError):
        F.softmax(Tensor(np.zeros((2, 0))))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 12)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    p = F.softmax(Tensor(x), axis=-1).data
    assert np.all(np.isfinite(p))
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) <= 1e-6)


def test_softmax_masked_entries_exactly_zero():
    x = np.random.default_rng(0).normal(size=(4, 6))
    mask = np.array([1, 0, 1, 1, 0, 1], dtype=bool)
    p = F.softmax(Tensor(x), mask=mask).data
    assert np.all(p[:, ~mask] == 0.0)
    with pytest.raises(DegenerateInputError):
        F.softmax(Tensor(x), mask=np.zeros(6, dtype=bool))


def test_softmax_monotone():
    x = np.array([0.3, -1.0, 2.0])
    p0 = F.softmax(Tensor(x)).data
    x[0] += 0.5
    assert F.softmax(Tensor(x)).data[0] > p0[0]


# ---------------------------------------------------------------- layer norm


def test_layer_norm_examples():
    assert np.array_equal(F.layer_norm(Tensor(np.full(5, 3.0))).data, np.zeros(5))
    assert np.allclose(F.layer_norm(Tensor([1.0, -1.0])).data, [1.0, -1.0], atol=1e-5)


def test_layer_norm_moments():
    x = np.random.default_rng(1).normal(3.0, 5.0, size=(10, 32))
    y = F.layer_norm(Tensor(x)).data
    assert np.all(np.abs(y.mean(axis=-1)) <= 1e-5)
    assert np.all(np.abs(y.var(axis=-1) - 1.0) <= 1e-5)


def test_layer_norm_needs_two_features():
    with pytest.raises(DimensionError):
        F.layer_norm(Tensor(np.ones((3, 1))))


# ---------------------------------------------------------------- cosine / KL


def test_cosine_examples():
    assert float(F.cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 0.0])).data) == 1.0
    assert float(F.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).data) == 0.0
    assert abs(float(F.cosine_similarity(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).data) - 1 / math.sqrt(2)) < 1e-12


def test_cosine_zero_norm_raises():
    with pytest.raises(DegenerateInputError):
        F.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_cosine_matrix_matches_pairwise():
    r = np.random.default_rng(2)
    a, b = r.normal(size=(4, 5)), r.normal(size=(3, 5))
    M = F.cosine_matrix(Tensor(a), Tensor(b)).data
    for i in range(4):
        for j in range(3):
            ref = a[i] @ b[j] / (np.linalg.norm(a[i]) * np.linalg.norm(b[j]))
            assert abs(M[i, j] - ref) < 1e-12


def test_kl_examples():
    p = np.array([[0.2, 0.3, 0.5]])
    assert float(F.kl_divergence(Tensor(p), Tensor(p)).data) == 0.0
    # ln 2 and 0.5 ln(4/3) by hand
    assert abs(float(F.kl_divergence(Tensor([[1.0, 0.0]]), Tensor([[0.5, 0.5]])).data) - math.log(2)) < 1e-12
    got = float(F.kl_divergence(Tensor([[0.5, 0.5]]), Tensor([[0.75, 0.25]])).data)
    assert abs(got - (0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25))) < 1e-12
    assert abs(got - 0.14384) < 1e-5


def test_kl_validation():
    with pytest.raises(DimensionError):
        F.kl_divergence(Tensor([[0.5, 0.5]]), Tensor([[1.0, 0.0, 0.0]]))
    with pytest.raises(ValidationError):
        F.kl_divergence(Tensor([[0.5, 0.6]]), Tensor([[0.5, 0.5]]))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 8), scale=st.floats(0.1, 20.0))
def test_kl_nonnegative(seed, n, scale):
    r = np.random.default_rng(seed)
    p = F.softmax(Tensor(r.normal(size=(3, n)) * scale)).data
    q = F.softmax(Tensor(r.normal(size=(3, n)) * scale)).data
    assert float(F.kl_divergence(Tensor(p), Tensor(q)).data) >= -1e-12
    assert abs(float(F.kl_divergence(Tensor(p), Tensor(p)).data)) <= 1e-9


def test_kl_gradient_only_reaches_q_when_p_detached():
    r = np.random.default_rng(3)
    a, b = Parameter(r.normal(size=(2, 4))), Parameter(r.normal(size=(2, 4)))
    F.kl_divergence(F.softmax(a).detach(), F.softmax(b)).backward()
    assert np.all(a.grad == 0.0)
    assert np.any(b.grad != 0.0)


# ---------------------------------------------------------------- autodiff plumbing


def test_zero_grad_clears_exactly():
    p = Parameter(np.ones((2, 3)))
    (p * 3.0).sum().backward()
    assert np.all(p.grad == 3.0)
    p.zero_grad()
    assert p.grad.shape == p.data.shape
    assert np.all(p.grad == 0.0)


def test_gradient_accumulates_over_shared_use():
    p = Parameter(np.array([2.0]))
    (p * p + p).sum().backward()
    assert p.grad[0] == 5.0


def test_no_grad_records_nothing():
    p = Parameter(np.ones(3))
    with T.no_grad():
        y = p * 2.0
    assert y.op is None


def test_broadcast_gradient_reduced_to_shape():
    a = Parameter(np.ones((3, 4)))
    b = Parameter(np.ones(4))
    (a * b).sum().backward()
    assert b.grad.shape == (4,)
    assert np.all(b.grad == 3.0)


# ---------------------------------------------------------------- gradient oracle


def test_grad_check_quadratic():
    x = Parameter(np.array([3.0]))
    x.grad = np.zeros(1)
    (x * x).sum().backward()
    assert x.grad[0] == 6.0
    rep = grad_check(lambda: (x * x).sum(), [x], step=1e-5, tol=1e-7)
    assert rep.passed, rep.line()


def test_grad_check_contrastive_and_kl_composites():
    from vgsg.losses import batch_contrastive

    r = np.random.default_rng(4)
    V, Tx = Parameter(r.normal(size=(6, 5))), Parameter(r.normal(size=(6, 5)))
    labels = np.array([0, 0, 1, 1, 2, 2])
    rep = grad_check(lambda: batch_contrastive(F.cosine_matrix(V, Tx), labels), [V, Tx], step=1e-5, tol=1e-4)
    assert rep.passed, rep.line()
    p = F.softmax(Tensor(r.normal(size=(3, 4)))).data
    z = Parameter(r.normal(size=(3, 4)))
    rep = grad_check(lambda: F.kl_divergence(p, F.softmax(z)), [z], step=1e-5, tol=1e-4)
    assert rep.passed, rep.line()


def test_grad_check_flags_nonfinite():
    x = Parameter(np.array([-1.0]))
    with np.errstate(invalid="ignore"):
        rep = grad_check(lambda: T.log(x).sum(), [x])
    assert not rep.passed
    assert "non-finite" in rep.message


def test_grad_check_rejects_float32():
    x = Parameter(np.ones(2, dtype=np.float32))
    with pytest.raises(ValidationError):
        grad_check(lambda: (x * x).sum(), [x])


def test_grad_check_detects_wrong_rule(monkeypatch):
    good = T.BACKWARD_RULES["tanh"]
    monkeypatch.setitem(T.BACKWARD_RULES, "tanh", lambda node, g: tuple(-x for x in good(node, g)))
    x = Parameter(np.array([0.3, -0.2]))
    assert not grad_check(lambda: x.tanh().sum(), [x]).passed


def test_masked_batch_norm_ignores_padding():
    bn = MaskedBatchNorm(3)
    r = np.random.default_rng(5)
    x = r.normal(size=(2, 4, 3))
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 0]], dtype=bool)
    y1 = bn(Tensor(x), mask).data
    x2 = x.copy()
    x2[~mask] = 1e3
    y2 = MaskedBatchNorm(3)(Tensor(x2), mask).data
    assert np.allclose(y1[mask], y2[mask], atol=1e-12)
    assert np.allclose(y1[mask].mean(axis=0), 0.0, atol=1e-9)
