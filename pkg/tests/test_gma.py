import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gdiscap.gma import (GmaConfigError, GmaParams, apply_attention, distinctive_attention, group_attention,
                         similarity_matrix)
from gdiscap.tensor import Parameter, Tensor, backward, gradcheck

from oracles import gma as gma_oracle

M0 = [[1.0, 0.0], [0.0, 1.0]]


def test_similarity_examples():
    np.testing.assert_allclose(similarity_matrix([[0.3, 0.4]], [[0.3, 0.4]]).data, [[1.0]])
    np.testing.assert_allclose(similarity_matrix(M0, [[1.0, 0.0]]).data, [[1.0, 0.0]])
    scaled = similarity_matrix([[5.0, 0.0], [0.0, 1.0]], [[1.0, 0.0]])
    np.testing.assert_allclose(scaled.data, [[1.0, 0.0]])


def test_similarity_zero_row_is_zero():
    r = similarity_matrix([[0.0, 0.0], [1.0, 1.0]], [[1.0, 0.0]]).data
    assert np.all(np.isfinite(r)) and r[0, 0] == 0.0


def test_worked_fixture():
    res = distinctive_attention(M0, [[[1.0, 0.0]]], GmaParams(omega=1.0, bias=0.0))
    np.testing.assert_allclose(res.summary[0].data, [1.0, 0.0])
    np.testing.assert_allclose(res.distinctiveness.data, [0.26894, 0.73106], atol=1e-4)
    np.testing.assert_allclose(res.attention.data, [0.26894, 0.73106], atol=1e-4)
    np.testing.assert_allclose(res.weighted_memory.data, [[0.26894, 0], [0, 0.73106]], atol=1e-4)
    doc = res.to_json()
    assert set(doc) == {"R", "R_tilde", "D", "A"}


def test_identical_regions_give_uniform_d():
    same = [[1.0, 2.0]] * 3
    res = distinctive_attention(same, [same, same], GmaParams())
    np.testing.assert_allclose(res.distinctiveness.data, [1 / 3] * 3, atol=1e-12)


def test_zero_omega_flattens_attention():
    rng = np.random.default_rng(0)
    res = distinctive_attention(rng.normal(size=(4, 3)), [rng.normal(size=(2, 3))], GmaParams(0.0, 0.7))
    np.testing.assert_allclose(res.attention.data, [0.7] * 4)


def test_apply_attention_examples():
    m = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(apply_attention(m, np.ones(3)).data, m)
    assert np.all(apply_attention(m, [1.0, 0.0, 1.0]).data[1] == 0)
    with pytest.raises(ValueError):
        apply_attention(m, np.ones(2))


def test_needs_a_group():
    with pytest.raises(GmaConfigError):
        distinctive_attention(M0, [], GmaParams())
    with pytest.raises(GmaConfigError):
        group_attention(Tensor(np.ones((1, 2, 2))), None, GmaParams())


def _instance(seed):
    rng = np.random.default_rng(seed)
    n0 = int(rng.integers(1, 7))
    d = int(rng.integers(1, 5))
    k = int(rng.integers(1, 4))
    m0 = rng.normal(size=(n0, d))
    similar = [rng.normal(size=(int(rng.integers(1, 7)), d)) for _ in range(k)]
    return m0, similar, float(rng.uniform(0, 2)), float(rng.uniform(0, 1))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_matches_scalar_oracle(seed):
    m0, similar, omega, bias = _instance(seed)
    res = distinctive_attention(m0, similar, GmaParams(omega, bias))
    R, Rt, D, A, M = gma_oracle(m0.tolist(), [s.tolist() for s in similar], omega, bias)
    for got, want in zip(res.similarity, R):
        np.testing.assert_allclose(got.data, want, atol=1e-9)
    np.testing.assert_allclose(res.distinctiveness.data, D, atol=1e-9)
    np.testing.assert_allclose(res.attention.data, A, atol=1e-9)
    np.testing.assert_allclose(res.weighted_memory.data, M, atol=1e-9)
    assert np.all(np.abs(np.concatenate([r.data.ravel() for r in res.similarity])) <= 1 + 1e-12)
    assert abs(res.distinctiveness.data.sum() - 1) < 1e-9
    assert np.all(res.attention.data >= 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_permutation_invariances(seed):
    m0, similar, omega, bias = _instance(seed)
    rng = np.random.default_rng(seed + 1)
    p = GmaParams(omega, bias)
    d = distinctive_attention(m0, similar, p).distinctiveness.data
    shuffled_rows = [s[rng.permutation(len(s))] for s in similar]
    shuffled_images = [similar[i] for i in rng.permutation(len(similar))]
    np.testing.assert_allclose(distinctive_attention(m0, shuffled_rows, p).distinctiveness.data, d, atol=1e-12)
    np.testing.assert_allclose(distinctive_attention(m0, shuffled_images, p).distinctiveness.data, d, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_monotone_in_best_match(seed):
    """Raising one region's best match (others fixed) strictly lowers its D."""
    rng = np.random.default_rng(seed)
    n0 = int(rng.integers(2, 6))
    d = n0 + 1
    m0 = np.eye(d)[:n0] * rng.uniform(0.5, 2.0, size=(n0, 1))
    j = int(rng.integers(n0))
    # every target row already has a non-negative best match, so a similar row
    # parallel to row j (orthogonal to the rest) only moves R_tilde[j]
    other = np.vstack([np.ones(d), rng.normal(size=(2, d))])
    others = [other, rng.normal(size=(3, d))]
    base = distinctive_attention(m0, others, GmaParams()).distinctiveness.data
    boosted = [np.vstack([other, m0[j] * 3.0]), others[1]]
    after = distinctive_attention(m0, boosted, GmaParams())
    before_rt = distinctive_attention(m0, others, GmaParams()).summary[0].data
    assert np.allclose(np.delete(after.summary[0].data, j), np.delete(before_rt, j))
    if before_rt[j] < 1 - 1e-9:
        assert after.distinctiveness.data[j] < base[j]


def test_gradcheck_attention():
    rng = np.random.default_rng(3)
    m0 = Parameter(rng.normal(size=(3, 4)), name="m0")
    mk = Parameter(rng.normal(size=(4, 4)), name="mk")
    p = GmaParams(0.8, 0.3)
    p.assign_names()
    w = Tensor(rng.normal(size=(3, 4)))
    fn = lambda: (distinctive_attention(m0, [mk], p).weighted_memory * w).sum()
    errs = gradcheck(fn, [m0, mk, p.omega, p.bias])
    assert max(errs.values()) < 1e-4, errs


def test_group_attention_matches_per_target():
    rng = np.random.default_rng(7)
    counts = [3, 5, 4, 2]
    mem = np.zeros((4, 5, 3))
    valid = np.zeros((4, 5), dtype=bool)
    rows = []
    for i, n in enumerate(counts):
        m = rng.normal(size=(n, 3))
        mem[i, :n] = m
        valid[i, :n] = True
        rows.append(m)
    p = GmaParams(1.3, 0.2)
    d, a, w = group_attention(Tensor(mem), valid, p)
    for t, n in enumerate(counts):
        ref = distinctive_attention(rows[t], [r for i, r in enumerate(rows) if i != t], p)
        np.testing.assert_allclose(d.data[t, :n], ref.distinctiveness.data, atol=1e-12)
        np.testing.assert_allclose(a.data[t, :n], ref.attention.data, atol=1e-12)
        np.testing.assert_allclose(w.data[t, :n], ref.weighted_memory.data, atol=1e-12)
        assert np.all(d.data[t, n:] < 1e-12)
    sub_d, _, _ = group_attention(Tensor(mem), valid, p, targets=[2])
    np.testing.assert_allclose(sub_d.data[0], d.data[2])


def test_group_attention_gradients_reach_all_members():
    rng = np.random.default_rng(8)
    mem = Parameter(rng.normal(size=(3, 2, 4)), name="mem")
    p = GmaParams()
    backward(group_attention(mem, None, p)[2].sum())
    assert np.all(np.abs(mem.grad).sum(axis=(1, 2)) > 0)
    assert p.omega.grad != 0
