import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hicl import numerics as nx
from hicl.encoder import encode, init_params, with_cls
from hicl.hierarchy import HierarchicalBatch, hierarchical_encode, pooling_weights, segment_batch
from hicl.numerics import finite_diff_check, value_and_grad
from hicl.textproc import CLS, TokenSeq

# 32/70 and 6/70, frozen from exact rational arithmetic
W32_70 = 0.45714285714285714
W6_70 = 0.08571428571428571


@pytest.fixture(scope="module")
def params():
    return init_params(2, d=16, n_heads=2, n_layers=1, vocab_size=40)


def body_seq(n, start=5):
    return TokenSeq.from_body([5 + (start + k) % 30 for k in range(n - 2)])


def test_weighted_example():
    W = pooling_weights([0, 0, 0], [32, 32, 6])
    np.testing.assert_allclose(W[0], [W32_70, W32_70, W6_70], rtol=1e-15)


def test_equal_lengths_both_modes():
    for mode in ("weighted", "unweighted"):
        np.testing.assert_array_equal(pooling_weights([0, 0], [32, 32], mode)[0], [0.5, 0.5])


def test_single_segment_identity():
    v = np.array([[1.0, -2.0, 3.0]])
    hb = HierarchicalBatch.from_segments(v, [0], [7])
    np.testing.assert_array_equal(hb.sequences.vectors.data, v)
    assert hb.weights.tolist() == [1.0]


def test_unweighted_is_uniform():
    W = pooling_weights([0, 0, 0, 1], [32, 32, 6, 4], "unweighted")
    np.testing.assert_allclose(W, [[1 / 3, 1 / 3, 1 / 3, 0], [0, 0, 0, 1]])


@pytest.mark.parametrize("parents,lengths,msg", [
    ([0, -1], [3, 3], "orphan"),
    ([0, 0], [3, 0], "positive"),
    ([0, 2], [3, 3], "no segments"),
])
def test_weight_errors(parents, lengths, msg):
    with pytest.raises(ValueError, match=msg):
        pooling_weights(parents, lengths)


segment_layouts = st.lists(st.integers(1, 4), min_size=1, max_size=5).flatmap(
    lambda counts: st.tuples(st.just(counts),
                             st.lists(st.integers(1, 64), min_size=sum(counts), max_size=sum(counts))))


@settings(max_examples=200, deadline=None)
@given(segment_layouts, st.sampled_from(["weighted", "unweighted"]), st.integers(0, 2**31))
def test_pooling_invariants(layout, mode, seed):
    counts, lengths = layout
    parents = [i for i, c in enumerate(counts) for _ in range(c)]
    vecs = np.random.default_rng(seed).normal(size=(len(parents), 5))
    hb = HierarchicalBatch.from_segments(vecs, parents, lengths, mode)
    W = pooling_weights(parents, lengths, mode)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-12)
    h = hb.sequences.vectors.data
    for i in range(len(counts)):
        rows = vecs[np.asarray(parents) == i]
        assert np.all(h[i] >= rows.min(axis=0) - 1e-10)
        assert np.all(h[i] <= rows.max(axis=0) + 1e-10)
        np.testing.assert_allclose(h[i], W[i] @ vecs, atol=1e-10)
    if len(set(lengths)) == 1:
        other = "unweighted" if mode == "weighted" else "weighted"
        h2 = HierarchicalBatch.from_segments(vecs, parents, lengths, other).sequences.vectors.data
        np.testing.assert_allclose(h, h2, atol=1e-12)


def test_segment_gradient_equals_weight_times_outer():
    rng = np.random.default_rng(9)
    parents, lengths = [0, 0, 0, 1], [32, 32, 6, 5]
    vecs = rng.normal(size=(4, 3))
    outer = rng.normal(size=(2, 3))

    def f(v):
        hb = HierarchicalBatch.from_segments(v, parents, lengths)
        return nx.sum(nx.mul(hb.sequences.vectors, outer))

    _, (g,) = value_and_grad(f, [vecs])
    W = pooling_weights(parents, lengths)
    for r, p in enumerate(parents):
        np.testing.assert_allclose(g.data[r], W[p, r] * outer[p], rtol=1e-14)
    assert finite_diff_check(f, [vecs]).max_rel_err < 1e-6


def test_segment_batch_keeps_single_cls():
    inputs, prov, lengths = segment_batch([body_seq(70)], 32)
    assert lengths == [32, 32, 6]
    assert prov == [(0, 0), (0, 1), (0, 2)]
    assert inputs[0] == with_cls(inputs[0])  # first segment already starts with CLS
    assert inputs[0].count(CLS) == 1 and len(inputs[0]) == 32
    assert all(x[0] == CLS and len(x) == n + 1 for x, n in zip(inputs[1:], lengths[1:]))


def test_encode_two_sequences_counts(params):
    hb = hierarchical_encode(params, [body_seq(70), body_seq(20)], 32)
    assert hb.n_segments == 4 and hb.n_sequences == 2
    assert hb.parents.tolist() == [0, 0, 0, 1]


def test_short_sequence_equals_its_segment(params):
    seq = body_seq(12)
    hb = hierarchical_encode(params, [seq], 32)
    np.testing.assert_array_equal(hb.sequences.vectors.data, hb.segments.vectors.data)
    np.testing.assert_array_equal(hb.sequences.vectors.data, encode(params, [seq.ids]).vectors.data)


def test_modes_agree_on_equal_segments(params):
    seq = body_seq(64)
    a = hierarchical_encode(params, [seq], 32, "weighted").sequences.vectors.data
    b = hierarchical_encode(params, [seq], 32, "unweighted").sequences.vectors.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_empty_batch_is_error(params):
    with pytest.raises(ValueError):
        hierarchical_encode(params, [], 32)
