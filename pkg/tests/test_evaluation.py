import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hicl.encoder import init_params
from hicl.evaluation import (EvalReport, StsExample, evaluate, generate_synthetic,
                             predict_similarity, rankdata, spearman, synthetic_vocab)
from hicl.textproc import TokenSeq

# 4.5 / sqrt(22.5), frozen with mpmath
TIED_EXAMPLE = 0.94868329805051379960


def oracle_ranks(values):
    """Averaged ranks by exhaustive comparison: 1 + #smaller + (#equal - 1) / 2."""
    return [Fraction(2 + 2 * sum(w < v for w in values) + sum(w == v for w in values) - 1, 2)
            for v in values]


def oracle_spearman(x, y):
    rx, ry = oracle_ranks(x), oracle_ranks(y)
    n = len(x)
    mx, my = sum(rx) / n, sum(ry) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = sum((a - mx) ** 2 for a in rx)
    syy = sum((b - my) ** 2 for b in ry)
    # exact rational r^2 and sign; one rounding at the end
    r2 = sxy * sxy / (sxx * syy)
    return math.copysign(math.sqrt(r2), sxy) if sxy else 0.0


def tie_patterns(n):
    """One representative value list per composition of n (group sizes of equal values)."""
    out = []
    for cuts in itertools.product([0, 1], repeat=n - 1):
        vals, level = [0], 0
        for c in cuts:
            level += c
            vals.append(level)
        out.append(vals)
    return out


def test_spearman_examples():
    assert spearman([1, 2, 3], [10, 20, 30]) == 1.0
    assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
    assert abs(spearman([1, 2, 2, 4], [1, 3, 2, 4]) - TIED_EXAMPLE) < 1e-12


def test_spearman_errors():
    with pytest.raises(ValueError, match="length"):
        spearman([1, 2], [1, 2, 3])
    with pytest.raises(ValueError, match="constant"):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman([1], [1])


def test_rankdata_averages_ties():
    np.testing.assert_array_equal(rankdata([10, 20, 20, 5]), [2, 3.5, 3.5, 1])


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_spearman_matches_rank_oracle_on_all_permutations(n):
    patterns = tie_patterns(n)
    for x in patterns:
        for pattern in patterns:
            for y in set(itertools.permutations(pattern)):
                if len(set(x)) == 1 or len(set(y)) == 1:
                    with pytest.raises(ValueError):
                        spearman(x, y)
                    continue
                assert rankdata(y).tolist() == [float(r) for r in oracle_ranks(y)]
                assert abs(spearman(x, y) - oracle_spearman(x, y)) <= 1e-12


distinct_vectors = st.lists(st.integers(-10_000, 10_000), min_size=3, max_size=30, unique=True)


@settings(max_examples=200)
@given(distinct_vectors, st.integers(0, 2**32 - 1))
def test_spearman_invariant_under_increasing_transforms(xs, seed):
    x = np.array(xs, dtype=float) / 997.0
    y = np.random.default_rng(seed).permutation(len(xs)) / 3.0 - 2.0
    base = spearman(x, y)
    for t in (np.exp, lambda v: 3.0 * v - 7.0, lambda v: v ** 3):
        assert abs(spearman(t(x), y) - base) < 1e-12
        assert abs(spearman(x, t(y)) - base) < 1e-12


@settings(max_examples=100)
@given(distinct_vectors)
def test_spearman_self_is_one(xs):
    assert spearman(xs, xs) == pytest.approx(1.0, abs=1e-15)


@pytest.fixture(scope="module")
def params():
    return init_params(0, d=16, n_heads=2, n_layers=1, vocab_size=1005)


def test_identical_sentences_similarity_one(params):
    s = TokenSeq.from_body(range(5, 45))
    assert abs(predict_similarity(params, (s, s), 16) - 1.0) < 1e-10


def test_similarity_range_and_symmetry(params):
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = TokenSeq.from_body(rng.integers(5, 1005, size=int(rng.integers(1, 60))).tolist())
        b = TokenSeq.from_body(rng.integers(5, 1005, size=int(rng.integers(1, 60))).tolist())
        ab, ba = predict_similarity(params, (a, b), 16), predict_similarity(params, (b, a), 16)
        assert -1.0 <= ab <= 1.0
        assert abs(ab - ba) < 1e-12


def test_evaluate_identity_and_antitone(params):
    _, examples = generate_synthetic(1, 20)
    preds = evaluate(params, examples, 16).predictions
    same = [StsExample(e.s1, e.s2, p) for e, p in zip(examples, preds)]
    flipped = [StsExample(e.s1, e.s2, -p) for e, p in zip(examples, preds)]
    assert evaluate(params, same, 16).rho == pytest.approx(1.0, abs=1e-15)
    assert evaluate(params, flipped, 16).rho == pytest.approx(-1.0, abs=1e-15)


def test_evaluate_matches_pairwise_predictions(params):
    _, examples = generate_synthetic(2, 6)
    report = evaluate(params, examples, 16)
    direct = [predict_similarity(params, (e.s1, e.s2), 16) for e in examples]
    np.testing.assert_allclose(report.predictions, direct, atol=1e-12)
    assert report.n == 6
    assert report.to_tsv().startswith(f"# spearman\t{report.rho!r}\n")


def test_evaluate_needs_two_pairs(params):
    _, examples = generate_synthetic(1, 1)
    with pytest.raises(ValueError):
        evaluate(params, examples, 16)


def test_synthetic_counts_and_golds():
    corpus, examples = generate_synthetic(7, 200)
    assert len(corpus) == 400 and len(examples) == 200
    assert {e.gold for e in examples} <= {0.0, 1.0, 2.0, 3.0, 4.0, 5.0}
    for e in examples:
        shared = sum(a == b for a, b in zip(e.s1.body, e.s2.body))
        assert shared >= e.gold / 5 * 30 - 1e-9  # resampled positions may collide by chance
        if e.gold == 5.0:
            assert e.s1 == e.s2
        assert len(e.s1) == len(e.s2) == 32


def test_synthetic_zero_overlap_collision_rate():
    # disjoint token multisets with probability >= 1 - len^2 / vocab per p=0 pair
    _, examples = generate_synthetic(3, 400, vocab_size=5000, body_length=10)
    zero = [e for e in examples if e.gold == 0.0]
    disjoint = sum(not set(e.s1.body) & set(e.s2.body) for e in zero)
    assert disjoint / len(zero) >= 1 - 10 ** 2 / 5000 - 0.05


def test_synthetic_determinism_and_splits():
    a = generate_synthetic(4, 10)
    b = generate_synthetic(4, 10)
    c = generate_synthetic(4, 10, split=1)
    assert a[0] == b[0]
    assert a[0] != c[0]


def test_synthetic_validates():
    with pytest.raises(ValueError):
        generate_synthetic(0, 5, vocab_size=49)
    with pytest.raises(ValueError):
        generate_synthetic(0, 5, body_length=7)


def test_synthetic_vocab_round_trip():
    vocab = synthetic_vocab(1000)
    assert vocab.id("w0") == 5 and vocab.id("w999") == 1004


def test_eval_report_tsv_with_golds():
    text = EvalReport([0.5, 0.25], 1.0, 2).to_tsv([3.0, 1.0])
    assert text.splitlines()[2:] == ["0\t0.5\t3.0", "1\t0.25\t1.0"]


def test_trained_model_ranks_near_duplicate_above_unrelated(trained_run):
    params = trained_run.best.params
    rng = np.random.default_rng(1)
    wins = 0
    for _ in range(20):
        s1 = TokenSeq.from_body(rng.integers(5, 1005, size=14).tolist())
        s2 = TokenSeq.from_body(list(s1.body) + [int(rng.integers(5, 1005))])
        other = TokenSeq.from_body(rng.integers(5, 1005, size=14).tolist())
        near = predict_similarity(params, (s1, s2), 16)
        assert near < 1.0
        wins += near > predict_similarity(params, (s1, other), 16)
    assert wins == 20
