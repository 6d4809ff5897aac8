import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hicl.textproc import (CLS, SEP, UNK, DataFormatError, TokenSeq, Vocab, corpus_stats,
                           load_corpus, load_sts, num_segments, read_sts_lines, slice_by_origin,
                           slice_sequence, tokenize)


def seq_of_length(n, offset=5):
    return TokenSeq.from_body(range(offset, offset + n - 2))


def check_segmentation(seq, L):
    segs = slice_sequence(seq, L)
    assert tuple(t for s in segs for t in s.ids) == seq.ids
    assert len(segs) == 1 + (len(seq) - 1) // L
    assert all(s.length == L for s in segs[:-1])
    assert 1 <= segs[-1].length <= L
    assert [s.index for s in segs] == list(range(len(segs)))


def test_tokenize_known_words():
    vocab = Vocab(["hello", "world"])
    seq = tokenize("Hello world", vocab)
    assert len(seq) == 4
    assert seq.ids == (CLS, vocab.id("hello"), vocab.id("world"), SEP)


def test_tokenize_empty_line():
    assert tokenize("", Vocab()).ids == (CLS, SEP)


def test_tokenize_unknown_falls_back():
    assert tokenize("zzz-unknown-token", Vocab()).ids == (CLS, UNK, SEP)


def test_tokenize_truncates_to_512():
    vocab = Vocab(["a"])
    seq = tokenize(" ".join(["a"] * 600), vocab)
    assert len(seq) == 512
    assert seq.ids[-1] == SEP


@settings(max_examples=200)
@given(st.text())
def test_tokenize_total_and_deterministic(line):
    vocab = Vocab(["a", "b"])
    assert tokenize(line, vocab) == tokenize(line, vocab)


def test_vocab_specials_and_density(tmp_path):
    vocab = Vocab.build(["b a b", "c b a"], top_k=2)
    assert vocab.itos[:5] == ["[CLS]", "[SEP]", "[PAD]", "[UNK]", "[MASK]"]
    assert vocab.itos[5:] == ["b", "a"]
    vocab.save(tmp_path / "v.txt")
    again = Vocab.load(tmp_path / "v.txt")
    assert again.itos == vocab.itos
    assert sorted(again.stoi.values()) == list(range(len(again)))


def test_tokenseq_invariants():
    with pytest.raises(ValueError):
        TokenSeq((CLS,))
    with pytest.raises(ValueError):
        TokenSeq((5, SEP))


@pytest.mark.parametrize("n,lengths", [(70, [32, 32, 6]), (32, [32]), (33, [32, 1])])
def test_slice_examples(n, lengths):
    segs = slice_sequence(seq_of_length(n), 32)
    assert [s.length for s in segs] == lengths
    assert num_segments(n, 32) == len(lengths)


def test_slice_rejects_bad_L():
    with pytest.raises(ValueError):
        slice_sequence(seq_of_length(5), 0)


@settings(max_examples=500)
@given(st.integers(2, 512), st.integers(1, 64))
def test_slice_invariants_property(n, L):
    check_segmentation(seq_of_length(n), L)


def test_slice_round_trip_10k_random_cases():
    rng = np.random.default_rng(0)
    for n, L in zip(rng.integers(2, 513, 10_000), rng.integers(1, 65, 10_000)):
        check_segmentation(seq_of_length(int(n)), int(L))


def test_slice_by_origin_without_origin_matches_slice():
    seq = seq_of_length(40)
    assert slice_by_origin(seq, 16) == slice_sequence(seq, 16)


def test_slice_by_origin_follows_source_boundaries():
    # token at source position 3 duplicated: boundary stays after source position 3 (L=4)
    src = seq_of_length(8)
    ids = src.ids[:4] + (src.ids[3],) + src.ids[4:]
    aug = TokenSeq(ids, origin=(0, 1, 2, 3, 3, 4, 5, 6, 7))
    segs = slice_by_origin(aug, 4)
    assert [s.length for s in segs] == [5, 4]
    assert segs[0].ids == src.ids[:4] + (src.ids[3],)


def test_corpus_stats_example():
    stats = corpus_stats([10, 40, 100], 32)
    np.testing.assert_allclose(stats.proportions, [100 / 3, 100 / 3, 0, 100 / 3, 0, 0, 0])
    assert stats.segment_counts == [1, 2, 4]


def test_corpus_stats_bucket_listing():
    # 100 lies in (96, 128]; the listing order is [0,32], (32,64], (64,96], (96,128], ...
    stats = corpus_stats([10, 40, 100], 32)
    by_label = dict(zip(stats.labels(), stats.proportions))
    assert by_label["[0, 32]"] == pytest.approx(100 / 3)
    assert by_label["(32, 64]"] == pytest.approx(100 / 3)
    assert by_label["(96, 128]"] == pytest.approx(100 / 3)
    assert by_label["(64, 96]"] == 0.0


def test_corpus_stats_single_bucket():
    stats = corpus_stats([seq_of_length(32)], 32)
    assert stats.proportions[0] == 100.0
    assert stats.frac_at_most_3_segments == 100.0
    assert "[0, 32]\t100.000%" in stats.format_table()


def test_corpus_stats_empty_is_error():
    with pytest.raises(ValueError):
        corpus_stats([], 32)


@settings(max_examples=300)
@given(st.lists(st.integers(2, 700), min_size=1, max_size=50), st.integers(1, 64))
def test_corpus_stats_proportions_sum_to_100(lengths, L):
    assert abs(sum(corpus_stats(lengths, L).proportions) - 100.0) <= 1e-9


def test_load_corpus_keeps_file_order(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("a b\nc\n\n", encoding="utf-8")
    vocab = Vocab(["a", "b", "c"])
    seqs = load_corpus(path, vocab)
    assert [s.line for s in seqs] == [1, 2, 3]
    assert [len(s) for s in seqs] == [4, 3, 2]


def test_load_sts_parses(tmp_path):
    path = tmp_path / "s.tsv"
    path.write_text("a dog.\ta cat.\t2.6\n", encoding="utf-8")
    (s1, s2, gold), = load_sts(path, Vocab(["a", "dog.", "cat."]))
    assert gold == 2.6
    assert len(s1) == 4 and len(s2) == 4


@pytest.mark.parametrize("line,reason", [
    ("a\tb\tabc", "unparsable score"),
    ("a\tb", "expected 3"),
    ("a\tb\t7.5", "outside"),
])
def test_load_sts_errors_name_line(tmp_path, line, reason):
    path = tmp_path / "s.tsv"
    path.write_text("x\ty\t1.0\n" + line + "\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match=reason) as err:
        read_sts_lines(path)
    assert err.value.line_no == 2
    assert ":2:" in str(err.value)
