"""Tokenization, fixed-length slicing, corpus/STS ingestion and length statistics."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

CLS, SEP, PAD, UNK, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[PAD]", "[UNK]", "[MASK]")
MAX_LEN = 512
DEFAULT_TOP_K = 30_000

# Table-2 style buckets: (lo, hi] except the first, which is closed at 0
BUCKETS = ((0, 32), (32, 64), (64, 96), (96, 128), (128, 256), (256, 512))


class DataFormatError(ValueError):
    """A corpus/STS/vocab file line could not be parsed."""

    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


class Vocab:
    """Token → id map with the five specials fixed at ids 0..4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        return " ".join(self.itos[i] for i in ids if not (skip_special and i < len(SPECIAL_TOKENS)))

    @classmethod
    def build(cls, lines: Iterable[str], top_k: int = DEFAULT_TOP_K) -> "Vocab":
        """Most frequent ``top_k`` whitespace tokens; frequency ties broken by first appearance."""
        counts: Counter = Counter()
        for line in lines:
            counts.update(line.lower().split())
        # Counter.most_common is stable w.r.t. insertion order on ties
        return cls(tok for tok, _ in counts.most_common(top_k) if tok not in SPECIAL_TOKENS)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(SPECIAL_TOKENS):]),
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        tokens = text.split("\n")
        if tokens and tokens[-1] == "":
            tokens.pop()
        for n, tok in enumerate(tokens, start=1):
            if not tok or any(c.isspace() for c in tok):
                raise DataFormatError(path, n, f"invalid vocab entry {tok!r}")
        return cls(tokens)


@dataclass(frozen=True)
class TokenSeq:
    """Token ids with leading CLS and trailing SEP.

    ``origin`` is set only for augmented copies: entry k is the position in
    the source sequence that token k was copied from.
    """

    ids: tuple[int, ...]
    line: int | None = None
    origin: tuple[int, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.ids) < 2 or self.ids[0] != CLS or self.ids[-1] != SEP:
            raise ValueError("TokenSeq must start with CLS, end with SEP and hold >= 2 ids")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def body(self) -> tuple[int, ...]:
        return self.ids[1:-1]

    @classmethod
    def from_body(cls, body: Iterable[int], line: int | None = None) -> "TokenSeq":
        return cls((CLS, *body, SEP), line)


@dataclass(frozen=True)
class SegmentView:
    parent: int
    index: int
    ids: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.ids)


def tokenize(line: str, vocab: Vocab, line_no: int | None = None, max_len: int = MAX_LEN) -> TokenSeq:
    """Lowercase, split on whitespace, map through ``vocab``; truncates to ``max_len`` ids."""
    body = [vocab.id(tok) for tok in line.lower().split()]
    body = body[: max_len - 2]
    return TokenSeq.from_body(body, line_no)


def num_segments(length: int, L: int) -> int:
    return 1 + (length - 1) // L


def slice_sequence(seq: TokenSeq | Sequence[int], L: int, parent: int = 0) -> list[SegmentView]:
    """Cut into consecutive non-overlapping runs of ``L`` ids; the remainder forms the last segment."""
    if L < 1:
        raise ValueError("slicing length L must be >= 1")
    ids = tuple(seq.ids if isinstance(seq, TokenSeq) else seq)
    return [SegmentView(parent, j, ids[j * L:(j + 1) * L]) for j in range(num_segments(len(ids), L))]


def slice_by_origin(seq: TokenSeq, L: int, parent: int = 0) -> list[SegmentView]:
    """Slice an augmented sequence along its source sequence's segment boundaries.

    Token k goes to segment ``origin[k] // L``, so segment j here lines up
    with segment j of the source even when tokens were duplicated.
    """
    if seq.origin is None:
        return slice_sequence(seq, L, parent)
    if L < 1:
        raise ValueError("slicing length L must be >= 1")
    groups: dict[int, list[int]] = {}
    for tok, src in zip(seq.ids, seq.origin):
        groups.setdefault(src // L, []).append(tok)
    return [SegmentView(parent, j, tuple(groups[j])) for j in sorted(groups)]


@dataclass
class CorpusStats:
    boundaries: tuple[tuple[int, int], ...]
    proportions: list[float]  # percent per bucket, last entry is the >512 overflow
    segment_counts: list[int]  # l_i per sequence, corpus order
    histogram: dict[int, int]
    L: int
    n: int

    @property
    def frac_at_most_3_segments(self) -> float:
        return 100.0 * sum(c for k, c in self.histogram.items() if k <= 3) / self.n

    def labels(self) -> list[str]:
        out = []
        for lo, hi in self.boundaries:
            out.append(f"[{lo}, {hi}]" if lo == 0 else f"({lo}, {hi}]")
        out.append(f"({self.boundaries[-1][1]}, inf)")
        return out

    def format_table(self) -> str:
        lines = ["input_length\tproportion"]
        for label, p in zip(self.labels(), self.proportions):
            lines.append(f"{label}\t{p:.3f}%")
        lines.append("")
        lines.append(f"segments(L={self.L})\tcount")
        for k in sorted(self.histogram):
            lines.append(f"{k}\t{self.histogram[k]}")
        lines.append(f"<=3 segments\t{self.frac_at_most_3_segments:.3f}%")
        return "\n".join(lines)


def corpus_stats(corpus: Sequence[TokenSeq | int], L: int) -> CorpusStats:
    """Length distribution in Table-2 buckets plus segment counts under slicing length ``L``.

    Accepts TokenSeqs or bare lengths.
    """
    if not corpus:
        raise ValueError("corpus_stats needs a nonempty corpus")
    lengths = [x if isinstance(x, int) else len(x) for x in corpus]
    counts = [0] * (len(BUCKETS) + 1)
    for n in lengths:
        for b, (lo, hi) in enumerate(BUCKETS):
            if n <= hi:
                counts[b] += 1
                break
        else:
            counts[-1] += 1
    total = len(lengths)
    proportions = [100.0 * c / total for c in counts]
    segs = [num_segments(n, L) for n in lengths]
    return CorpusStats(BUCKETS, proportions, segs, dict(sorted(Counter(segs).items())), L, total)


def _read_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [ln[:-1] if ln.endswith("\r") else ln for ln in lines]


def read_corpus_lines(path) -> list[str]:
    return _read_lines(path)


def load_corpus(path, vocab: Vocab) -> list[TokenSeq]:
    return [tokenize(line, vocab, n) for n, line in enumerate(_read_lines(path), start=1)]


def read_sts_lines(path) -> list[tuple[str, str, float]]:
    rows = []
    for n, line in enumerate(_read_lines(path), start=1):
        fields = line.split("\t")
        if len(fields) != 3:
            raise DataFormatError(path, n, f"expected 3 tab-separated fields, got {len(fields)}")
        try:
            score = float(fields[2])
        except ValueError:
            raise DataFormatError(path, n, f"unparsable score {fields[2]!r}") from None
        if not (math.isfinite(score) and 0.0 <= score <= 5.0):
            raise DataFormatError(path, n, f"score {score} outside [0, 5]")
        rows.append((fields[0], fields[1], score))
    return rows


def load_sts(path, vocab: Vocab) -> list[tuple[TokenSeq, TokenSeq, float]]:
    return [(tokenize(a, vocab), tokenize(b, vocab), s) for a, b, s in read_sts_lines(path)]
