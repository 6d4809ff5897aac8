"""STS-style evaluation: cosine scoring of sentence pairs and Spearman correlation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoder import EncoderParams
from .hierarchy import hierarchical_encode
from .numerics import RngStream
from .textproc import SPECIAL_TOKENS, TokenSeq, Vocab

SHARED_FRACTIONS = (0, 1, 2, 3, 4, 5)  # in fifths: p ∈ {0, 0.2, ..., 1.0}


@dataclass(frozen=True)
class StsExample:
    s1: TokenSeq
    s2: TokenSeq
    gold: float

    def __post_init__(self):
        if not np.isfinite(self.gold):
            raise ValueError("gold score must be finite")


@dataclass
class EvalReport:
    predictions: list[float]
    rho: float
    n: int

    def to_tsv(self, golds: Sequence[float] | None = None) -> str:
        lines = [f"# spearman\t{self.rho!r}", f"# pairs\t{self.n}"]
        if golds is None:
            lines += [f"{i}\t{p!r}" for i, p in enumerate(self.predictions)]
        else:
            lines += [f"{i}\t{p!r}\t{g!r}" for i, (p, g) in enumerate(zip(self.predictions, golds))]
        return "\n".join(lines) + "\n"


def rankdata(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the average of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(len(x))
    start = 0
    # walk runs of equal values in sorted order
    boundaries = np.flatnonzero(np.diff(sorted_x) != 0) + 1
    for end in (*boundaries, len(x)):
        ranks[order[start:end]] = 0.5 * (start + 1 + end)
        start = end
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise ValueError("spearman needs at least two observations")
    rx, ry = rankdata(x), rankdata(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("spearman is undefined for a constant input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def _cosine_rows(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))


def predict_similarity(params: EncoderParams, pair, L: int, mode: str = "weighted") -> float:
    """Cosine of the pooled (dropout-off) representations of the two sentences."""
    s1, s2 = pair[0], pair[1]
    h1 = hierarchical_encode(params, [s1], L, mode).sequences.vectors
    h2 = hierarchical_encode(params, [s2], L, mode).sequences.vectors
    return float(nx.cosine_sim(h1[0], h2[0]).item())


def embed_sequences(params: EncoderParams, seqs: Sequence[TokenSeq], L: int,
                    mode: str = "weighted", chunk: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(seqs), chunk):
        hb = hierarchical_encode(params, seqs[start:start + chunk], L, mode)
        out.append(hb.sequences.vectors.data)
    return np.concatenate(out, axis=0)


def evaluate(params: EncoderParams, dataset: Sequence[StsExample], L: int,
             mode: str = "weighted") -> EvalReport:
    """Spearman correlation between predicted cosine similarities and gold scores."""
    if len(dataset) < 2:
        raise ValueError("evaluation needs at least two pairs")
    h = embed_sequences(params, [ex.s1 for ex in dataset] + [ex.s2 for ex in dataset], L, mode)
    n = len(dataset)
    preds = _cosine_rows(h[:n], h[n:])
    return EvalReport(preds.tolist(), spearman(preds, [ex.gold for ex in dataset]), n)


def synthetic_vocab(vocab_size: int) -> Vocab:
    """Word ``w{k}`` maps to id ``k + 5``."""
    return Vocab(f"w{k}" for k in range(vocab_size))


def generate_synthetic(seed: int, n_pairs: int, vocab_size: int = 1000, body_length: int = 30,
                       split: int = 0):
    """Sentence pairs whose gold score is five times their shared-token fraction.

    Sentence 2 keeps ⌊p·len⌋ randomly chosen positions of sentence 1 and
    resamples the rest uniformly, with p drawn from {0, 0.2, ..., 1}.
    ``split`` selects an independent draw for the same seed (train/dev/test).
    Returns ``(corpus, examples)``; the corpus lists every generated sentence.
    """
    if vocab_size < 50:
        raise ValueError("vocab_size must be >= 50")
    if body_length < 8:
        raise ValueError("body_length must be >= 8")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = RngStream(seed, "data").generator(split)
    offset = len(SPECIAL_TOKENS)
    corpus, examples = [], []
    for _ in range(n_pairs):
        fifths = int(rng.choice(SHARED_FRACTIONS))
        s1 = rng.integers(0, vocab_size, size=body_length) + offset
        s2 = rng.integers(0, vocab_size, size=body_length) + offset
        keep = rng.choice(body_length, size=(fifths * body_length) // 5, replace=False)
        s2[keep] = s1[keep]
        a, b = TokenSeq.from_body(s1.tolist()), TokenSeq.from_body(s2.tolist())
        corpus += [a, b]
        examples.append(StsExample(a, b, float(fifths)))
    return corpus, examples
