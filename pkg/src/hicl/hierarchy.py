"""Segment → sequence aggregation and the slice/encode/pool pipeline."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoder import OFF, WHOLE, DropoutBranch, EmbeddingBatch, EncoderParams, encode, with_cls
from .textproc import TokenSeq, slice_by_origin

POOLING_MODES = ("weighted", "unweighted")


def pooling_weights(parents: Sequence[int], lengths: Sequence[int], mode: str = "weighted") -> np.ndarray:
    """Dense (n_sequences × n_segments) weight matrix; each row sums to one."""
    if mode not in POOLING_MODES:
        raise ValueError(f"pooling mode must be one of {POOLING_MODES}, got {mode!r}")
    if len(parents) != len(lengths):
        raise ValueError("one length per segment row is required")
    for r, p in enumerate(parents):
        if p is None or p < 0:
            raise ValueError(f"orphan segment row {r} (parent {p!r})")
    if any(n <= 0 for n in lengths):
        raise ValueError("segment lengths must be positive")
    n_seq = max(parents) + 1
    W = np.zeros((n_seq, len(parents)))
    for r, p in enumerate(parents):
        W[p, r] = lengths[r] if mode == "weighted" else 1.0
    totals = W.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        missing = np.flatnonzero(totals[:, 0] == 0).tolist()
        raise ValueError(f"sequences {missing} have no segments (zero total length)")
    if mode == "weighted":
        return W / totals
    counts = (W > 0).sum(axis=1, keepdims=True)
    return np.where(W > 0, 1.0 / counts, 0.0)


def pool(segments: EmbeddingBatch, lengths: Sequence[int], mode: str = "weighted") -> EmbeddingBatch:
    """h_i = Σ_j w_ij h_ij over the segment rows whose provenance names sequence i."""
    parents = [p for p, _, _ in segments.provenance]
    W = pooling_weights(parents, lengths, mode)
    vectors = nx.matmul(nx.Tensor._wrap(W, False), segments.vectors)
    label = segments.provenance[0][2] if segments.provenance else "off"
    return EmbeddingBatch(vectors, [(i, WHOLE, label) for i in range(W.shape[0])])


@dataclass
class HierarchicalBatch:
    segments: EmbeddingBatch
    sequences: EmbeddingBatch
    weights: np.ndarray  # per segment row
    parents: np.ndarray  # segment row -> sequence row
    lengths: np.ndarray  # token count of each segment (before CLS re-attachment)

    @property
    def n_sequences(self) -> int:
        return len(self.sequences)

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @classmethod
    def from_segments(cls, vectors, parents: Sequence[int], lengths: Sequence[int],
                      mode: str = "weighted", label: str = "off") -> "HierarchicalBatch":
        """Build a batch directly from segment vectors (no encoder involved)."""
        vectors = nx.as_tensor(vectors)
        seg_index, prov = {}, []
        for p in parents:
            j = seg_index.get(p, 0)
            seg_index[p] = j + 1
            prov.append((p, j, label))
        segs = EmbeddingBatch(vectors, prov)
        seqs = pool(segs, lengths, mode)
        W = pooling_weights(list(parents), lengths, mode)
        parents = np.asarray(parents, dtype=np.intp)
        return cls(segs, seqs, W[parents, np.arange(len(parents))], parents,
                   np.asarray(lengths, dtype=np.intp))


def segment_batch(batch: Sequence[TokenSeq], L: int):
    """Slice every sequence; returns (encoder inputs, provenance, lengths)."""
    inputs, prov, lengths = [], [], []
    for i, seq in enumerate(batch):
        for seg in slice_by_origin(seq, L, parent=i):
            inputs.append(with_cls(seg.ids))
            prov.append((i, seg.index))
            lengths.append(seg.length)
    return inputs, prov, lengths


def hierarchical_encode(params: EncoderParams, batch: Sequence[TokenSeq], L: int,
                        mode: str = "weighted", branch: DropoutBranch = OFF) -> HierarchicalBatch:
    """Slice each sequence, encode all segments in one call, and pool per sequence."""
    if not batch:
        raise ValueError("hierarchical_encode needs a nonempty batch")
    inputs, prov, lengths = segment_batch(batch, L)
    segs = encode(params, inputs, branch, prov)
    seqs = pool(segs, lengths, mode)
    parents = np.array([p for p, _ in prov], dtype=np.intp)
    W = pooling_weights(parents.tolist(), lengths, mode)
    return HierarchicalBatch(segs, seqs, W[parents, np.arange(len(parents))], parents,
                             np.asarray(lengths, dtype=np.intp))
