"""InfoNCE-based objectives over segment and sequence representations."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .hierarchy import HierarchicalBatch
from .numerics import Tensor

RELATIONSHIPS = ("neither", "negative", "positive")
VARIANTS = ("hicl", "hiclv2", "global_only", "local_only")
_EXCLUDED = -1e9


class EmptyNegativesWarning(UserWarning):
    """An InfoNCE term had no negatives; its loss is 0."""


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.05
    alpha: float = 0.05
    beta: float = 0.0
    relationship: str = "neither"
    variant: str = "hicl"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("temperature tau must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.alpha + self.beta > 1.0:
            raise ValueError("alpha + beta must not exceed 1")
        if self.relationship not in RELATIONSHIPS:
            raise ValueError(f"relationship must be one of {RELATIONSHIPS}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


def info_nce(anchors, positives, negatives, mask, tau: float):
    """Per-anchor ``-log(e^{s+/τ} / (e^{s+/τ} + Σ_included e^{s-/τ}))`` and its mean.

    ``mask[i, k]`` says whether negative row k enters anchor i's denominator.
    Written as ``log1p(Σ_k e^{x_k})`` with ``x_k = (s_k - s+)/τ`` and a
    (gradient-free) max shift, so tiny losses keep full relative precision.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    anchors, positives = nx.as_tensor(anchors), nx.as_tensor(positives)
    if anchors.shape != positives.shape:
        raise ValueError(f"anchors {anchors.shape} and positives {positives.shape} must align")
    n = anchors.shape[0]
    if negatives is not None:
        negatives = nx.as_tensor(negatives)
    mask = np.asarray(mask, dtype=bool)
    if negatives is None or negatives.shape[0] == 0 or not mask.any():
        per = Tensor._wrap(np.zeros(n), False)
        return nx.mean(per), per
    if mask.shape != (n, negatives.shape[0]):
        raise ValueError(f"mask shape {mask.shape} != ({n}, {negatives.shape[0]})")

    a_hat = nx.normalize_rows(anchors)
    pos_sim = nx.sum(nx.mul(a_hat, nx.normalize_rows(positives)), axis=1, keepdims=True)
    neg_sim = nx.matmul(a_hat, nx.transpose(nx.normalize_rows(negatives)))
    x = nx.sub(nx.div(neg_sim, tau), nx.div(pos_sim, tau))
    keep = mask.astype(np.float64)
    x = nx.add(x, (1.0 - keep) * _EXCLUDED)
    shift = np.maximum(x.data.max(axis=1, keepdims=True), 0.0)
    terms = nx.mul(nx.exp(nx.sub(x, shift)), keep)
    per = nx.add(nx.log1p(nx.add(nx.sum(terms, axis=1), np.expm1(-shift[:, 0]))), shift[:, 0])
    return nx.mean(per), per


def _warn_if_empty(mask: np.ndarray, what: str):
    if mask.size == 0 or not mask.any(axis=1).all():
        warnings.warn(f"{what}: some anchors have no negatives; their loss is 0",
                      EmptyNegativesWarning, stacklevel=3)


def global_terms(hb_a: HierarchicalBatch, hb_b: HierarchicalBatch, cfg: LossConfig,
                 queue: Tensor | None = None) -> Tensor:
    n = hb_a.n_sequences
    negatives = hb_b.sequences.vectors
    mask = ~np.eye(n, dtype=bool)
    if queue is not None and queue.shape[0]:
        negatives = nx.concat([negatives, nx.detach(queue)], axis=0)
        mask = np.concatenate([mask, np.ones((n, queue.shape[0]), dtype=bool)], axis=1)
    _warn_if_empty(mask, "global loss")
    return info_nce(hb_a.sequences.vectors, hb_b.sequences.vectors, negatives, mask, cfg.tau)[1]


def global_loss(hb_a, hb_b, cfg: LossConfig, queue: Tensor | None = None) -> Tensor:
    """Sequence-level InfoNCE; in-batch negatives come from branch p+ (plus the queue)."""
    return nx.mean(global_terms(hb_a, hb_b, cfg, queue))


def local_terms(hb_a: HierarchicalBatch, hb_b: HierarchicalBatch, cfg: LossConfig) -> Tensor:
    """Per-anchor local losses, one per segment row of branch p."""
    parents = hb_a.parents
    if not np.array_equal(parents, hb_b.parents):
        raise ValueError("both branches must slice into aligned segments")
    m = len(parents)
    same = parents[:, None] == parents[None, :]
    seg_a, seg_b = hb_a.segments.vectors, hb_b.segments.vectors
    if cfg.relationship == "neither":
        mask = ~same
    elif cfg.relationship == "negative":
        mask = ~np.eye(m, dtype=bool)
    else:
        rows, cols = np.nonzero(same)  # includes (r, r): the dropout positive
        _warn_if_empty(~same, "local loss")
        _, terms = info_nce(nx.take(seg_a, rows), nx.take(seg_b, cols), seg_b, ~same[rows], cfg.tau)
        avg = np.zeros((m, len(rows)))
        avg[rows, np.arange(len(rows))] = 1.0
        avg /= avg.sum(axis=1, keepdims=True)
        return nx.reshape(nx.matmul(Tensor._wrap(avg, False), nx.reshape(terms, (-1, 1))), (m,))
    _warn_if_empty(mask, "local loss")
    return info_nce(seg_a, seg_b, seg_b, mask, cfg.tau)[1]


def local_loss(hb_a, hb_b, cfg: LossConfig) -> Tensor:
    return nx.mean(local_terms(hb_a, hb_b, cfg))


def entailment_terms(hb_a: HierarchicalBatch, hb_b: HierarchicalBatch, cfg: LossConfig) -> Tensor:
    parents = hb_a.parents
    n = hb_b.n_sequences
    seq_b = hb_b.sequences.vectors
    mask = parents[:, None] != np.arange(n)[None, :]
    _warn_if_empty(mask, "entailment loss")
    return info_nce(hb_a.segments.vectors, nx.take(seq_b, parents), seq_b, mask, cfg.tau)[1]


def entailment_loss(hb_a, hb_b, cfg: LossConfig) -> Tensor:
    """Segment anchors, parent sequence (branch p+) as positive, other sequences as negatives."""
    return nx.mean(entailment_terms(hb_a, hb_b, cfg))


def total_loss(hb_a, hb_b, cfg: LossConfig, queue: Tensor | None = None):
    """Weighted objective for ``cfg.variant`` and a float breakdown of its parts.

    Components outside the variant's objective are still reported but never
    reach the returned tensor, so they contribute no gradient.
    """
    with warnings.catch_warnings():
        if cfg.variant in ("local_only",):
            warnings.simplefilter("ignore", EmptyNegativesWarning)
        lg = global_loss(hb_a, hb_b, cfg, queue)
    ll = local_loss(hb_a, hb_b, cfg)
    parts = {"local": ll.item(), "global": lg.item()}
    if cfg.variant == "hicl":
        total = nx.add(nx.mul(ll, cfg.alpha), nx.mul(lg, 1.0 - cfg.alpha))
    elif cfg.variant == "hiclv2":
        le = entailment_loss(hb_a, hb_b, cfg)
        parts["entail"] = le.item()
        total = nx.add(nx.add(nx.mul(ll, cfg.alpha), nx.mul(le, cfg.beta)),
                       nx.mul(lg, 1.0 - cfg.alpha - cfg.beta))
    elif cfg.variant == "global_only":
        total = lg
    else:
        total = ll
    parts["total"] = total.item()
    return total, parts
