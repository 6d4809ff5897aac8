"""Toy pre-LN transformer encoder with CLS-state sentence representations."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import RngStream, Tensor
from .textproc import CLS, MAX_LEN, PAD

WHOLE = -1  # segment id used in provenance rows of whole-sequence vectors
BRANCHES = ("p", "p+", "off")
_MASK_BIAS = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_positions: int = MAX_LEN
    dropout: float = 0.1

    def __post_init__(self):
        if self.d < 1 or self.n_heads < 1 or self.n_layers < 1 or self.vocab_size < 1:
            raise ValueError("encoder dimensions must be positive")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if not 1 <= self.max_positions <= MAX_LEN:
            raise ValueError(f"max_positions must lie in [1, {MAX_LEN}]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")


def param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter order; checkpoints serialize in exactly this order."""
    d, f = cfg.d, 4 * cfg.d
    shapes = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.max_positions, d))]
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "w_q", (d, d)), (p + "b_q", (d,)),
            (p + "w_k", (d, d)), (p + "b_k", (d,)),
            (p + "w_v", (d, d)), (p + "b_v", (d,)),
            (p + "w_o", (d, d)), (p + "b_o", (d,)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "w_1", (d, f)), (p + "b_1", (f,)),
            (p + "w_2", (f, d)), (p + "b_2", (d,)),
        ]
    shapes += [("lnf_g", (d,)), ("lnf_b", (d,))]
    return shapes


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, Tensor]

    def flat(self) -> list[Tensor]:
        return [self.tensors[name] for name, _ in param_shapes(self.config)]

    def names(self) -> list[str]:
        return [name for name, _ in param_shapes(self.config)]

    def replace(self, tensors: Sequence) -> "EncoderParams":
        """Same config, parameters taken positionally from ``tensors`` (canonical order)."""
        names = self.names()
        if len(tensors) != len(names):
            raise ValueError(f"expected {len(names)} tensors, got {len(tensors)}")
        return EncoderParams(self.config, {n: nx.as_tensor(t) for n, t in zip(names, tensors)})

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {n: Tensor(t.data) for n, t in self.tensors.items()})

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self.tensors.values()]))


def init_params(seed: int, d: int = 64, n_heads: int = 4, n_layers: int = 2,
                vocab_size: int = 1000, max_positions: int = MAX_LEN,
                dropout: float = 0.1) -> EncoderParams:
    """Scaled-uniform initialization: weights U(-1/sqrt(fan_in), +), LN gains 1, biases 0."""
    cfg = EncoderConfig(vocab_size, d, n_heads, n_layers, max_positions, dropout)
    rng = RngStream(seed, "init").generator(0)
    tensors = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.startswith("b_") or leaf.endswith("_b"):
            arr = np.zeros(shape)
        else:
            fan_in = shape[1] if leaf.endswith("emb") else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(arr)
    return EncoderParams(cfg, tensors)


@dataclass
class DropoutBranch:
    """Which dropout masks to use: ``p``/``p+`` draw from independent streams, ``off`` disables."""

    label: str = "off"
    rate: float = 0.0
    seed: int = 0
    index: int = 0  # counter (e.g. training step) mixed into the stream key

    def __post_init__(self):
        if self.label not in BRANCHES:
            raise ValueError(f"branch label must be one of {BRANCHES}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def active(self) -> bool:
        return self.label != "off" and self.rate > 0.0

    def generator(self) -> np.random.Generator:
        purpose = "dropout-a" if self.label == "p" else "dropout-b"
        return RngStream(self.seed, purpose).generator(self.index)


OFF = DropoutBranch()


def branch_pair(rate: float, seed: int, index: int = 0) -> tuple[DropoutBranch, DropoutBranch]:
    return DropoutBranch("p", rate, seed, index), DropoutBranch("p+", rate, seed, index)


@dataclass
class EmbeddingBatch:
    vectors: Tensor
    provenance: list[tuple[int, int, str]] = field(default_factory=list)

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ValueError("EmbeddingBatch vectors must be a matrix")
        if len(self.provenance) != self.vectors.shape[0]:
            raise ValueError("provenance count must equal row count")
        if np.any(np.einsum("ij,ij->i", self.vectors.data, self.vectors.data) == 0):
            raise nx.NumericalError("EmbeddingBatch contains a zero-norm row")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def with_cls(ids: Sequence[int]) -> tuple[int, ...]:
    ids = tuple(ids)
    return ids if ids and ids[0] == CLS else (CLS, *ids)


class _Dropper:
    def __init__(self, branch: DropoutBranch):
        self.rate = branch.rate
        self.rng = branch.generator() if branch.active else None

    def __call__(self, x: Tensor) -> Tensor:
        if self.rng is None:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        return nx.mul(x, Tensor._wrap(keep / (1.0 - self.rate), False))


def _attention(h: Tensor, prm: dict, p: str, bias: np.ndarray, n_heads: int, drop) -> Tensor:
    B, T, d = h.shape
    dh = d // n_heads

    def heads(w, b):
        x = nx.add(nx.matmul(h, prm[p + w]), prm[p + b])
        return nx.transpose(nx.reshape(x, (B, T, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("w_q", "b_q"), heads("w_k", "b_k"), heads("w_v", "b_v")
    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = drop(nx.softmax(nx.add(scores, bias), axis=-1))
    ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (B, T, d))
    return nx.add(nx.matmul(ctx, prm[p + "w_o"]), prm[p + "b_o"])


def forward(params: EncoderParams, inputs: Sequence[Sequence[int]],
            branch: DropoutBranch = OFF) -> Tensor:
    """Encode padded ``inputs`` and return the final CLS-position states (rows × d)."""
    cfg = params.config
    if not inputs:
        raise ValueError("encode needs at least one input")
    lengths = [len(x) for x in inputs]
    if min(lengths) < 1:
        raise ValueError("empty input sequence")
    T = max(lengths)
    if T > cfg.max_positions:
        raise ValueError(f"input of length {T} exceeds the {cfg.max_positions}-position limit")
    ids = np.full((len(inputs), T), PAD, dtype=np.intp)
    for r, x in enumerate(inputs):
        ids[r, : len(x)] = x
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise ValueError("token id outside the vocabulary")
    valid = np.arange(T)[None, :] < np.array(lengths)[:, None]
    bias = np.where(valid, 0.0, _MASK_BIAS)[:, None, None, :]

    prm = params.tensors
    drop = _Dropper(branch)
    x = nx.add(nx.take(prm["tok_emb"], ids), nx.getitem(prm["pos_emb"], slice(0, T)))
    x = drop(x)
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        h = nx.layer_norm(x, prm[p + "ln1_g"], prm[p + "ln1_b"])
        x = nx.add(x, drop(_attention(h, prm, p, bias, cfg.n_heads, drop)))
        h = nx.layer_norm(x, prm[p + "ln2_g"], prm[p + "ln2_b"])
        f = nx.gelu(nx.add(nx.matmul(h, prm[p + "w_1"]), prm[p + "b_1"]))
        x = nx.add(x, drop(nx.add(nx.matmul(f, prm[p + "w_2"]), prm[p + "b_2"])))
    cls_state = nx.getitem(x, (slice(None), 0, slice(None)))
    return nx.layer_norm(cls_state, prm["lnf_g"], prm["lnf_b"])


def encode(params: EncoderParams, inputs: Sequence[Sequence[int]], branch: DropoutBranch = OFF,
           provenance: Sequence[tuple[int, int]] | None = None) -> EmbeddingBatch:
    """One representation row per input; ``provenance`` gives (sequence id, segment id) per row."""
    vectors = forward(params, inputs, branch)
    if provenance is None:
        provenance = [(r, WHOLE) for r in range(len(inputs))]
    return EmbeddingBatch(vectors, [(s, j, branch.label) for s, j in provenance])


def encode_pair(params: EncoderParams, inputs: Sequence[Sequence[int]], seed: int = 0,
                index: int = 0, rate: float | None = None,
                provenance: Sequence[tuple[int, int]] | None = None):
    """Encode the same inputs under branches ``p`` and ``p+``; row i of both is a positive pair."""
    rate = params.config.dropout if rate is None else rate
    a, b = branch_pair(rate, seed, index)
    return encode(params, inputs, a, provenance), encode(params, inputs, b, provenance)
