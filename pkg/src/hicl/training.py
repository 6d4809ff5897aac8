"""Training loop, positive-pair construction, negative queue and checkpoint I/O."""
from __future__ import annotations

import json
import logging
import math
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoder import EncoderConfig, EncoderParams, branch_pair, init_params, param_shapes
from .evaluation import StsExample, evaluate
from .hierarchy import hierarchical_encode
from .losses import LossConfig, total_loss
from .numerics import RngStream, Tensor
from .textproc import TokenSeq

log = logging.getLogger(__name__)

MAGIC = b"HICL1"
POSITIVE_STRATEGIES = ("dropout", "repetition")
OPTIMIZERS = ("adam", "sgd")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int | None = None
    epochs: int = 1
    lr: float = 1e-3
    optimizer: str = "adam"
    eval_every: int = 125
    L: int = 32
    pooling: str = "weighted"
    loss: LossConfig = field(default_factory=LossConfig)
    positive: str = "dropout"
    repetition_rate: float = 0.25
    queue_size: int = 0  # rows; 0 disables the negative queue
    seed: int = 42
    d: int = 64
    n_heads: int = 4
    n_layers: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.repetition_rate <= 0.5:
            raise ValueError("repetition_rate must lie in [0, 0.5]")
        if self.positive not in POSITIVE_STRATEGIES:
            raise ValueError(f"positive strategy must be one of {POSITIVE_STRATEGIES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not 1 <= self.L <= 512:
            raise ValueError("slicing length L must lie in [1, 512]")
        if self.queue_size < 0:
            raise ValueError("queue_size must be >= 0")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


# ---------------------------------------------------------------------------
# positives

def repeat_words(seq: TokenSeq, rate: float, rng: np.random.Generator) -> TokenSeq:
    """Duplicate ⌈rate·|body|⌉ distinct body tokens in place (word repetition)."""
    body_len = len(seq) - 2
    n_dup = math.ceil(rate * body_len)
    if n_dup == 0:
        return TokenSeq(seq.ids, seq.line, tuple(range(len(seq))))
    dup = set((rng.choice(body_len, size=n_dup, replace=False) + 1).tolist())
    ids, origin = [], []
    for k, tok in enumerate(seq.ids):
        reps = 2 if k in dup else 1
        ids += [tok] * reps
        origin += [k] * reps
    return TokenSeq(tuple(ids), seq.line, tuple(origin))


def make_positive_inputs(batch: Sequence[TokenSeq], strategy: str = "dropout", rate: float = 0.25,
                         rng: np.random.Generator | None = None):
    """Inputs for the two branches; with ``repetition`` the second side gets duplicated words."""
    if not 0.0 <= rate <= 0.5:
        raise ValueError("repetition rate must lie in [0, 0.5]")
    batch = list(batch)
    if strategy == "dropout":
        return batch, list(batch)
    if strategy != "repetition":
        raise ValueError(f"unknown positive strategy {strategy!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    return batch, [repeat_words(s, rate, rng) for s in batch]


# ---------------------------------------------------------------------------
# negative queue

class MomentumQueue:
    """FIFO store of detached sequence embeddings used as extra global negatives."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._rows: deque = deque(maxlen=capacity or None)

    def __len__(self) -> int:
        return len(self._rows)

    def push(self, rows) -> None:
        if self.capacity == 0:
            return
        data = rows.data if isinstance(rows, Tensor) else np.asarray(rows, dtype=np.float64)
        for row in np.array(data, dtype=np.float64):
            row.setflags(write=False)
            self._rows.append(row)

    def rows(self) -> np.ndarray:
        return np.array(self._rows)

    def tensor(self) -> Tensor | None:
        if not self._rows:
            return None
        return Tensor._wrap(self.rows(), False)


# ---------------------------------------------------------------------------
# optimizers

class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        return [p - self.lr * g for p, g in zip(params, grads)]


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            out.append(p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
        return out


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.lr) if cfg.optimizer == "adam" else SGD(cfg.lr)


# ---------------------------------------------------------------------------
# training

@dataclass
class StepResult:
    params: EncoderParams
    parts: dict
    grads: list[np.ndarray] = field(repr=False, default_factory=list)


def train_step(params: EncoderParams, batch: Sequence[TokenSeq], cfg: TrainConfig, optimizer,
               queue: MomentumQueue | None = None, step: int = 0) -> StepResult:
    """One forward/backward/update; the queue is read before and refilled after the step."""
    if not batch:
        raise ValueError("train_step needs a nonempty batch")
    rng = RngStream(cfg.seed, "repetition").generator(step)
    inputs_a, inputs_b = make_positive_inputs(batch, cfg.positive, cfg.repetition_rate, rng)
    branch_a, branch_b = branch_pair(params.config.dropout, cfg.seed, step)
    queued = queue.tensor() if queue is not None else None
    captured = {}

    def objective(*tensors):
        p = params.replace(tensors)
        hb_a = hierarchical_encode(p, inputs_a, cfg.L, cfg.pooling, branch_a)
        hb_b = hierarchical_encode(p, inputs_b, cfg.L, cfg.pooling, branch_b)
        total, parts = total_loss(hb_a, hb_b, cfg.loss, queued)
        captured["parts"], captured["keys"] = parts, hb_b.sequences.vectors
        return total

    value, grads = nx.value_and_grad(objective, [t.data for t in params.flat()])
    if not math.isfinite(value):
        raise nx.NumericalError(f"non-finite loss {value} at step {step}")
    new = optimizer.step([t.data for t in params.flat()], [g.data for g in grads])
    if queue is not None:
        queue.push(nx.detach(captured["keys"]))
    return StepResult(params.replace([Tensor(a) for a in new]), captured["parts"],
                      [g.data for g in grads])


@dataclass
class LogEntry:
    step: int
    total: float
    local: float
    global_: float
    entail: float | None
    dev: float | None

    def to_line(self) -> str:
        def fmt(x):
            return "-" if x is None else repr(float(x))
        return "\t".join([str(self.step), fmt(self.total), fmt(self.local), fmt(self.global_),
                          fmt(self.entail), fmt(self.dev)])


LOG_HEADER = "step\ttotal\tlocal\tglobal\tentail\tdev_spearman"


def format_log(entries: Sequence[LogEntry]) -> str:
    return "\n".join([LOG_HEADER, *(e.to_line() for e in entries)]) + "\n"


@dataclass
class Checkpoint:
    params: EncoderParams
    step: int = 0
    dev_metric: float | None = None


def total_steps(cfg: TrainConfig, n: int) -> int:
    return cfg.steps if cfg.steps is not None else cfg.epochs * math.ceil(n / cfg.batch_size)


def iterate_batches(corpus: Sequence[TokenSeq], batch_size: int, seed: int):
    """Endless stream of batches; each epoch is a fresh permutation from the data stream."""
    n = len(corpus)
    epoch = 0
    while True:
        order = RngStream(seed, "data").generator(1000 + epoch).permutation(n)
        for start in range(0, n, batch_size):
            yield [corpus[i] for i in order[start:start + batch_size]]
        epoch += 1


def train(cfg: TrainConfig, corpus: Sequence[TokenSeq], dev: Sequence[StsExample] = (),
          vocab_size: int | None = None, params: EncoderParams | None = None):
    """Run training, evaluating on ``dev`` every ``cfg.eval_every`` steps.

    Returns ``(best checkpoint, log entries)``. The checkpoint holds the
    parameters with the highest dev Spearman (earliest step on ties), or the
    final parameters when no evaluation happened.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    if params is None:
        if vocab_size is None:
            ids = [t for s in corpus for t in s.ids]
            ids += [t for ex in dev for s in (ex.s1, ex.s2) for t in s.ids]
            vocab_size = max(ids) + 1
        params = init_params(cfg.seed, cfg.d, cfg.n_heads, cfg.n_layers, vocab_size,
                             dropout=cfg.dropout)
    optimizer = make_optimizer(cfg)
    queue = MomentumQueue(cfg.queue_size) if cfg.queue_size else None
    n_steps = total_steps(cfg, len(corpus))
    batches = iterate_batches(corpus, cfg.batch_size, cfg.seed)
    entries: list[LogEntry] = []
    best: Checkpoint | None = None
    for step in range(1, n_steps + 1):
        result = train_step(params, next(batches), cfg, optimizer, queue, step)
        params = result.params
        dev_metric = None
        if dev and step % cfg.eval_every == 0:
            dev_metric = evaluate(params, dev, cfg.L, cfg.pooling).rho
            if best is None or dev_metric > best.dev_metric:
                best = Checkpoint(params.copy(), step, dev_metric)
            log.info("step %d loss %.5f dev spearman %.4f", step, result.parts["total"], dev_metric)
        p = result.parts
        entries.append(LogEntry(step, p["total"], p["local"], p["global"], p.get("entail"), dev_metric))
    if best is None:
        best = Checkpoint(params.copy(), n_steps, None)
    return best, entries


# ---------------------------------------------------------------------------
# checkpoint files
#
# layout: b"HICL1" | uint32 LE header length | UTF-8 JSON header |
#         float64 LE payload, parameters in encoder.param_shapes order (row-major)

def save_checkpoint(path, ckpt: Checkpoint) -> None:
    cfg = ckpt.params.config
    shapes = param_shapes(cfg)
    header = {
        "vocab_size": cfg.vocab_size, "d": cfg.d, "n_heads": cfg.n_heads,
        "n_layers": cfg.n_layers, "max_positions": cfg.max_positions, "dropout": cfg.dropout,
        "step": ckpt.step,
        "dev_metric": None if ckpt.dev_metric is None or not math.isfinite(ckpt.dev_metric)
        else ckpt.dev_metric,
        "params": [[name, list(shape)] for name, shape in shapes],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(ckpt.params.tensors[name].data.astype("<f8").tobytes() for name, _ in shapes)
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(raw)) + raw + payload)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic")
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise CheckpointError(f"truncated header: expected at least {pos + 4} bytes, got {len(blob)}")
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + hlen:
        raise CheckpointError(f"truncated header: expected {pos + hlen} bytes, got {len(blob)}")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
        cfg = EncoderConfig(header["vocab_size"], header["d"], header["n_heads"], header["n_layers"],
                            header["max_positions"], header["dropout"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"dim mismatch or malformed header: {exc}") from None
    pos += hlen
    shapes = param_shapes(cfg)
    if [[n, list(s)] for n, s in shapes] != header.get("params"):
        raise CheckpointError("dim mismatch: parameter table does not match header dims")
    expected = 8 * int(np.sum([np.prod(s) for _, s in shapes]))
    actual = len(blob) - pos
    if actual < expected:
        raise CheckpointError(f"truncated payload: expected {expected} bytes, got {actual}")
    if actual > expected:
        raise CheckpointError(f"dim mismatch: payload has {actual} bytes, header dims imply {expected}")
    flat = np.frombuffer(blob, dtype="<f8", offset=pos).astype(np.float64)
    tensors, k = {}, 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        tensors[name] = Tensor(flat[k:k + n].reshape(shape))
        k += n
    return Checkpoint(EncoderParams(cfg, tensors), header["step"], header["dev_metric"])


def with_loss(cfg: TrainConfig, **loss_overrides) -> TrainConfig:
    return replace(cfg, loss=replace(cfg.loss, **loss_overrides))
