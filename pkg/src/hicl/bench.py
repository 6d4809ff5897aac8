"""Attention-cost model and wall-clock comparison of whole vs segmented encoding."""
from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .encoder import EncoderParams, encode
from .hierarchy import hierarchical_encode
from .textproc import TokenSeq, num_segments

# acceptance band for the measured speed-up at 8x predicted (length 256, L=32)
MIN_MEASURED_RATIO_AT_256 = 2.0
SINGLE_SEGMENT_BAND = (0.5, 2.0)


def cost_model(seq_len: int, L: int) -> tuple[int, int, float]:
    """Token-pair counts for whole-sequence vs segmented attention, and their ratio."""
    if seq_len < 1 or L < 1:
        raise ValueError("seq_len and L must be >= 1")
    l = num_segments(seq_len, L)
    r = seq_len - L * (l - 1)  # lands in [1, L]
    full = seq_len * seq_len
    hicl = L * L * (l - 1) + r * r
    return full, hicl, full / hicl


@dataclass
class CostReport:
    L: int
    full_units: list[int]
    hicl_units: list[int]
    predicted_ratio: float
    full_seconds: float
    hicl_seconds: float
    repetitions: int
    parallel_seconds: float | None = None

    @property
    def measured_ratio(self) -> float:
        return self.full_seconds / self.hicl_seconds

    def to_tsv(self) -> str:
        lines = ["seq\tfull_units\thicl_units\tpredicted_ratio"]
        for i, (f, h) in enumerate(zip(self.full_units, self.hicl_units)):
            lines.append(f"{i}\t{f}\t{h}\t{f / h!r}")
        return "\n".join(lines) + "\n"

    def to_keyvalue(self) -> str:
        kv = {
            "L": self.L,
            "sequences": len(self.full_units),
            "repetitions": self.repetitions,
            "full_units": sum(self.full_units),
            "hicl_units": sum(self.hicl_units),
            "predicted_ratio": repr(self.predicted_ratio),
            "full_seconds": repr(self.full_seconds),
            "hicl_seconds": repr(self.hicl_seconds),
            "measured_ratio": repr(self.measured_ratio),
        }
        if self.parallel_seconds is not None:
            kv["hicl_parallel_seconds"] = repr(self.parallel_seconds)
            kv["parallel_measured_ratio"] = repr(self.full_seconds / self.parallel_seconds)
        return "\n".join(f"{k} = {v}" for k, v in kv.items()) + "\n"


def _median_time(fn, repetitions: int) -> float:
    fn()  # warm-up, not timed
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def wallclock_bench(params: EncoderParams, corpus: Sequence[TokenSeq], L: int,
                    repetitions: int = 5, workers: int = 0) -> CostReport:
    """Median dropout-off encode time of the whole corpus, unsegmented vs segmented.

    Each mode encodes the full corpus in a single batched call. With
    ``workers > 0`` a thread-pooled per-sequence segmented run is timed too.
    """
    if not corpus:
        raise ValueError("benchmark corpus is empty")
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    units = [cost_model(len(s), L) for s in corpus]
    full_units = [u[0] for u in units]
    hicl_units = [u[1] for u in units]
    whole_inputs = [s.ids for s in corpus]
    t_full = _median_time(lambda: encode(params, whole_inputs), repetitions)
    t_hicl = _median_time(lambda: hierarchical_encode(params, corpus, L), repetitions)
    t_par = None
    if workers > 0:
        with ThreadPoolExecutor(workers) as pool:
            t_par = _median_time(
                lambda: list(pool.map(lambda s: hierarchical_encode(params, [s], L), corpus)),
                repetitions)
    return CostReport(L, full_units, hicl_units, sum(full_units) / sum(hicl_units),
                      t_full, t_hicl, repetitions, t_par)
