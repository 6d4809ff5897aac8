import numpy as np
import pytest

from hicl.encoder import init_params
from hicl.hierarchy import HierarchicalBatch

# frozen with mpmath at 40 digits
LN_1P_EXP_M20 = 2.0611536203143807032e-09
LN2 = 0.6931471805599453094


def random_pair(rng, parents, d=8, noise=0.1, lengths=None):
    """Two aligned HierarchicalBatches (branches p / p+) built from random segment vectors."""
    parents = list(parents)
    base = rng.normal(size=(len(parents), d))
    a = base + noise * rng.normal(size=base.shape)
    b = base + noise * rng.normal(size=base.shape)
    lengths = lengths if lengths is not None else rng.integers(1, 9, size=len(parents)).tolist()
    return (HierarchicalBatch.from_segments(a, parents, lengths, label="p"),
            HierarchicalBatch.from_segments(b, parents, lengths, label="p+"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_params():
    # d=8, one layer, two heads: the gradient-check configuration
    return init_params(3, d=8, n_heads=2, n_layers=1, vocab_size=12, max_positions=16)


class TrainedRun:
    """Result of the end-to-end learnability configuration."""

    def __init__(self, best, log, seconds, test_rho, dev, test):
        self.best, self.log, self.seconds = best, log, seconds
        self.test_rho, self.dev, self.test = test_rho, dev, test


def run_learnability():
    import time

    from hicl.evaluation import evaluate, generate_synthetic
    from hicl.losses import LossConfig
    from hicl.training import TrainConfig, train

    corpus, _ = generate_synthetic(7, 200, vocab_size=1000, body_length=30, split=0)
    _, dev = generate_synthetic(7, 200, vocab_size=1000, body_length=30, split=1)
    _, test = generate_synthetic(7, 200, vocab_size=1000, body_length=30, split=2)
    cfg = TrainConfig(batch_size=16, steps=800, eval_every=125, L=16, d=32,
                      loss=LossConfig(alpha=0.05), seed=7)
    start = time.process_time()
    best, log = train(cfg, corpus, dev, vocab_size=1005)
    seconds = time.process_time() - start
    rho = evaluate(best.params, test, cfg.L).rho
    return TrainedRun(best, log, seconds, rho, dev, test)


@pytest.fixture(scope="session")
def trained_run():
    return run_learnability()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
