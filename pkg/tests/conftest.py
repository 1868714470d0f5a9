import numpy as np
import pytest

from ktdrift.logstore import InteractionRow, StudentSequence, Vocabulary, build_sequences
from ktdrift.synth import SynthConfig, random_truths, simulate_year


def row(student="s1", log="a1", ps="p1", ex="e1", kc="k1", ts=1_600_000_000, correct=1, gradable=1):
    return InteractionRow(student, log, ps, ex, kc, ts, correct, gradable)


def toy_sequences(n_students, length, n_ids, seed=0, n_ex=None):
    """Random integer sequences for model-level tests; exercise ids default to KC ids."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_students):
        kc = rng.integers(n_ids, size=length)
        ex = kc if n_ex is None else rng.integers(n_ex, size=length)
        out.append(StudentSequence(f"s{i:03d}", ex, kc, rng.integers(2, size=length), np.arange(length)))
    return out


@pytest.fixture(scope="session")
def small_world():
    """Three synthetic years, small enough for protocol tests."""
    cfg = SynthConfig(30, 4, 6, random_truths(4, 7), seed=7)
    return cfg, [simulate_year(cfg, y) for y in range(3)]


@pytest.fixture(scope="session")
def synth_train():
    cfg = SynthConfig(60, 4, 8, random_truths(4, 3), seed=3)
    store = simulate_year(cfg, 0)
    vocab = Vocabulary.from_rows(store.rows)
    return store, vocab, build_sequences(store.rows, vocab)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
