import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from cohhgn.data import build_vocab, encode_sessions, filter_sessions, segment_sessions  # noqa: E402
from cohhgn.graphs import build_graphs  # noqa: E402
from cohhgn.model import CoHHGN, ModelConfig  # noqa: E402
from cohhgn.synthgen import SynthConfig, generate  # noqa: E402


class Toy:
    """A small corpus with graphs, shared by model and trainer tests."""

    def __init__(self, seed=3, n_sessions=80, n_items=8, epsilon=2, top_n=4, n_bins=4):
        cfg = SynthConfig(n_sessions=n_sessions, n_items=n_items, n_large=2, n_middle=3,
                          pattern_strength=0.5, mean_length=4.0, seed=seed)
        self.sessions = filter_sessions(segment_sessions(generate(cfg)), 2, 1)
        self.vocab = build_vocab(self.sessions, n_bins)
        self.encoded = encode_sessions(self.sessions, self.vocab)
        self.graphs = build_graphs(self.encoded, self.vocab, epsilon=epsilon, top_n=top_n)

    def model(self, d=8, n_layers=2, heads=2, time_dim=4, seed=1, jitter=0.1, **kw) -> CoHHGN:
        cfg = ModelConfig(d=d, n_layers=n_layers, heads=heads, dropout=kw.pop("dropout", 0.0),
                          time_dim=time_dim, **kw)
        m = CoHHGN.from_graphs(cfg, self.graphs, self.vocab.n_items, self.vocab.d_sale, self.vocab.d_type, seed=seed)
        if jitter:
            # biases start at zero; perturb everything so no branch is trivially inactive
            rng = np.random.default_rng(seed + 100)
            for p in m.params.values():
                p.data = p.data + jitter * rng.standard_normal(p.shape)
        return m


@pytest.fixture(scope="session")
def toy():
    return Toy()


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE.append((number, bool(ok), detail))
        assert ok, f"criterion {number}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
