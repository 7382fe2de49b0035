"""Top-k ranking metrics, evaluation harness and reference baselines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .data import EncodedSession

DEFAULT_KS = (10, 20)


def ranks(scores, labels) -> np.ndarray:
    """1-based label ranks per row; ties go to the lower item index."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    return kernels.label_ranks(scores, np.atleast_1d(labels))


def precision_at_k(scores, label: int, k: int) -> float:
    """1.0 when ``label`` is among the top-k scores, else 0.0."""
    return float(ranks(scores, [label])[0] <= k)


def mrr_at_k(scores, label: int, k: int) -> float:
    """Reciprocal rank of ``label``, or 0 past rank k."""
    r = ranks(scores, [label])[0]
    return 1.0 / r if r <= k else 0.0


def hit_and_rr(rank_array: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.asarray(rank_array)
    hit = (r <= k).astype(np.float64)
    rr = np.where(r <= k, 1.0 / r, 0.0)
    return hit, rr


@dataclass
class EvalReport:
    """Percentages per cutoff plus the raw per-session ranks."""

    metrics: dict[str, float]
    ranks: list[int] = field(default_factory=list)
    n_sessions: int = 0
    n_runs: int = 1

    @classmethod
    def from_ranks(cls, rank_array, ks: Sequence[int] = DEFAULT_KS) -> "EvalReport":
        r = np.asarray(rank_array, dtype=np.int64)
        if r.size == 0:
            raise ValueError("cannot evaluate an empty session set")
        metrics = {}
        for k in ks:
            hit, rr = hit_and_rr(r, k)
            metrics[f"P@{k}"] = 100.0 * float(hit.mean())
            metrics[f"M@{k}"] = 100.0 * float(rr.mean())
        return cls(metrics, r.tolist(), int(r.size))

    def to_json(self) -> str:
        return json.dumps({"metrics": self.metrics, "n_sessions": self.n_sessions,
                           "n_runs": self.n_runs, "ranks": self.ranks}, sort_keys=True)

    def table(self, label: str = "CoHHGN+") -> str:
        ks = sorted({int(name.split("@")[1]) for name in self.metrics})
        cols = [f"P@{k}" for k in ks] + [f"M@{k}" for k in ks]
        width = max(len(label), 8)
        head = f"{'Model':<{width}} | " + " | ".join(f"{c:>6}" for c in cols)
        rule = "-" * len(head)
        row = f"{label:<{width}} | " + " | ".join(f"{self.metrics[c]:6.2f}" for c in cols)
        return "\n".join([head, rule, row])


def aggregate(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean of metrics over repeated runs (ranks of the first run are kept)."""
    if not reports:
        raise ValueError("nothing to aggregate")
    keys = reports[0].metrics.keys()
    metrics = {k: float(np.mean([r.metrics[k] for r in reports])) for k in keys}
    return EvalReport(metrics, list(reports[0].ranks), reports[0].n_sessions, len(reports))


ScoreFn = Callable[[Sequence[EncodedSession]], np.ndarray]


def evaluate_scores(score_fn: ScoreFn, sessions: Sequence[EncodedSession], ks: Sequence[int] = DEFAULT_KS,
                    batch_size: int = 100) -> EvalReport:
    """Rank every session's last item under ``score_fn`` (batch -> (B, n) scores)."""
    if not sessions:
        raise ValueError("cannot evaluate an empty session set")
    all_ranks = []
    for lo in range(0, len(sessions), batch_size):
        chunk = sessions[lo:lo + batch_size]
        scores = score_fn(chunk)
        labels = np.array([s.items[-1] for s in chunk])
        all_ranks.append(ranks(scores, labels))
    return EvalReport.from_ranks(np.concatenate(all_ranks), ks)


def evaluate(model, sessions: Sequence[EncodedSession], ks: Sequence[int] = DEFAULT_KS,
             batch_size: int = 100) -> EvalReport:
    """Evaluate a :class:`cohhgn.model.CoHHGN` in inference mode."""
    from .model import make_batch

    def score(chunk):
        return model.predict(make_batch(chunk, model.cfg.max_len))

    return evaluate_scores(score, sessions, ks, batch_size)


# ---------------------------------------------------------------------------
# reference baselines
# ---------------------------------------------------------------------------


class PopularityBaseline:
    """Scores every item by its training frequency."""

    def __init__(self, n_items: int):
        self.n_items = n_items
        self.counts = np.zeros(n_items)

    def fit(self, sessions: Sequence[EncodedSession]) -> "PopularityBaseline":
        for s in sessions:
            known = s.items[s.items < self.n_items]
            np.add.at(self.counts, known, 1.0)
        return self

    def __call__(self, sessions: Sequence[EncodedSession]) -> np.ndarray:
        return np.tile(self.counts, (len(sessions), 1))


class MarkovBaseline:
    """First-order transition counts from the last input item; popularity
    breaks ties."""

    def __init__(self, n_items: int):
        self.n_items = n_items
        self.trans = np.zeros((n_items + 1, n_items))
        self.pop = PopularityBaseline(n_items)

    def fit(self, sessions: Sequence[EncodedSession]) -> "MarkovBaseline":
        self.pop.fit(sessions)
        for s in sessions:
            a, b = s.items[:-1], s.items[1:]
            ok = b < self.n_items
            np.add.at(self.trans, (np.minimum(a[ok], self.n_items), b[ok]), 1.0)
        return self

    def __call__(self, sessions: Sequence[EncodedSession]) -> np.ndarray:
        last = np.array([min(int(s.items[-2]), self.n_items) for s in sessions])
        tiebreak = self.pop.counts / (self.pop.counts.sum() + 1.0)
        return self.trans[last] + tiebreak[None, :]
