"""Central finite-difference check of every model parameter gradient."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import build_vocab, encode_sessions, filter_sessions, segment_sessions
from .graphs import build_graphs
from .model import EMBED_TYPES as TYPES, CoHHGN, ModelConfig, SessionBatch, bce_loss, gate_fuse, make_batch
from .synthgen import SynthConfig, generate

DEFAULT_STEP = 1e-5
DEFAULT_RTOL = 1e-4
# Denominator floor for the relative error. Central differences at step 1e-5
# carry round-off near eps * |loss| / step ~ 1e-10, so a 1e-4 relative error
# is only resolvable for gradients above ~1e-6.
GRAD_FLOOR = 1e-6


@dataclass
class ParamCheck:
    name: str
    size: int
    max_rel_error: float
    max_abs_error: float
    passed: bool


@dataclass
class GradcheckReport:
    checks: list[ParamCheck] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = [f"{'PASS' if c.passed else 'FAIL'} {c.name:<10} n={c.size:<6d} "
               f"max_rel={c.max_rel_error:.2e} max_abs={c.max_abs_error:.2e}" for c in self.checks]
        out.append(f"{'PASS' if self.passed else 'FAIL'} overall ({self.seconds:.1f}s)")
        return out


def toy_instance(n_items: int = 8, d: int = 16, n_layers: int = 1, heads: int = 2, s: int = 3,
                 n_price_bins: int = 4, batch: int = 3, seed: int = 0) -> tuple[CoHHGN, SessionBatch]:
    """A tiny model plus a batch whose sessions carry ``s`` input positions."""
    cfg = SynthConfig(n_sessions=60, n_items=n_items, n_large=2, n_middle=3, pattern_strength=0.5,
                      mean_length=s + 1.5, seed=seed)
    sessions = filter_sessions(segment_sessions(generate(cfg)), min_len=2, min_freq=1)
    vocab = build_vocab(sessions, n_price_bins)
    encoded = encode_sessions(sessions, vocab)
    graphs = build_graphs(encoded, vocab, epsilon=2, top_n=4)
    mcfg = ModelConfig(d=d, n_layers=n_layers, heads=heads, dropout=0.0, time_dim=4, max_len=s)
    model = CoHHGN.from_graphs(mcfg, graphs, vocab.n_items, vocab.d_sale, vocab.d_type, seed=seed)
    long = [e for e in encoded if len(e) > s][:batch]
    if len(long) < batch:
        raise RuntimeError("toy corpus has too few long sessions")
    return model, make_batch(long, max_len=s)


def _loss_value(model: CoHHGN, batch: SessionBatch) -> float:
    with ad.no_grad():
        return model.loss(batch, training=False).item()


def _reach(name: str) -> set[tuple[str, str]]:
    """Which (branch, type) node embeddings a parameter feeds into."""
    if name.startswith("emb_"):
        t = name[4:]
        return {("hyper", t), ("global", t)}
    if name.startswith(("W_", "u_")):
        return {("hyper", name.split("_")[1])}
    if name in ("W1", "q", "W2"):
        return {("global", t) for t in TYPES}
    return set()


class _StagedLoss:
    """Loss evaluator that recomputes only the node-embedding branches a
    perturbed parameter can reach; everything else is cached once."""

    def __init__(self, model: CoHHGN, batch: SessionBatch):
        self.model, self.batch = model, batch
        with ad.no_grad():
            self.cache = {key: self._branch(key) for key in self._keys()}

    def _keys(self):
        return [(branch, t) for t in TYPES for branch in ("hyper", "global")]

    def _branch(self, key) -> ad.Tensor:
        branch, t = key
        if branch == "hyper":
            return self.model.hyper_embeddings(t, False, None)
        seq = self.batch.items if t == "id" else self.batch.prices
        return self.model.global_embeddings(t, seq, self.batch.mask, False, None)

    def __call__(self, name: str) -> float:
        m, reach = self.model, _reach(name)
        with ad.no_grad():
            parts = {k: (self._branch(k) if k in reach else v) for k, v in self.cache.items()}
            nodes = {t: gate_fuse(parts[("hyper", t)], parts[("global", t)], m.params["W3"], m.params["W4"])
                     for t in TYPES}
            probs = ad.softmax(m.logits_from_nodes(self.batch, nodes), axis=-1)
            return bce_loss(probs, self.batch.labels).item()


def analytic_gradients(model: CoHHGN, batch: SessionBatch) -> dict[str, np.ndarray]:
    for p in model.parameters():
        p.zero_grad()
    with ad.Tape() as tape:
        loss = model.loss(batch, training=False)
        tape.backward(loss)
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in model.params.items()}


def check_gradients(model: CoHHGN, batch: SessionBatch, step: float = DEFAULT_STEP,
                    rtol: float = DEFAULT_RTOL, names=None) -> GradcheckReport:
    start = time.perf_counter()
    grads = analytic_gradients(model, batch)
    loss_at = _StagedLoss(model, batch)
    report = GradcheckReport()
    for name in sorted(names or model.params):
        p = model.params[name]
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_at(name)
            flat[i] = orig - step
            down = loss_at(name)
            flat[i] = orig
            numeric[i] = (up - down) / (2 * step)
        analytic = grads[name].reshape(-1)
        abs_err = np.abs(analytic - numeric)
        rel = abs_err / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GRAD_FLOOR)
        ok = bool(np.all(rel <= rtol))
        report.checks.append(ParamCheck(name, flat.size, float(rel.max(initial=0.0)),
                                        float(abs_err.max(initial=0.0)), ok))
    report.seconds = time.perf_counter() - start
    return report


def run(seed: int = 0, **kwargs) -> GradcheckReport:
    model, batch = toy_instance(seed=seed, **kwargs)
    return check_gradients(model, batch)
