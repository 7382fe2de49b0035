"""Mini-batch training with Adam, step-wise learning-rate decay, L2
regularisation and validation-based model selection."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import EncodedSession
from .evaluation import DEFAULT_KS, evaluate
from .graphs import GraphSet
from .model import CoHHGN, ModelConfig, make_batch

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 100
    lr: float = 0.001
    lr_decay: float = 0.1
    lr_decay_every: int = 3
    l2: float = 1e-5
    seed: int = 0
    n_layers: int = 2
    dropout: float = 0.2
    d: int = 128
    epsilon: int = 12
    heads: int = 4
    n_price_bins: int = 10
    time_dim: int = 16
    top_n: int = 12
    max_len: int | None = None
    select_metric: str = "M@20"

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr", "d", "epsilon", "heads", "n_price_bins", "lr_decay_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.l2 < 0 or not 0 <= self.dropout < 1:
            raise ValueError("l2 must be >= 0 and dropout in [0, 1)")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, n_layers=self.n_layers, heads=self.heads, dropout=self.dropout,
                           time_dim=self.time_dim, max_len=self.max_len)

    def learning_rate(self, epoch: int) -> float:
        """Rate for a 1-based epoch: multiplied by ``lr_decay`` every ``lr_decay_every`` epochs."""
        return self.lr * self.lr_decay ** ((epoch - 1) // self.lr_decay_every)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, l2: float = 0.0) -> None:
    """One in-place Adam update; L2 enters as ``l2 * theta`` added to the gradient."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g
        if l2:
            g = g + l2 * p.data
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)


@dataclass
class TrainResult:
    model: CoHHGN
    log: list[dict]
    best_epoch: int

    def log_lines(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.log)


def _validation_loss(model: CoHHGN, sessions: Sequence[EncodedSession], batch_size: int) -> float:
    total = 0.0
    for lo in range(0, len(sessions), batch_size):
        batch = make_batch(sessions[lo:lo + batch_size], model.cfg.max_len)
        probs = np.clip(model.predict(batch), 1e-12, 1 - 1e-12)
        y = np.zeros_like(probs)
        ok = batch.labels < probs.shape[1]
        y[np.flatnonzero(ok), batch.labels[ok]] = 1.0
        total += float(-(y * np.log(probs) + (1 - y) * np.log(1 - probs)).sum())
    return total / len(sessions)


def train_model(model: CoHHGN, train_sessions: Sequence[EncodedSession],
                validation: Sequence[EncodedSession], cfg: TrainConfig) -> TrainResult:
    params = model.parameters()
    state = AdamState()
    history: list[dict] = []
    best = (-math.inf, 0)
    best_params = [p.data.copy() for p in params]
    train_sessions = list(train_sessions)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_sessions))
        losses = []
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = make_batch([train_sessions[i] for i in order[lo:lo + cfg.batch_size]], cfg.max_len)
            with ad.Tape() as tape:
                loss = model.loss(batch, training=True, rng=rng)
                value = loss.item()
                if not math.isfinite(value):
                    last = losses[-1] if losses else float("nan")
                    raise NumericError(f"loss became {value} at epoch {epoch} step {step}; last finite loss {last:.6g}")
                for p in params:
                    p.zero_grad()
                tape.backward(loss)
            grads = [p.grad for p in params]
            if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
                raise NumericError(f"non-finite gradient at epoch {epoch} step {step}; loss {value:.6g}")
            adam_step(params, grads, state, lr, cfg.l2)
            losses.append(value)
        record = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses)), "lr": lr}
        history.append(record)
        log.info("epoch %d train loss %.5f lr %.2g", epoch, record["loss"], lr)
        if validation:
            report = evaluate(model, validation, DEFAULT_KS, cfg.batch_size)
            vrec = {"epoch": epoch, "split": "validation",
                    "loss": _validation_loss(model, validation, cfg.batch_size), **report.metrics}
            history.append(vrec)
            log.info("epoch %d validation %s", epoch, report.metrics)
            score = report.metrics[cfg.select_metric]
        else:
            score = float(epoch)
        if score > best[0]:
            best = (score, epoch)
            best_params = [p.data.copy() for p in params]
    for p, data in zip(params, best_params):
        p.data = data
        p.zero_grad()
    return TrainResult(model, history, best[1])


def train(train_sessions: Sequence[EncodedSession], validation: Sequence[EncodedSession], graphs: GraphSet,
          cfg: TrainConfig, n_known: int, d_sale: int, d_type: int) -> TrainResult:
    """Build a fresh model (seeded by ``cfg.seed``) and train it."""
    model = CoHHGN.from_graphs(cfg.model_config(), graphs, n_known, d_sale, d_type, seed=cfg.seed)
    return train_model(model, train_sessions, validation, cfg)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
