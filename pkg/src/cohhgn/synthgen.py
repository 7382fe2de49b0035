"""Synthetic purchase logs with planted first-order item transitions.

Each item has a fixed price and a fixed (large, middle) category, so the
hypergraph structure is a function of the item. Sessions are written back
to back with the (gender, region) pair changing at every session boundary,
so :func:`cohhgn.data.segment_sessions` recovers them exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import RawRecord, SaleCalendar

GENDERS = ("M", "F")
REGIONS = ("Hokkaido", "Tohoku", "Kanto", "Chubu", "Kinki", "Chugoku", "Shikoku", "Kyushu", "Okinawa")


@dataclass
class SynthConfig:
    n_sessions: int = 5000
    n_items: int = 50
    n_large: int = 5
    n_middle: int = 15
    n_patterns: int | None = None  # items with a planted successor; None = all
    pattern_strength: float = 0.9
    mean_length: float = 2.24
    week_min: int = 1
    week_max: int = 105
    price_mu: float = 8.0  # log-yen location of per-item prices
    price_scale: float = 0.6
    seed: int = 0
    calendar: SaleCalendar = field(default_factory=SaleCalendar)

    def __post_init__(self):
        if not 0.0 <= self.pattern_strength <= 1.0:
            raise ValueError("pattern_strength must lie in [0, 1]")
        if self.mean_length < 2:
            raise ValueError("mean_length must be >= 2")
        if self.n_items < 2 or self.n_middle < 1 or self.n_large < 1:
            raise ValueError("vocabulary sizes too small")
        if self.n_patterns is not None and not 0 <= self.n_patterns <= self.n_items:
            raise ValueError("n_patterns must lie in [0, n_items]")


@dataclass
class SynthWorld:
    """The hidden structure a corpus was drawn from."""

    items: list[str]
    successor: dict[int, int]
    price: np.ndarray
    middle: np.ndarray
    large_of_middle: np.ndarray

    def large(self, item: int) -> int:
        return int(self.large_of_middle[self.middle[item]])


def make_world(cfg: SynthConfig, rng: np.random.Generator) -> SynthWorld:
    n = cfg.n_items
    items = [f"item_{i:04d}" for i in range(n)]
    cycle = rng.permutation(n)
    n_pat = n if cfg.n_patterns is None else cfg.n_patterns
    successor = {int(cycle[k]): int(cycle[(k + 1) % n]) for k in range(n_pat)}
    u = rng.uniform(1e-6, 1 - 1e-6, size=n)
    log_price = cfg.price_mu + cfg.price_scale * np.log(u / (1 - u))
    price = np.round(np.exp(log_price), 0)
    price = np.maximum(price, 1.0)
    middle = rng.integers(0, cfg.n_middle, size=n)
    large_of_middle = rng.integers(0, cfg.n_large, size=cfg.n_middle)
    return SynthWorld(items, successor, price, middle, large_of_middle)


def session_lengths(n: int, mean_length: float, rng: np.random.Generator) -> np.ndarray:
    return 2 + rng.poisson(mean_length - 2.0, size=n)


def generate(cfg: SynthConfig) -> list[RawRecord]:
    return generate_with_world(cfg)[0]


def generate_with_world(cfg: SynthConfig) -> tuple[list[RawRecord], SynthWorld]:
    rng = np.random.default_rng(cfg.seed)
    world = make_world(cfg, rng)
    lengths = session_lengths(cfg.n_sessions, cfg.mean_length, rng)
    weeks = np.sort(rng.integers(cfg.week_min, cfg.week_max + 1, size=cfg.n_sessions))
    records: list[RawRecord] = []
    prev_attr = None
    for s in range(cfg.n_sessions):
        while True:
            attr = (GENDERS[rng.integers(len(GENDERS))], REGIONS[rng.integers(len(REGIONS))])
            if attr != prev_attr:
                break
        prev_attr = attr
        item = int(rng.integers(cfg.n_items))
        for pos in range(int(lengths[s])):
            if pos:
                follow = rng.random() < cfg.pattern_strength
                if follow and item in world.successor:
                    item = world.successor[item]
                else:
                    item = int(rng.integers(cfg.n_items))
            records.append(RawRecord(
                week=int(weeks[s]),
                gender=attr[0],
                region=attr[1],
                price=float(world.price[item]),
                large_category=f"L{world.large(item):02d}",
                middle_category=f"M{int(world.middle[item]):03d}",
                small_category=world.items[item],
                row_index=len(records),
            ))
    return records, world
