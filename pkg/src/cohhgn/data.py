"""Purchase-log ingestion: parsing, pseudo-sessions, filtering, price bins,
train/validation/test splits and vocabularies."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

FEATURE_TYPES = ("id", "pri", "lrg", "mid")

LOGICAL_FIELDS = (
    "week",
    "gender",
    "region",
    "price",
    "large_category",
    "middle_category",
    "small_category",
)

DEFAULT_SCHEMA = {name: name for name in LOGICAL_FIELDS}


class DataError(ValueError):
    """Base class for ingestion failures."""


class SchemaError(DataError):
    pass


class RowError(DataError):
    """One or more data rows failed conversion. ``errors`` lists (line, message)."""

    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        shown = "; ".join(f"line {ln}: {msg}" for ln, msg in errors[:5])
        more = f" (+{len(errors) - 5} more)" if len(errors) > 5 else ""
        super().__init__(f"{len(errors)} bad row(s): {shown}{more}")


class DegenerateFitError(DataError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RawRecord:
    week: int
    gender: str
    region: str
    price: float
    large_category: str
    middle_category: str
    small_category: str
    row_index: int = 0

    @property
    def item(self) -> str:
        return self.small_category


@dataclass(frozen=True)
class PseudoSession:
    """A run of consecutive records sharing (gender, region), raw values."""

    session_id: int
    week: int
    gender: str
    region: str
    items: tuple[str, ...]
    prices: tuple[float, ...]
    large_cats: tuple[str, ...]
    middle_cats: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.items)

    def keep(self, mask: Sequence[bool]) -> "PseudoSession":
        pick = lambda seq: tuple(v for v, k in zip(seq, mask) if k)  # noqa: E731
        return PseudoSession(
            self.session_id, self.week, self.gender, self.region,
            pick(self.items), pick(self.prices), pick(self.large_cats), pick(self.middle_cats),
        )


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _text_stream(source) -> IO[str]:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"))
    if isinstance(source, io.TextIOBase):
        return source
    if hasattr(source, "read"):
        return io.TextIOWrapper(source, encoding="utf-8", newline="")
    return open(source, encoding="utf-8", newline="")


def parse_records(source, schema: dict | None = None, delimiter: str = ",") -> list[RawRecord]:
    """Read a delimited purchase log with a header row.

    ``schema`` maps logical field names to column names; missing entries
    default to the logical name. Raises :class:`SchemaError` for missing
    columns and :class:`RowError` listing every row that failed to convert.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    stream = _text_stream(source)
    reader = csv.reader(stream, delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("input is empty; a header row is required") from None
    positions = {}
    for logical in LOGICAL_FIELDS:
        col = schema[logical]
        if col not in header:
            raise SchemaError(f"missing required column {col!r} (field {logical})")
        positions[logical] = header.index(col)

    records: list[RawRecord] = []
    errors: list[tuple[int, str]] = []
    for row_no, row in enumerate(reader):
        line = row_no + 2
        if not row:
            continue
        try:
            rec = _convert_row(row, positions, row_no)
        except (ValueError, IndexError) as exc:
            errors.append((line, str(exc)))
            continue
        records.append(rec)
    if errors:
        raise RowError(errors)
    return records


def _convert_row(row, positions, row_no) -> RawRecord:
    get = lambda f: row[positions[f]].strip()  # noqa: E731
    week_s, price_s = get("week"), get("price")
    try:
        week = int(week_s)
    except ValueError:
        raise ValueError(f"week {week_s!r} is not an integer") from None
    try:
        price = float(price_s)
    except ValueError:
        raise ValueError(f"price {price_s!r} is not a number") from None
    if week < 1:
        raise ValueError(f"week {week} < 1")
    if not (price > 0 and math.isfinite(price)):
        raise ValueError(f"price {price_s!r} must be positive")
    cats = {f: get(f) for f in ("gender", "region", "large_category", "middle_category", "small_category")}
    for name, value in cats.items():
        if not value:
            raise ValueError(f"empty {name}")
    return RawRecord(week=week, price=price, row_index=row_no, **cats)


def write_records(records: Iterable[RawRecord], stream: IO[str], schema: dict | None = None,
                  delimiter: str = ",") -> None:
    """Write records in the format :func:`parse_records` reads."""
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    writer = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
    writer.writerow([schema[f] for f in LOGICAL_FIELDS])
    for r in records:
        writer.writerow([r.week, r.gender, r.region, repr(float(r.price)),
                         r.large_category, r.middle_category, r.small_category])


# ---------------------------------------------------------------------------
# sessions
# ---------------------------------------------------------------------------


def segment_sessions(records: Sequence[RawRecord]) -> list[PseudoSession]:
    """Cut the record stream wherever (gender, region) changes or the week goes backwards."""
    sessions: list[PseudoSession] = []
    run: list[RawRecord] = []

    def close():
        if run:
            first = run[0]
            sessions.append(PseudoSession(
                session_id=len(sessions),
                week=first.week,
                gender=first.gender,
                region=first.region,
                items=tuple(r.small_category for r in run),
                prices=tuple(r.price for r in run),
                large_cats=tuple(r.large_category for r in run),
                middle_cats=tuple(r.middle_category for r in run),
            ))

    for rec in records:
        if run:
            prev = run[-1]
            if (rec.gender, rec.region) != (prev.gender, prev.region) or rec.week < prev.week:
                close()
                run = []
        run.append(rec)
    close()
    return sessions


def filter_sessions(sessions: Sequence[PseudoSession], min_len: int = 2,
                    min_freq: int = 10) -> list[PseudoSession]:
    """Drop rare items and short sessions, repeating until nothing changes."""
    if min_len < 1 or min_freq < 0:
        raise ConfigError("min_len must be >= 1 and min_freq >= 0")
    current = list(sessions)
    while True:
        counts = Counter(item for s in current for item in s.items)
        changed = False
        nxt = []
        for s in current:
            mask = [counts[item] >= min_freq for item in s.items]
            if not all(mask):
                s = s.keep(mask)
                changed = True
            if len(s) >= min_len:
                nxt.append(s)
            else:
                changed = True
        current = nxt
        if not changed:
            return current


# ---------------------------------------------------------------------------
# price bins
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PriceBinner:
    """Equal-probability bins of a logistic distribution fitted to log-prices."""

    mu: float
    scale: float
    n_bins: int
    boundaries: tuple[float, ...]

    def bin(self, price: float) -> int:
        return bin_price(self, price)

    def to_dict(self) -> dict:
        return {"mu": self.mu, "scale": self.scale, "n_bins": self.n_bins,
                "boundaries": list(self.boundaries)}

    @classmethod
    def from_dict(cls, d: dict) -> "PriceBinner":
        return cls(float(d["mu"]), float(d["scale"]), int(d["n_bins"]),
                   tuple(float(b) for b in d["boundaries"]))


def logistic_quantile(q, mu: float, scale: float):
    q = np.asarray(q, dtype=np.float64)
    return mu + scale * np.log(q / (1.0 - q))


def fit_price_bins(prices: Sequence[float], n_bins: int = 10) -> PriceBinner:
    if n_bins < 2:
        raise ConfigError("n_bins must be >= 2")
    p = np.asarray(prices, dtype=np.float64)
    if p.size == 0 or np.any(p <= 0):
        raise DataError("prices must be positive and non-empty")
    logp = np.log(p)
    mu = float(logp.mean())
    std = float(logp.std())
    if not std > 0:
        raise DegenerateFitError("prices have zero variance; cannot fit a logistic distribution")
    scale = std * math.sqrt(3.0) / math.pi
    qs = np.arange(1, n_bins) / n_bins
    bounds = logistic_quantile(qs, mu, scale)
    return PriceBinner(mu, scale, int(n_bins), tuple(float(b) for b in bounds))


def bin_price(binner: PriceBinner, price: float) -> int:
    if not price > 0:
        raise DataError(f"price must be positive, got {price}")
    return int(np.searchsorted(binner.boundaries, math.log(price), side="right"))


def bin_prices(binner: PriceBinner, prices) -> np.ndarray:
    p = np.asarray(prices, dtype=np.float64)
    if np.any(p <= 0):
        raise DataError("prices must be positive")
    return np.searchsorted(np.asarray(binner.boundaries), np.log(p), side="right").astype(np.int64)


# ---------------------------------------------------------------------------
# sale calendar
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SaleCalendar:
    """Which weeks carry each regular sale.

    Sale 1 runs in one week per quarter (the last week of every 13-week
    block); sale 2 runs in the first week of every month of a 52-week year.
    """

    weeks_per_year: int = 52
    quarter_weeks: int = 13
    months: int = 12

    d_sale: int = 2

    def sale1(self, week: int) -> bool:
        return week % self.quarter_weeks == 0

    def month_of(self, week: int) -> int:
        return (((week - 1) % self.weeks_per_year) * self.months) // self.weeks_per_year

    def sale2(self, week: int) -> bool:
        return self.month_of(week) != self.month_of(week - 1)

    def flags(self, week: int) -> np.ndarray:
        return np.array([self.sale1(week), self.sale2(week)], dtype=np.float64)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list[PseudoSession]
    validation: list[PseudoSession]
    test: list[PseudoSession]
    train_week_max: int
    test_week_min: int

    def to_dict(self) -> dict:
        return {
            "train_week_max": self.train_week_max,
            "test_week_min": self.test_week_min,
            "train": [s.session_id for s in self.train],
            "validation": [s.session_id for s in self.validation],
            "test": [s.session_id for s in self.test],
        }

    @classmethod
    def from_dict(cls, d: dict, sessions: Sequence[PseudoSession]) -> "DatasetSplit":
        by_id = {s.session_id: s for s in sessions}
        return cls([by_id[i] for i in d["train"]], [by_id[i] for i in d["validation"]],
                   [by_id[i] for i in d["test"]], int(d["train_week_max"]), int(d["test_week_min"]))


def split_by_week(sessions: Sequence[PseudoSession], train_week_max: int = 101,
                  val_fraction: float = 0.1, seed: int = 0) -> DatasetSplit:
    if not 0 <= val_fraction < 1:
        raise ConfigError("val_fraction must be in [0, 1)")
    pool = [s for s in sessions if s.week <= train_week_max]
    test = [s for s in sessions if s.week > train_week_max]
    if not pool or not test:
        raise ConfigError(
            f"week split at {train_week_max} leaves {len(pool)} train and {len(test)} test sessions")
    n_val = int(math.floor(val_fraction * len(pool)))
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(pool), size=n_val, replace=False).tolist()) if n_val else set()
    train = [s for i, s in enumerate(pool) if i not in chosen]
    val = [s for i, s in enumerate(pool) if i in chosen]
    return DatasetSplit(train, val, test, train_week_max, min(s.week for s in test))


# ---------------------------------------------------------------------------
# vocabulary and encoding
# ---------------------------------------------------------------------------


def _first_seen(values: Iterable[str]) -> list[str]:
    return list(dict.fromkeys(values))


@dataclass
class FeatureVocabulary:
    """Value lists per feature type. Unknown id/lrg/mid values map to index ``n``."""

    items: list[str]
    large: list[str]
    middle: list[str]
    genders: list[str]
    regions: list[str]
    binner: PriceBinner
    calendar: SaleCalendar = field(default_factory=SaleCalendar)

    def __post_init__(self):
        self._index = {
            "id": {v: i for i, v in enumerate(self.items)},
            "lrg": {v: i for i, v in enumerate(self.large)},
            "mid": {v: i for i, v in enumerate(self.middle)},
            "gender": {v: i for i, v in enumerate(self.genders)},
            "region": {v: i for i, v in enumerate(self.regions)},
        }

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_price(self) -> int:
        return self.binner.n_bins

    @property
    def d_sale(self) -> int:
        return self.calendar.d_sale

    @property
    def d_type(self) -> int:
        return len(self.genders) + len(self.regions)

    def size(self, ftype: str) -> int:
        """Number of embedding rows for a feature type (unknown slot included)."""
        return {"id": len(self.items) + 1, "pri": self.binner.n_bins,
                "lrg": len(self.large) + 1, "mid": len(self.middle) + 1}[ftype]

    def index(self, ftype: str, value: str) -> int:
        table = self._index[ftype]
        return table.get(value, len(table))

    def value(self, ftype: str, idx: int) -> str:
        seq = {"id": self.items, "lrg": self.large, "mid": self.middle}[ftype]
        return seq[idx] if 0 <= idx < len(seq) else "<unk>"

    def attr_flags(self, gender: str, region: str) -> np.ndarray:
        out = np.zeros(self.d_type)
        g = self._index["gender"].get(gender)
        r = self._index["region"].get(region)
        if g is not None:
            out[g] = 1.0
        if r is not None:
            out[len(self.genders) + r] = 1.0
        return out

    def to_dict(self) -> dict:
        return {"id": self.items, "lrg": self.large, "mid": self.middle,
                "gender": self.genders, "region": self.regions,
                "price_binner": self.binner.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureVocabulary":
        return cls(list(d["id"]), list(d["lrg"]), list(d["mid"]), list(d["gender"]),
                   list(d["region"]), PriceBinner.from_dict(d["price_binner"]))


def build_vocab(train_sessions: Sequence[PseudoSession], n_price_bins: int = 10,
                calendar: SaleCalendar | None = None) -> FeatureVocabulary:
    """Build vocabularies from training sessions, in first-seen order."""
    if not train_sessions:
        raise DataError("cannot build a vocabulary from zero sessions")
    binner = fit_price_bins([p for s in train_sessions for p in s.prices], n_price_bins)
    return FeatureVocabulary(
        items=_first_seen(v for s in train_sessions for v in s.items),
        large=_first_seen(v for s in train_sessions for v in s.large_cats),
        middle=_first_seen(v for s in train_sessions for v in s.middle_cats),
        genders=_first_seen(s.gender for s in train_sessions),
        regions=_first_seen(s.region for s in train_sessions),
        binner=binner,
        calendar=calendar or SaleCalendar(),
    )


@dataclass(frozen=True)
class EncodedSession:
    """A pseudo-session with every feature mapped to vocabulary indices."""

    session_id: int
    week: int
    items: np.ndarray
    prices: np.ndarray
    large: np.ndarray
    middle: np.ndarray
    sale_flags: np.ndarray
    attr_flags: np.ndarray

    def __len__(self) -> int:
        return int(self.items.size)

    def sequence(self, ftype: str) -> np.ndarray:
        return {"id": self.items, "pri": self.prices, "lrg": self.large, "mid": self.middle}[ftype]


def encode_session(s: PseudoSession, vocab: FeatureVocabulary) -> EncodedSession:
    return EncodedSession(
        session_id=s.session_id,
        week=s.week,
        items=np.array([vocab.index("id", v) for v in s.items], dtype=np.int64),
        prices=bin_prices(vocab.binner, s.prices),
        large=np.array([vocab.index("lrg", v) for v in s.large_cats], dtype=np.int64),
        middle=np.array([vocab.index("mid", v) for v in s.middle_cats], dtype=np.int64),
        sale_flags=vocab.calendar.flags(s.week),
        attr_flags=vocab.attr_flags(s.gender, s.region),
    )


def encode_sessions(sessions: Iterable[PseudoSession], vocab: FeatureVocabulary) -> list[EncodedSession]:
    return [encode_session(s, vocab) for s in sessions]


# ---------------------------------------------------------------------------
# serialisation (JSON lines, fixed field order)
# ---------------------------------------------------------------------------

SESSION_FIELDS = ("session_id", "week", "gender", "region", "items", "prices", "large_cats", "middle_cats")


def session_to_json(s: PseudoSession) -> str:
    row = {name: getattr(s, name) for name in SESSION_FIELDS}
    for key in ("items", "prices", "large_cats", "middle_cats"):
        row[key] = list(row[key])
    return json.dumps(row, ensure_ascii=False, separators=(",", ":"))


def session_from_json(line: str) -> PseudoSession:
    d = json.loads(line)
    return PseudoSession(int(d["session_id"]), int(d["week"]), d["gender"], d["region"],
                         tuple(d["items"]), tuple(float(p) for p in d["prices"]),
                         tuple(d["large_cats"]), tuple(d["middle_cats"]))


def write_sessions(sessions: Iterable[PseudoSession], stream: IO[str]) -> None:
    for s in sessions:
        stream.write(session_to_json(s) + "\n")


def read_sessions(stream: IO[str]) -> list[PseudoSession]:
    return [session_from_json(line) for line in stream if line.strip()]


# ---------------------------------------------------------------------------
# end-to-end ingestion
# ---------------------------------------------------------------------------


@dataclass
class Corpus:
    sessions: list[PseudoSession]
    split: DatasetSplit
    vocab: FeatureVocabulary
    train: list[EncodedSession]
    validation: list[EncodedSession]
    test: list[EncodedSession]


def encode_split(split: DatasetSplit, vocab: FeatureVocabulary) -> tuple[list, list, list]:
    return (encode_sessions(split.train, vocab), encode_sessions(split.validation, vocab),
            encode_sessions(split.test, vocab))


def prepare(records: Sequence[RawRecord], train_week_max: int = 101, val_fraction: float = 0.1,
            seed: int = 0, min_len: int = 2, min_freq: int = 10, n_price_bins: int = 10) -> Corpus:
    """segment -> filter -> split -> vocabulary (training part only) -> encode."""
    sessions = filter_sessions(segment_sessions(records), min_len, min_freq)
    split = split_by_week(sessions, train_week_max, val_fraction, seed)
    vocab = build_vocab(split.train, n_price_bins)
    return Corpus(sessions, split, vocab, *encode_split(split, vocab))
