"""Command-line entry point: ``cohhgn <subcommand> [options]``.

Artifacts live under a data directory (``--data-dir``, else the
``COHHGN_DATA_DIR`` environment variable, else the working directory);
relative paths are resolved against it. Option values come from the
command line first, then a JSON ``--config`` file, then upstream artifact
metadata where it applies, then built-in defaults.

Failures exit with 2 (configuration), 3 (data) or 4 (numeric) and print a
single ``error[<category>]: <detail>`` line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from . import gradcheck as gc
from .data import (ConfigError, DataError, DatasetSplit, EncodedSession, FeatureVocabulary, bin_prices,
                   build_vocab, encode_split, filter_sessions, parse_records, read_sessions,
                   segment_sessions, split_by_week, write_records, write_sessions)
from .evaluation import DEFAULT_KS, evaluate
from .graphs import GraphFormatError, build_graphs, load_graph_set, save_graph_set
from .model import CheckpointError, make_batch, model_from_checkpoint
from .synthgen import SynthConfig, generate
from .trainer import NumericError, TrainConfig, config_dict, train

log = logging.getLogger("cohhgn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_SCHEMA = "cohhgn-data/1"
MANIFEST = "manifest.json"


class CLIError(Exception):
    def __init__(self, category: str, detail: str):
        super().__init__(detail)
        self.category = category


# ---------------------------------------------------------------------------
# small file helpers
# ---------------------------------------------------------------------------


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _read_json(path: str, what: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CLIError("data", f"{what} not found at {path}") from None
    except json.JSONDecodeError as exc:
        raise CLIError("data", f"{what} at {path} is not valid JSON: {exc}") from None


@dataclass
class RunManifest:
    """Per-step resolved configuration and artifact hashes for one data directory."""

    tool_version: str = __version__
    steps: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        if not os.path.exists(path):
            return cls()
        d = _read_json(path, "manifest")
        return cls(d.get("tool_version", __version__), d.get("steps", {}))

    def record(self, step: str, config: dict, root: str, inputs: list[str], outputs: list[str]) -> None:
        rel = lambda p: os.path.relpath(p, root)  # noqa: E731
        self.tool_version = __version__
        self.steps[step] = {
            "config": config,
            "inputs": {rel(p): _sha256(p) for p in inputs},
            "outputs": {rel(p): _sha256(p) for p in outputs},
        }

    def save(self, path: str) -> None:
        _write_json(path, {"tool_version": self.tool_version, "steps": self.steps})


# ---------------------------------------------------------------------------
# option resolution
# ---------------------------------------------------------------------------

# dest -> (default, type) for every option that may come from a config file
OPTIONS = {
    "synth": {
        "n_sessions": (5000, int), "n_items": (50, int), "n_large": (5, int), "n_middle": (15, int),
        "pattern_strength": (0.9, float), "mean_length": (2.24, float), "seed": (0, int),
        "out": ("corpus.csv", str),
    },
    "ingest": {
        "input": ("corpus.csv", str), "out": (".", str), "delimiter": (",", str), "schema": (None, dict),
        "train_week_max": (101, int), "val_fraction": (0.1, float), "min_len": (2, int),
        "min_freq": (10, int), "n_price_bins": (10, int), "seed": (0, int),
    },
    "build-graphs": {
        "ingested": (".", str), "out": ("graphs", str), "epsilon": (12, int), "top_n": (12, int),
    },
    "train": {
        **{f.name: (f.default, type(f.default) if f.default is not None else int) for f in fields(TrainConfig)},
        "ingested": (".", str), "graphs": ("graphs", str), "run_dir": ("run", str),
    },
    "evaluate": {
        "checkpoint": ("run/model.ckpt", str), "ingested": (".", str), "graphs": ("graphs", str),
        "split": ("test", str), "report": (None, str), "batch_size": (100, int),
    },
    "recommend": {
        "checkpoint": ("run/model.ckpt", str), "ingested": (".", str), "graphs": ("graphs", str),
        "k": (10, int),
    },
    "gradcheck": {"seed": (0, int)},
}

# options whose value is fixed by an upstream artifact unless set explicitly
UPSTREAM = {"n_price_bins", "epsilon", "top_n"}


def _load_config(path: str | None, command: str) -> dict:
    if path is None:
        return {}
    cfg = _read_json(path, "config file")
    if not isinstance(cfg, dict):
        raise CLIError("config", f"{path}: top level must be a JSON object")
    merged = {k: v for k, v in cfg.items() if not isinstance(v, dict) or k == "schema"}
    section = cfg.get(command, {})
    if not isinstance(section, dict):
        raise CLIError("config", f"{path}: section {command!r} must be an object")
    merged.update(section)
    known = set(OPTIONS[command])
    sections = set(OPTIONS)
    flat_unknown = [k for k in cfg if k not in sections and k not in set().union(*map(set, OPTIONS.values()))]
    sec_unknown = [k for k in section if k not in known]
    if flat_unknown or sec_unknown:
        raise CLIError("config", f"{path}: unknown option(s) {sorted(flat_unknown + sec_unknown)}")
    return {k: v for k, v in merged.items() if k in known}


def resolve(args: argparse.Namespace, command: str, upstream: dict | None = None) -> dict:
    """flags > config file > upstream artifacts > defaults."""
    from_file = _load_config(args.config, command)
    out, explicit = {}, set()
    for dest, (default, kind) in OPTIONS[command].items():
        flag = getattr(args, dest, None)
        if flag is not None:
            value, _ = flag, explicit.add(dest)
        elif dest in from_file:
            value, _ = from_file[dest], explicit.add(dest)
        elif upstream and dest in upstream:
            value = upstream[dest]
        else:
            value = default
        if value is not None and kind in (int, float) and not isinstance(value, bool):
            try:
                value = kind(value)
            except (TypeError, ValueError):
                raise CLIError("config", f"option {dest}: cannot interpret {value!r} as {kind.__name__}") from None
        out[dest] = value
    for dest in UPSTREAM & explicit:
        if upstream and dest in upstream and upstream[dest] != out[dest]:
            raise CLIError("config", f"{dest}={out[dest]} conflicts with the upstream artifacts, "
                                     f"which were built with {dest}={upstream[dest]}")
    return out


def _data_dir(args) -> str:
    return os.path.abspath(args.data_dir or os.environ.get("COHHGN_DATA_DIR") or ".")


def _path(root: str, p: str) -> str:
    return p if os.path.isabs(p) else os.path.join(root, p)


# ---------------------------------------------------------------------------
# ingested artifacts
# ---------------------------------------------------------------------------


def _ingested_paths(folder: str) -> dict[str, str]:
    return {name: os.path.join(folder, f"{name}.{ext}")
            for name, ext in (("sessions", "jsonl"), ("vocab", "json"), ("split", "json"), ("ingest", "json"))}


def _load_ingested(folder: str) -> tuple[dict, FeatureVocabulary, DatasetSplit]:
    paths = _ingested_paths(folder)
    meta = _read_json(paths["ingest"], "ingest metadata")
    if meta.get("schema") != DATA_SCHEMA:
        raise CLIError("data", f"{paths['ingest']}: schema {meta.get('schema')!r}, expected {DATA_SCHEMA!r}")
    vocab = FeatureVocabulary.from_dict(_read_json(paths["vocab"], "vocabulary"))
    try:
        with open(paths["sessions"], encoding="utf-8") as fh:
            sessions = read_sessions(fh)
    except FileNotFoundError:
        raise CLIError("data", f"sessions not found at {paths['sessions']}") from None
    try:
        split = DatasetSplit.from_dict(_read_json(paths["split"], "split"), sessions)
    except KeyError as exc:
        raise CLIError("data", f"split refers to unknown session {exc}") from None
    return meta, vocab, split


def _load_graphs(folder: str):
    try:
        return load_graph_set(folder)
    except (OSError, ValueError) as exc:
        raise CLIError("data", f"graphs at {folder}: {exc}") from None


def _load_model(path: str, graphs):
    try:
        with open(path, "rb") as fh:
            return model_from_checkpoint(fh, graphs)
    except FileNotFoundError:
        raise CLIError("data", f"checkpoint not found at {path}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, root: str) -> int:
    opt = resolve(args, "synth")
    out = _path(root, opt.pop("out"))
    try:
        cfg = SynthConfig(**opt)
    except ValueError as exc:
        raise CLIError("config", str(exc)) from None
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    records = generate(cfg)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        write_records(records, fh)
    manifest = RunManifest.load(os.path.join(root, MANIFEST))
    manifest.record("synth", {**opt, "out": os.path.relpath(out, root)}, root, [], [out])
    manifest.save(os.path.join(root, MANIFEST))
    print(f"wrote {len(records)} records to {out}")
    return EXIT_OK


def cmd_ingest(args, root: str) -> int:
    opt = resolve(args, "ingest")
    src = _path(root, opt["input"])
    folder = _path(root, opt["out"])
    if not os.path.exists(src):
        raise CLIError("data", f"input log not found at {src}")
    records = parse_records(src, opt["schema"], opt["delimiter"])
    sessions = filter_sessions(segment_sessions(records), opt["min_len"], opt["min_freq"])
    if not sessions:
        raise CLIError("data", "no session survives filtering")
    split = split_by_week(sessions, opt["train_week_max"], opt["val_fraction"], opt["seed"])
    vocab = build_vocab(split.train, opt["n_price_bins"])
    paths = _ingested_paths(folder)
    os.makedirs(folder, exist_ok=True)
    with open(paths["sessions"], "w", encoding="utf-8", newline="\n") as fh:
        write_sessions(sessions, fh)
    _write_json(paths["vocab"], vocab.to_dict())
    _write_json(paths["split"], split.to_dict())
    counts = {"records": len(records), "sessions": len(sessions), "train": len(split.train),
              "validation": len(split.validation), "test": len(split.test)}
    _write_json(paths["ingest"], {"schema": DATA_SCHEMA, "config": opt, "counts": counts,
                                  "n_items": vocab.n_items, "n_price_bins": vocab.n_price})
    manifest = RunManifest.load(os.path.join(root, MANIFEST))
    manifest.record("ingest", opt, root, [src], [paths[k] for k in sorted(paths)])
    manifest.save(os.path.join(root, MANIFEST))
    print(" ".join(f"{k}={v}" for k, v in counts.items()) + f" items={vocab.n_items}")
    return EXIT_OK


def cmd_build_graphs(args, root: str) -> int:
    opt = resolve(args, "build-graphs")
    folder = _path(root, opt["ingested"])
    meta, vocab, split = _load_ingested(folder)
    train_enc = encode_split(split, vocab)[0]
    top_n = opt["top_n"] if opt["top_n"] > 0 else None
    graphs = build_graphs(train_enc, vocab, opt["epsilon"], top_n)
    out = _path(root, opt["out"])
    written = save_graph_set(graphs, out)
    paths = _ingested_paths(folder)
    manifest = RunManifest.load(os.path.join(root, MANIFEST))
    manifest.record("build-graphs", opt, root, [paths["sessions"], paths["vocab"], paths["split"]], written)
    manifest.save(os.path.join(root, MANIFEST))
    edges = {t: len(g.edges()) for t, g in sorted(graphs.globals.items())}
    print(f"wrote {len(written)} files to {out}; global edges {edges}")
    return EXIT_OK


def cmd_train(args, root: str) -> int:
    pre = resolve(args, "train")
    folder = _path(root, pre["ingested"])
    gdir = _path(root, pre["graphs"])
    meta, vocab, split = _load_ingested(folder)
    graphs, gmeta = _load_graphs(gdir)
    upstream = {"n_price_bins": meta["n_price_bins"], "epsilon": gmeta["epsilon"],
                "top_n": gmeta["top_n"] if gmeta["top_n"] is not None else 0}
    opt = resolve(args, "train", upstream)
    try:
        cfg = TrainConfig(**{f.name: opt[f.name] for f in fields(TrainConfig)})
    except (TypeError, ValueError) as exc:
        raise CLIError("config", str(exc)) from None
    train_enc, val_enc, _ = encode_split(split, vocab)
    result = train(train_enc, val_enc, graphs, cfg, vocab.n_items, vocab.d_sale, vocab.d_type)
    run_dir = _path(root, opt["run_dir"])
    os.makedirs(run_dir, exist_ok=True)
    ckpt = os.path.join(run_dir, "model.ckpt")
    with open(ckpt, "wb") as fh:
        result.model.save(fh, {"train_config": config_dict(cfg), "best_epoch": result.best_epoch})
    log_path = os.path.join(run_dir, "metrics.jsonl")
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result.log_lines())
    resolved = {**config_dict(cfg), "ingested": os.path.relpath(folder, root),
                "graphs": os.path.relpath(gdir, root), "run_dir": os.path.relpath(run_dir, root)}
    paths = _ingested_paths(folder)
    inputs = [paths["sessions"], paths["vocab"], paths["split"], os.path.join(gdir, "graphs.json")]
    manifest = RunManifest.load(os.path.join(root, MANIFEST))
    manifest.record("train", resolved, root, inputs, [ckpt, log_path])
    manifest.save(os.path.join(root, MANIFEST))
    print(f"best epoch {result.best_epoch}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_evaluate(args, root: str) -> int:
    opt = resolve(args, "evaluate")
    if opt["split"] not in ("train", "validation", "test"):
        raise CLIError("config", f"unknown split {opt['split']!r}")
    meta, vocab, split = _load_ingested(_path(root, opt["ingested"]))
    graphs, _ = _load_graphs(_path(root, opt["graphs"]))
    ckpt = _path(root, opt["checkpoint"])
    model, _ = _load_model(ckpt, graphs)
    sessions = dict(zip(("train", "validation", "test"), encode_split(split, vocab)))[opt["split"]]
    if not sessions:
        raise CLIError("data", f"split {opt['split']!r} is empty")
    report = evaluate(model, sessions, DEFAULT_KS, opt["batch_size"])
    out = _path(root, opt["report"] or os.path.join(os.path.dirname(ckpt), f"report_{opt['split']}.json"))
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json() + "\n")
    manifest = RunManifest.load(os.path.join(root, MANIFEST))
    manifest.record(f"evaluate:{opt['split']}", {**opt, "report": os.path.relpath(out, root)}, root, [ckpt], [out])
    manifest.save(os.path.join(root, MANIFEST))
    print(report.table())
    return EXIT_OK


def cmd_recommend(args, root: str) -> int:
    opt = resolve(args, "recommend")
    items = [v for v in args.items.split(",") if v]
    if not items:
        raise CLIError("config", "--items needs at least one item")
    meta, vocab, _ = _load_ingested(_path(root, opt["ingested"]))
    graphs, _ = _load_graphs(_path(root, opt["graphs"]))
    model, _ = _load_model(_path(root, opt["checkpoint"]), graphs)
    idx = np.array([vocab.index("id", v) for v in items], dtype=np.int64)
    if args.prices:
        try:
            raw = [float(p) for p in args.prices.split(",")]
        except ValueError:
            raise CLIError("config", f"--prices must be numbers, got {args.prices!r}") from None
        if len(raw) != len(items):
            raise CLIError("config", f"{len(raw)} prices for {len(items)} items")
        prices = bin_prices(vocab.binner, raw)
    else:
        prices = graphs.item_price[idx]
    # a placeholder label keeps the batch layout; it is never scored
    session = EncodedSession(0, args.week, np.append(idx, 0), np.append(prices, 0), np.zeros(0, np.int64),
                             np.zeros(0, np.int64), vocab.calendar.flags(args.week),
                             vocab.attr_flags(args.gender, args.region))
    probs = model.predict(make_batch([session], model.cfg.max_len))[0]
    k = opt["k"]
    if not 0 < k <= probs.size:
        raise CLIError("config", f"k must lie in [1, {probs.size}]")
    top = np.argsort(-probs, kind="stable")[:k]
    for i in top:
        print(f"{vocab.value('id', int(i))}\t{probs[i]:.6f}")
    return EXIT_OK


def cmd_gradcheck(args, root: str) -> int:
    opt = resolve(args, "gradcheck")
    report = gc.run(seed=opt["seed"])
    for line in report.lines():
        print(line)
    if not report.passed:
        raise CLIError("numeric", "gradient check failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cohhgn", description="Session-based recommendation with CoHHGN+.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-dir", help="artifact root (default: $COHHGN_DATA_DIR or the working directory)")
    common.add_argument("--config", help="JSON file with option values")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic purchase log")
    p.add_argument("--n-sessions", type=int)
    p.add_argument("--n-items", type=int)
    p.add_argument("--n-large", type=int)
    p.add_argument("--n-middle", type=int)
    p.add_argument("--pattern-strength", type=float)
    p.add_argument("--mean-length", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("ingest", parents=[common], help="sessions, split and vocabulary from a purchase log")
    p.add_argument("--input")
    p.add_argument("--out")
    p.add_argument("--delimiter")
    p.add_argument("--schema", type=json.loads, help='column mapping as JSON, e.g. \'{"price": "amount"}\'')
    p.add_argument("--train-week-max", type=int)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--min-len", type=int)
    p.add_argument("--min-freq", type=int)
    p.add_argument("--price-bins", dest="n_price_bins", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("build-graphs", parents=[common], help="hypergraphs and global graphs")
    p.add_argument("--ingested")
    p.add_argument("--out")
    p.add_argument("--epsilon", type=int)
    p.add_argument("--top-n", type=int, help="neighbour cap per node; 0 disables truncation")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--ingested")
    p.add_argument("--graphs")
    p.add_argument("--run-dir")
    p.add_argument("--d", type=int)
    p.add_argument("--epsilon", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--price-bins", dest="n_price_bins", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--lr-decay-every", type=int)
    p.add_argument("--l2", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--time-dim", type=int)
    p.add_argument("--top-n", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--select-metric")

    p = sub.add_parser("evaluate", parents=[common], help="P@k / M@k of a checkpoint on a split")
    p.add_argument("--checkpoint")
    p.add_argument("--ingested")
    p.add_argument("--graphs")
    p.add_argument("--split", choices=("train", "validation", "test"))
    p.add_argument("--report")
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("recommend", parents=[common], help="top-k next items for a partial session")
    p.add_argument("--items", required=True, help="comma-separated item ids, oldest first")
    p.add_argument("--prices", help="comma-separated prices; default is each item's usual price bin")
    p.add_argument("--week", type=int, required=True)
    p.add_argument("--gender", required=True)
    p.add_argument("--region", required=True)
    p.add_argument("-k", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--ingested")
    p.add_argument("--graphs")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check on a toy model")
    p.add_argument("--seed", type=int)
    return parser


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "build-graphs": cmd_build_graphs, "train": cmd_train,
    "evaluate": cmd_evaluate, "recommend": cmd_recommend, "gradcheck": cmd_gradcheck,
}


def _category(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, CLIError):
        code = {"config": EXIT_CONFIG, "data": EXIT_DATA, "numeric": EXIT_NUMERIC}[exc.category]
        return exc.category, code
    if isinstance(exc, ConfigError):
        return "config", EXIT_CONFIG
    if isinstance(exc, NumericError) or isinstance(exc, FloatingPointError):
        return "numeric", EXIT_NUMERIC
    if isinstance(exc, (DataError, GraphFormatError, CheckpointError, OSError)):
        return "data", EXIT_DATA
    return "", 1


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    root = _data_dir(args)
    try:
        return COMMANDS[args.command](args, root)
    except (CLIError, ConfigError, DataError, GraphFormatError, CheckpointError, NumericError,
            FloatingPointError, OSError) as exc:
        category, code = _category(exc)
        detail = " ".join(str(exc).split())
        print(f"error[{category}]: {detail}", file=sys.stderr)
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
