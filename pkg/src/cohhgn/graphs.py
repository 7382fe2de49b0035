"""Heterogeneous hypergraphs and epsilon-neighbourhood global graphs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from . import kernels
from .data import FEATURE_TYPES, EncodedSession, FeatureVocabulary

HYPER_HEADER = "# cohhgn hypergraph v1"
GLOBAL_HEADER = "# cohhgn global-graph v1"

DEFAULT_EPSILON = 12
DEFAULT_TOP_N = 12


class GraphFormatError(ValueError):
    pass


@dataclass
class HeteroHypergraph:
    """Nodes are values of ``node_type``; hyperedges are values of ``edge_type``.

    ``incidence[e]`` is the sorted tuple of nodes co-observed with edge value e.
    """

    node_type: str
    edge_type: str
    n_nodes: int
    n_edges: int
    incidence: dict[int, tuple[int, ...]]

    def edges_of(self, node: int) -> list[int]:
        return [e for e, nodes in self.incidence.items() if node in nodes]

    def incidence_matrix(self) -> np.ndarray:
        """Boolean (n_nodes, n_edges) matrix."""
        mat = np.zeros((self.n_nodes, self.n_edges), dtype=bool)
        for e, nodes in self.incidence.items():
            mat[list(nodes), e] = True
        return mat

    def adjacency(self) -> np.ndarray:
        """Boolean (n_nodes, n_nodes) neighbourhood mask, self included."""
        inc = self.incidence_matrix().astype(np.int64)
        adj = (inc @ inc.T) > 0
        np.fill_diagonal(adj, True)
        return adj

    def pairs(self) -> list[tuple[int, int]]:
        return sorted((e, v) for e, nodes in self.incidence.items() for v in nodes)


def build_hypergraph(sessions: Sequence[EncodedSession], node_type: str, edge_type: str,
                     n_nodes: int, n_edges: int) -> HeteroHypergraph:
    if node_type == edge_type:
        raise ValueError("node and edge types must differ")
    for t in (node_type, edge_type):
        if t not in FEATURE_TYPES:
            raise ValueError(f"unknown feature type {t!r}")
    if sessions:
        nodes = np.concatenate([s.sequence(node_type) for s in sessions])
        edges = np.concatenate([s.sequence(edge_type) for s in sessions])
        pairs = np.unique(np.stack([edges, nodes], axis=1), axis=0)
    else:
        pairs = np.zeros((0, 2), dtype=np.int64)
    incidence: dict[int, list[int]] = {}
    for e, v in pairs.tolist():
        incidence.setdefault(e, []).append(v)
    return HeteroHypergraph(node_type, edge_type, int(n_nodes), int(n_edges),
                            {e: tuple(vs) for e, vs in incidence.items()})


def hyper_neighbors(graph: HeteroHypergraph, node: int) -> set[int]:
    """Every node sharing a hyperedge with ``node``, plus ``node`` itself."""
    if not 0 <= node < graph.n_nodes:
        raise IndexError(f"node {node} outside 0..{graph.n_nodes - 1}")
    out = {node}
    for nodes in graph.incidence.values():
        if node in nodes:
            out.update(nodes)
    return out


@dataclass
class GlobalGraph:
    """Symmetric weighted co-occurrence graph over one feature type."""

    feature_type: str
    epsilon: int
    n_nodes: int
    adjacency: dict[int, list[tuple[int, int]]]
    top_n: int | None = DEFAULT_TOP_N

    def weight(self, i: int, j: int) -> int:
        return dict(self.adjacency.get(i, [])).get(j, 0)

    def edges(self) -> list[tuple[int, int, int]]:
        return sorted((i, j, w) for i, nbrs in self.adjacency.items() for j, w in nbrs)

    def padded(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(neighbours, weights, mask), each (n_nodes, max_degree); max_degree >= 1."""
        width = max([len(v) for v in self.adjacency.values()] + [1])
        nbr = np.zeros((self.n_nodes, width), dtype=np.int64)
        wts = np.zeros((self.n_nodes, width))
        mask = np.zeros((self.n_nodes, width), dtype=bool)
        for i, lst in self.adjacency.items():
            for k, (j, w) in enumerate(lst):
                nbr[i, k], wts[i, k], mask[i, k] = j, w, True
        return nbr, wts, mask


def cooccurrence_weights(sessions: Sequence[EncodedSession], feature_type: str, epsilon: int,
                         n_nodes: int) -> np.ndarray:
    """Dense symmetric weight matrix before degree truncation.

    A value only acts as a window centre when it appears in at least two
    distinct sessions (the neighbour must come from a different session).
    """
    if epsilon < 1:
        raise ValueError("epsilon must be >= 1")
    seqs = [s.sequence(feature_type) for s in sessions]
    if not seqs:
        return np.zeros((n_nodes, n_nodes), dtype=np.int64)
    values = np.concatenate(seqs)
    offsets = np.concatenate([[0], np.cumsum([len(q) for q in seqs])])
    sessions_with = np.zeros(n_nodes, dtype=np.int64)
    for q in seqs:
        sessions_with[np.unique(q)] += 1
    gate = sessions_with >= 2
    counts = kernels.window_counts(values, offsets, gate, epsilon, n_nodes)
    return np.maximum(counts, counts.T)


def build_global_graph(sessions: Sequence[EncodedSession], feature_type: str, n_nodes: int,
                       epsilon: int = DEFAULT_EPSILON, top_n: int | None = DEFAULT_TOP_N) -> GlobalGraph:
    """Build the global graph; with ``top_n`` an edge survives only if it is in
    the top-``top_n`` (by weight, then index) list of both endpoints."""
    w = cooccurrence_weights(sessions, feature_type, epsilon, n_nodes)
    keep = w > 0
    if top_n is not None:
        ranked = np.zeros_like(keep)
        for i in range(n_nodes):
            cand = np.flatnonzero(w[i])
            if cand.size > top_n:
                order = np.lexsort((cand, -w[i, cand]))
                cand = cand[order[:top_n]]
            ranked[i, cand] = True
        keep &= ranked & ranked.T
    adjacency = {}
    for i in range(n_nodes):
        cand = np.flatnonzero(keep[i])
        if cand.size:
            order = np.lexsort((cand, -w[i, cand]))
            adjacency[i] = [(int(j), int(w[i, j])) for j in cand[order]]
    return GlobalGraph(feature_type, int(epsilon), int(n_nodes), adjacency, top_n)


def modal_price_bins(sessions: Sequence[EncodedSession], n_items: int, n_price: int) -> np.ndarray:
    """Most frequent price bin per item (lowest bin on ties); unseen items get
    the corpus-wide modal bin."""
    counts = np.zeros((n_items, n_price), dtype=np.int64)
    for s in sessions:
        np.add.at(counts, (s.items, s.prices), 1)
    overall = int(np.argmax(counts.sum(axis=0))) if counts.any() else 0
    out = np.argmax(counts, axis=1)
    out[counts.sum(axis=1) == 0] = overall
    return out.astype(np.int64)


@dataclass
class GraphSet:
    """Everything the model reads from the training corpus."""

    hypergraphs: dict[tuple[str, str], HeteroHypergraph]
    globals: dict[str, GlobalGraph]
    item_price: np.ndarray
    sizes: dict[str, int] = field(default_factory=dict)

    def hyper(self, node_type: str, edge_type: str) -> HeteroHypergraph:
        return self.hypergraphs[(node_type, edge_type)]


def build_graphs(train: Sequence[EncodedSession], vocab: FeatureVocabulary,
                 epsilon: int = DEFAULT_EPSILON, top_n: int | None = DEFAULT_TOP_N) -> GraphSet:
    sizes = {t: vocab.size(t) for t in FEATURE_TYPES}
    hypers = {}
    for t1 in FEATURE_TYPES:
        for t2 in FEATURE_TYPES:
            if t1 != t2:
                hypers[(t1, t2)] = build_hypergraph(train, t1, t2, sizes[t1], sizes[t2])
    globals_ = {t: build_global_graph(train, t, sizes[t], epsilon, top_n) for t in ("id", "pri")}
    item_price = modal_price_bins(train, sizes["id"], sizes["pri"])
    return GraphSet(hypers, globals_, item_price, sizes)


# ---------------------------------------------------------------------------
# text serialisation
# ---------------------------------------------------------------------------


def write_hypergraph(g: HeteroHypergraph, stream: IO[str]) -> None:
    stream.write(f"{HYPER_HEADER}\n")
    stream.write(f"node_type {g.node_type}\nedge_type {g.edge_type}\n")
    stream.write(f"n_nodes {g.n_nodes}\nn_edges {g.n_edges}\n")
    for e, v in g.pairs():
        stream.write(f"{e} {v}\n")


def read_hypergraph(stream: IO[str]) -> HeteroHypergraph:
    lines = [ln.rstrip("\n") for ln in stream if ln.strip()]
    if not lines or lines[0] != HYPER_HEADER:
        raise GraphFormatError("not a hypergraph file")
    meta = dict(ln.split(" ", 1) for ln in lines[1:5])
    incidence: dict[int, list[int]] = {}
    for ln in lines[5:]:
        e, v = (int(x) for x in ln.split())
        incidence.setdefault(e, []).append(v)
    return HeteroHypergraph(meta["node_type"], meta["edge_type"], int(meta["n_nodes"]),
                            int(meta["n_edges"]), {e: tuple(vs) for e, vs in incidence.items()})


def write_global_graph(g: GlobalGraph, stream: IO[str]) -> None:
    stream.write(f"{GLOBAL_HEADER}\n")
    stream.write(f"feature_type {g.feature_type}\nepsilon {g.epsilon}\n")
    stream.write(f"top_n {g.top_n if g.top_n is not None else 'none'}\nn_nodes {g.n_nodes}\n")
    for i in sorted(g.adjacency):
        for j, w in g.adjacency[i]:
            stream.write(f"{i} {j} {w}\n")


def read_global_graph(stream: IO[str]) -> GlobalGraph:
    lines = [ln.rstrip("\n") for ln in stream if ln.strip()]
    if not lines or lines[0] != GLOBAL_HEADER:
        raise GraphFormatError("not a global-graph file")
    meta = dict(ln.split(" ", 1) for ln in lines[1:5])
    adjacency: dict[int, list[tuple[int, int]]] = {}
    for ln in lines[5:]:
        i, j, w = (int(x) for x in ln.split())
        adjacency.setdefault(i, []).append((j, w))
    top_n = None if meta["top_n"] == "none" else int(meta["top_n"])
    return GlobalGraph(meta["feature_type"], int(meta["epsilon"]), int(meta["n_nodes"]), adjacency, top_n)


GRAPH_SET_SCHEMA = "cohhgn-graphs/1"


def save_graph_set(graphs: GraphSet, directory: str) -> list[str]:
    """Write one text file per graph plus ``graphs.json``; returns the paths written."""
    os.makedirs(directory, exist_ok=True)
    files = {}
    for (t1, t2), g in sorted(graphs.hypergraphs.items()):
        name = f"hyper_{t1}_{t2}.txt"
        with open(os.path.join(directory, name), "w", encoding="utf-8", newline="\n") as fh:
            write_hypergraph(g, fh)
        files[f"{t1}/{t2}"] = name
    for t, g in sorted(graphs.globals.items()):
        name = f"global_{t}.txt"
        with open(os.path.join(directory, name), "w", encoding="utf-8", newline="\n") as fh:
            write_global_graph(g, fh)
        files[t] = name
    any_global = next(iter(graphs.globals.values()))
    meta = {"schema": GRAPH_SET_SCHEMA, "sizes": graphs.sizes, "item_price": graphs.item_price.tolist(),
            "epsilon": any_global.epsilon, "top_n": any_global.top_n, "files": files}
    with open(os.path.join(directory, "graphs.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    written = [os.path.join(directory, f) for f in sorted(files.values())]
    written.append(os.path.join(directory, "graphs.json"))
    return written


def load_graph_set(directory: str) -> tuple[GraphSet, dict]:
    """Inverse of :func:`save_graph_set`; also returns the metadata block."""
    meta_path = os.path.join(directory, "graphs.json")
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise GraphFormatError(f"{meta_path} not found; run build-graphs first") from None
    if meta.get("schema") != GRAPH_SET_SCHEMA:
        raise GraphFormatError(f"{meta_path}: schema {meta.get('schema')!r}, expected {GRAPH_SET_SCHEMA!r}")
    hypers, globals_ = {}, {}
    for key, name in meta["files"].items():
        with open(os.path.join(directory, name), encoding="utf-8") as fh:
            if "/" in key:
                g = read_hypergraph(fh)
                hypers[(g.node_type, g.edge_type)] = g
            else:
                globals_[key] = read_global_graph(fh)
    graphs = GraphSet(hypers, globals_, np.asarray(meta["item_price"], dtype=np.int64),
                      {k: int(v) for k, v in meta["sizes"].items()})
    return graphs, meta
