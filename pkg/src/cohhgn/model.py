"""The CoHHGN+ network: hypergraph and global-graph node embeddings, gate
fusion, session-attribute-aware item/price preference extraction, a gated
co-guided interaction and softmax item scoring."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import IO, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .data import EncodedSession
from .graphs import GraphSet

EMBED_TYPES = ("id", "pri")
OTHER_TYPES = {"id": ("pri", "lrg", "mid"), "pri": ("id", "lrg", "mid")}
PROB_CLAMP = 1e-12
CHECKPOINT_MAGIC = "COHHGN-CKPT 1"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 128
    n_layers: int = 2
    heads: int = 4
    dropout: float = 0.2
    time_dim: int = 16
    leaky_slope: float = ad.DEFAULT_LEAKY_SLOPE
    max_len: int | None = None

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")
        if self.d % 2:
            raise ValueError("d must be even for the position encoding")


@dataclass
class ModelSizes:
    n_id: int  # embedding rows, unknown slot included
    n_pri: int
    n_known: int  # scoreable items
    d_sale: int
    d_type: int


# ---------------------------------------------------------------------------
# positional encodings (plain numpy, no parameters)
# ---------------------------------------------------------------------------


def week_encoding(week: int, c: int) -> np.ndarray:
    """``[sin(2 m pi / 52k), cos(2 m pi / 52k)]`` interleaved for k = 1..c/2."""
    if c % 2:
        raise ValueError("c must be even")
    k = np.arange(1, c // 2 + 1, dtype=np.float64)
    angle = 2.0 * week * np.pi / (52.0 * k)
    out = np.empty(c)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def item_position_encoding(position: int, d: int) -> np.ndarray:
    """Transformer sinusoid for a 1-based position."""
    k = np.arange(d // 2, dtype=np.float64)
    angle = position / np.power(10000.0, 2.0 * k / d)
    out = np.empty(d)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class SessionBatch:
    items: np.ndarray  # (B, S) input item indices, 0-padded
    prices: np.ndarray  # (B, S)
    mask: np.ndarray  # (B, S) bool
    lengths: np.ndarray  # (B,)
    sale_flags: np.ndarray  # (B, d_sale)
    attr_flags: np.ndarray  # (B, d_type)
    weeks: np.ndarray  # (B,)
    labels: np.ndarray  # (B,)
    session_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.items.shape[0])


def make_batch(sessions: Sequence[EncodedSession], max_len: int | None = None) -> SessionBatch:
    """Inputs are every element but the last; the last item is the label."""
    if not sessions:
        raise ValueError("empty batch")
    inputs = []
    for s in sessions:
        if len(s) < 2:
            raise ValueError(f"session {s.session_id} has length {len(s)} < 2")
        lo = 0 if max_len is None else max(0, len(s) - 1 - max_len)
        inputs.append((s.items[lo:-1], s.prices[lo:-1]))
    width = max(len(i) for i, _ in inputs)
    B = len(sessions)
    items = np.zeros((B, width), dtype=np.int64)
    prices = np.zeros((B, width), dtype=np.int64)
    mask = np.zeros((B, width), dtype=bool)
    for b, (it, pr) in enumerate(inputs):
        items[b, :len(it)] = it
        prices[b, :len(pr)] = pr
        mask[b, :len(it)] = True
    return SessionBatch(
        items=items, prices=prices, mask=mask,
        lengths=mask.sum(axis=1),
        sale_flags=np.stack([s.sale_flags for s in sessions]),
        attr_flags=np.stack([s.attr_flags for s in sessions]),
        weeks=np.array([s.week for s in sessions], dtype=np.int64),
        labels=np.array([s.items[-1] for s in sessions], dtype=np.int64),
        session_ids=np.array([s.session_id for s in sessions], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# graph structure as arrays
# ---------------------------------------------------------------------------


@dataclass
class GraphArrays:
    hyper_adj: dict[tuple[str, str], np.ndarray]
    global_nbr: dict[str, np.ndarray]
    global_w: dict[str, np.ndarray]
    global_mask: dict[str, np.ndarray]
    item_price: np.ndarray  # (n_known,)

    @classmethod
    def from_graphs(cls, graphs: GraphSet, n_known: int) -> "GraphArrays":
        adj = {(t, tau): graphs.hyper(t, tau).adjacency() for t in EMBED_TYPES for tau in OTHER_TYPES[t]}
        nbr, w, mask = {}, {}, {}
        for t in EMBED_TYPES:
            nbr[t], w[t], mask[t] = graphs.globals[t].padded()
        return cls(adj, nbr, w, mask, np.asarray(graphs.item_price[:n_known], dtype=np.int64))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def param_shapes(cfg: ModelConfig, sizes: ModelSizes) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d, cfg.heads
    shapes: dict[str, tuple[int, ...]] = {}
    for t in EMBED_TYPES:
        shapes[f"emb_{t}"] = (sizes.n_id if t == "id" else sizes.n_pri, d)
        shapes[f"u_{t}"] = (d,)
        shapes[f"W_{t}"] = (d, d)
        for tau in OTHER_TYPES[t]:
            shapes[f"W_{t}_{tau}"] = (d, d)
    shapes.update({
        "W1": (d + 1, d + 1), "q": (d + 1,), "W2": (d, 2 * d),
        "W3": (d, d), "W4": (d, d),
        "W5": (d, 2 * d), "W6": (d, sizes.d_sale + cfg.time_dim), "W7": (d, sizes.d_type), "b1": (d,),
        "W8": (d, d), "W9": (d, d), "b2": (d,), "u": (d,),
        "WQ": (h, d // h, d), "WK": (h, d // h, d), "WV": (h, d // h, d),
        "Wa": (d, 2 * d), "Wb": (d, 2 * d), "Wc": (d, d), "Wd": (d, d),
    })
    return shapes


ZERO_INIT = ("b1", "b2")


def init_params(cfg: ModelConfig, sizes: ModelSizes, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg, sizes).items():
        if name in ZERO_INIT:
            params[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)
        else:
            params[name] = ad.he_init(shape, rng, name=name)
    return params


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


linear = ad.linear


def intra_type_aggregate(h_prev: Tensor, adj: np.ndarray, u_t: Tensor) -> Tensor:
    """Attention-weighted mean of each node's hyperedge neighbourhood."""
    n = h_prev.shape[0]
    scores = ad.reshape(ad.matmul(h_prev, u_t), (1, n)) + np.zeros((n, 1))
    alpha = ad.softmax(scores, axis=1, mask=adj)
    return ad.matmul(alpha, h_prev)


def inter_type_aggregate(h_prev: Tensor, inters: Sequence[Tensor], weights: Sequence[Tensor]) -> Tensor:
    """Per-dimension softmax over [previous, intermediate...] candidates."""
    cands = [h_prev, *inters]
    logits = ad.stack([linear(c, W) for c, W in zip(cands, weights)], axis=0)
    beta = ad.softmax(logits, axis=0)
    return ad.tsum(beta * ad.stack(cands, axis=0), axis=0)


def gather_nodes(h: Tensor, idx: np.ndarray) -> Tensor:
    """Per-session row gather: ``out[b, k] = h[b, idx[b, k]]`` for h of shape (B, n, d)."""
    B, n, d = h.shape
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, (B, idx.size))
    flat = ad.reshape(h, (B * n, d))
    return ad.take_rows(flat, idx + (np.arange(B) * n)[:, None])


def edge_scores(proj: Tensor, nbr: np.ndarray, w: np.ndarray, wcol: Tensor, q: Tensor, slope: float) -> Tensor:
    """``q . leaky(proj[b, nbr[i, k]] + w[i, k] * wcol)`` as one fused op, shape (n, N, B)."""
    out = kernels.edge_scores(proj.data, nbr, w, wcol.data, q.data, slope)

    def bw(g):
        return kernels.edge_scores_grad(g, proj.data, nbr, w, wcol.data, q.data, slope)

    return ad.custom_op(out, (proj, wcol, q), bw)


def neighbour_sum(pi: Tensor, h: Tensor, nbr: np.ndarray) -> Tensor:
    """``out[b, i] = sum_k pi[i, k, b] h[b, nbr[i, k]]`` as one fused op, shape (B, n, d)."""
    out = kernels.neighbour_sum(pi.data, h.data, nbr)

    def bw(g):
        return kernels.neighbour_sum_grad(g, pi.data, h.data, nbr)

    return ad.custom_op(out, (pi, h), bw)


def session_mean(h: Tensor, seq: np.ndarray, mask: np.ndarray) -> Tensor:
    rows = gather_nodes(h, seq)
    m = mask[..., None].astype(np.float64)
    return ad.tsum(rows * m, axis=1) * (1.0 / mask.sum(axis=1, keepdims=True))


def global_propagate(h_prev: Tensor, sbar: Tensor, nbr: np.ndarray, w: np.ndarray, mask: np.ndarray,
                     W1: Tensor, q: Tensor, slope: float) -> Tensor:
    """Session-conditioned attention over each node's global neighbours.

    Returns (B, n, d); nodes without neighbours get a zero vector.
    ``W1 [s * h_j ; w_ij]`` is split as ``W1[:, :d] (s * h_j) + W1[:, d] w_ij``
    so the projection runs once per (session, node) instead of per edge.
    """
    B, n, d = h_prev.shape
    feat = ad.reshape(sbar, (B, 1, d)) * h_prev
    proj = linear(feat, W1[:, :d])  # (B, n, d+1)
    score = edge_scores(proj, nbr, w, W1[:, d], q, slope)  # (n, N, B)
    pi = ad.softmax(score, axis=1, mask=mask[:, :, None])
    return neighbour_sum(pi, h_prev, nbr)


def global_aggregate(h_prev: Tensor, h_neigh: Tensor, W2: Tensor) -> Tensor:
    return ad.relu(linear(ad.concat([h_prev, h_neigh], axis=-1), W2))


def gate_fuse(h_hyper: Tensor, h_global: Tensor, W3: Tensor, W4: Tensor) -> Tensor:
    g = ad.sigmoid(linear(h_hyper, W3) + linear(h_global, W4))
    return g * h_hyper + (1.0 - g) * h_global


def session_item_embedding(H: Tensor, pos_item: np.ndarray, side: np.ndarray, x_type: np.ndarray,
                           p: dict[str, Tensor]) -> Tensor:
    """tanh(W5 [h; pos_item] + W6 [x_sale; pos_time] + W7 x_type + b1), (B, S, d).

    ``side`` is the per-session ``[x_sale; pos_time]`` block, shape (B, d_sale + c).
    """
    B, S, d = H.shape
    pos = Tensor(np.broadcast_to(pos_item[None, :S], (B, S, d)))
    per_session = linear(Tensor(side), p["W6"]) + linear(Tensor(x_type), p["W7"]) + p["b1"]
    z = linear(ad.concat([H, pos], axis=-1), p["W5"]) + ad.reshape(per_session, (B, 1, d))
    return ad.tanh(z)


def item_preference(V: Tensor, H: Tensor, mask: np.ndarray, p: dict[str, Tensor]) -> Tensor:
    """Sum of item embeddings weighted by raw (unnormalised) attention scores."""
    B, S, d = V.shape
    m = mask.astype(np.float64)
    vbar = ad.tsum(V * m[..., None], axis=1) * (1.0 / m.sum(axis=1, keepdims=True))
    hidden = ad.sigmoid(linear(V, p["W8"]) + ad.reshape(linear(vbar, p["W9"]), (B, 1, d)) + p["b2"])
    beta = ad.matmul(hidden, p["u"]) * m  # (B, S)
    return ad.tsum(ad.reshape(beta, (B, S, 1)) * H, axis=1)


def price_preference(E: Tensor, mask: np.ndarray, lengths: np.ndarray, p: dict[str, Tensor]) -> Tensor:
    """Multi-head self-attention over the price sequence, read at the last position."""
    B, S, d = E.shape
    h, dk, _ = p["WQ"].shape
    E4 = ad.reshape(E, (B, 1, S, d))
    Q = ad.matmul(E4, ad.transpose(p["WQ"], (0, 2, 1)))  # (B, h, S, dk)
    K = ad.matmul(E4, ad.transpose(p["WK"], (0, 2, 1)))
    V = ad.matmul(E4, ad.transpose(p["WV"], (0, 2, 1)))
    scores = ad.matmul(Q, ad.swapaxes(K, -1, -2)) * (1.0 / math.sqrt(dk))
    attn = ad.softmax(scores, axis=-1, mask=mask[:, None, None, :])
    heads = ad.matmul(attn, V)  # (B, h, S, dk)
    M = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (B, S, h * dk))
    return M[np.arange(B), np.asarray(lengths) - 1]


def co_guided_transform(I_hat: Tensor, P_hat: Tensor, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Gated mutual refinement of the item and price preference vectors."""
    both = ad.concat([I_hat, P_hat], axis=-1)
    g_i = ad.sigmoid(linear(both, p["Wa"]))
    g_p = ad.sigmoid(linear(both, p["Wb"]))
    I = g_i * I_hat + (1.0 - g_i) * ad.tanh(linear(P_hat, p["Wc"]))
    P = g_p * P_hat + (1.0 - g_p) * ad.tanh(linear(I_hat, p["Wd"]))
    return I, P


def score_items(I: Tensor, P: Tensor, h_id: Tensor, h_pri: Tensor, item_price: np.ndarray) -> Tensor:
    """Logits ``P . h_price(i) + I . h_i`` for every scoreable item i, shape (B, n_known)."""
    B = I.shape[0]
    n_known = item_price.size
    H_items = h_id[:, :n_known, :]
    H_price = gather_nodes(h_pri, item_price)
    q_item = ad.reshape(ad.matmul(H_items, ad.reshape(I, (B, -1, 1))), (B, n_known))
    q_price = ad.reshape(ad.matmul(H_price, ad.reshape(P, (B, -1, 1))), (B, n_known))
    return q_item + q_price


def bce_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Binary cross-entropy summed over items, averaged over sessions."""
    B, n = probs.shape
    y = np.zeros((B, n))
    y[np.arange(B), labels] = 1.0
    p = ad.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_item = y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p)
    return -ad.tsum(per_item) * (1.0 / B)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class CoHHGN:
    """Holds configuration, graph arrays and parameters; ``forward`` builds
    one define-by-run graph per batch."""

    def __init__(self, cfg: ModelConfig, sizes: ModelSizes, graphs: GraphArrays,
                 params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.sizes = sizes
        self.graphs = graphs
        self.seed = seed
        self.params = params if params is not None else init_params(cfg, sizes, seed)
        expected = param_shapes(cfg, sizes)
        if set(self.params) != set(expected):
            raise CheckpointError(f"parameter names differ: {sorted(set(self.params) ^ set(expected))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise CheckpointError(f"{name}: shape {self.params[name].shape} != {shape}")
        self._pos_item = np.stack([item_position_encoding(i + 1, cfg.d) for i in range(64)])

    @classmethod
    def from_graphs(cls, cfg: ModelConfig, graphs: GraphSet, n_known: int, d_sale: int, d_type: int,
                    seed: int = 0) -> "CoHHGN":
        sizes = ModelSizes(graphs.sizes["id"], graphs.sizes["pri"], n_known, d_sale, d_type)
        return cls(cfg, sizes, GraphArrays.from_graphs(graphs, n_known), seed=seed)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def position_table(self, S: int) -> np.ndarray:
        if S > self._pos_item.shape[0]:
            self._pos_item = np.stack([item_position_encoding(i + 1, self.cfg.d) for i in range(2 * S)])
        return self._pos_item[:S]

    # -- node embeddings -------------------------------------------------------
    def hyper_embeddings(self, t: str, training: bool, rng) -> Tensor:
        p, cfg = self.params, self.cfg
        h = p[f"emb_{t}"]
        weights = [p[f"W_{t}"]] + [p[f"W_{t}_{tau}"] for tau in OTHER_TYPES[t]]
        for _ in range(cfg.n_layers):
            inters = [intra_type_aggregate(h, self.graphs.hyper_adj[(t, tau)], p[f"u_{t}"])
                      for tau in OTHER_TYPES[t]]
            h = inter_type_aggregate(h, inters, weights)
            h = ad.dropout(h, cfg.dropout, rng, training)
        return h

    def global_embeddings(self, t: str, seq: np.ndarray, mask: np.ndarray, training: bool, rng) -> Tensor:
        p, cfg, g = self.params, self.cfg, self.graphs
        B = seq.shape[0]
        h = p[f"emb_{t}"] + np.zeros((B, 1, 1))
        for _ in range(cfg.n_layers):
            sbar = session_mean(h, seq, mask)
            neigh = global_propagate(h, sbar, g.global_nbr[t], g.global_w[t], g.global_mask[t],
                                     p["W1"], p["q"], cfg.leaky_slope)
            h = global_aggregate(h, neigh, p["W2"])
            h = ad.dropout(h, cfg.dropout, rng, training)
        return h

    def node_embeddings(self, batch: SessionBatch, training: bool = False, rng=None) -> dict[str, Tensor]:
        out = {}
        for t, seq in (("id", batch.items), ("pri", batch.prices)):
            hyper = self.hyper_embeddings(t, training, rng)
            glob = self.global_embeddings(t, seq, batch.mask, training, rng)
            out[t] = gate_fuse(hyper, glob, self.params["W3"], self.params["W4"])
        return out

    # -- full pass -----------------------------------------------------------------
    def logits(self, batch: SessionBatch, training: bool = False, rng=None) -> Tensor:
        return self.logits_from_nodes(batch, self.node_embeddings(batch, training, rng))

    def logits_from_nodes(self, batch: SessionBatch, nodes: dict[str, Tensor]) -> Tensor:
        """The session-level half of the pass, given fused node embeddings per type."""
        p, cfg = self.params, self.cfg
        H = gather_nodes(nodes["id"], batch.items)
        Hp = gather_nodes(nodes["pri"], batch.prices)
        times = np.stack([week_encoding(int(m), cfg.time_dim) for m in batch.weeks])
        side = np.concatenate([batch.sale_flags, times], axis=1)
        V = session_item_embedding(H, self.position_table(H.shape[1]), side, batch.attr_flags, p)
        I_hat = item_preference(V, H, batch.mask, p)
        P_hat = price_preference(Hp, batch.mask, batch.lengths, p)
        I, P = co_guided_transform(I_hat, P_hat, p)
        return score_items(I, P, nodes["id"], nodes["pri"], self.graphs.item_price)

    def forward(self, batch: SessionBatch, training: bool = False, rng=None) -> Tensor:
        """Next-item probabilities, shape (B, n_known)."""
        return ad.softmax(self.logits(batch, training, rng), axis=-1)

    def loss(self, batch: SessionBatch, training: bool = True, rng=None) -> Tensor:
        return bce_loss(self.forward(batch, training, rng), batch.labels)

    def predict(self, batch: SessionBatch) -> np.ndarray:
        with ad.no_grad():
            return self.forward(batch, training=False).data

    # -- checkpoints ---------------------------------------------------------
    def header(self) -> dict:
        return {"config": asdict(self.cfg), "sizes": asdict(self.sizes), "seed": self.seed}

    def save(self, stream: IO[bytes], extra: dict | None = None) -> None:
        save_checkpoint(stream, self.params, {**self.header(), **(extra or {})})


def save_checkpoint(stream: IO[bytes], params: dict[str, Tensor], header: dict) -> None:
    """Text header lines followed by named little-endian float64 blocks."""
    stream.write((CHECKPOINT_MAGIC + "\n").encode())
    stream.write((json.dumps(header, sort_keys=True) + "\n").encode())
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        dims = " ".join(str(s) for s in arr.shape)
        stream.write(f"{name} {arr.ndim} {dims}\n".encode())
        stream.write(arr.tobytes())


def load_checkpoint(stream: IO[bytes]) -> tuple[dict, dict[str, Tensor]]:
    magic = stream.readline().decode().rstrip("\n")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"unrecognised checkpoint header {magic!r}")
    header = json.loads(stream.readline().decode())
    params = {}
    while True:
        line = stream.readline()
        if not line:
            break
        fields = line.decode().split()
        name, ndim = fields[0], int(fields[1])
        shape = tuple(int(x) for x in fields[2:2 + ndim])
        count = int(np.prod(shape)) if shape else 1
        buf = stream.read(8 * count)
        if len(buf) != 8 * count:
            raise CheckpointError(f"truncated block {name}")
        params[name] = Tensor(np.frombuffer(buf, dtype="<f8").reshape(shape).copy(), requires_grad=True, name=name)
    return header, params


def model_from_checkpoint(stream: IO[bytes], graphs: GraphSet) -> tuple[CoHHGN, dict]:
    header, params = load_checkpoint(stream)
    cfg = ModelConfig(**header["config"])
    sizes = ModelSizes(**header["sizes"])
    if graphs.sizes.get("id") != sizes.n_id or graphs.sizes.get("pri") != sizes.n_pri:
        raise CheckpointError(
            f"graph sizes {graphs.sizes} do not match checkpoint ({sizes.n_id} items, {sizes.n_pri} price bins)")
    model = CoHHGN(cfg, sizes, GraphArrays.from_graphs(graphs, sizes.n_known), params=params,
                   seed=int(header.get("seed", 0)))
    return model, header
