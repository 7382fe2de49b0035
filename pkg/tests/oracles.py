"""Slow, independent reference implementations used as test oracles.

Nothing here imports the model, graph or metric code under test; every
quantity is recomputed with explicit loops over sessions, positions and
nodes so that a shared bug cannot hide on both sides of an assertion.
"""

from __future__ import annotations

import math
from collections import defaultdict

import numpy as np

# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def run_lengths(records):
    """Sessions as lists of record positions: a new run starts whenever
    (gender, region) changes or the week goes backwards."""
    runs, current, prev = [], [], None
    for pos, r in enumerate(records):
        key = (r.gender, r.region)
        if prev is not None and (key != (prev.gender, prev.region) or r.week < prev.week):
            runs.append(current)
            current = []
        current.append(pos)
        prev = r
    if current:
        runs.append(current)
    return runs


def fixed_point_filter(sessions, min_len, min_freq):
    """Drop rare items and short sessions until nothing changes; returns the
    surviving item tuples."""
    seqs = [list(s) for s in sessions]
    while True:
        freq = defaultdict(int)
        for q in seqs:
            for v in q:
                freq[v] += 1
        nxt = [[v for v in q if freq[v] >= min_freq] for q in seqs]
        nxt = [q for q in nxt if len(q) >= min_len]
        if nxt == seqs:
            return [tuple(q) for q in seqs]
        seqs = nxt


# ---------------------------------------------------------------------------
# graphs
# ---------------------------------------------------------------------------


def incidence_scan(sessions, node_type, edge_type):
    """{edge: set(nodes)} from a record-by-record scan."""
    out = defaultdict(set)
    for s in sessions:
        nodes, edges = s.sequence(node_type), s.sequence(edge_type)
        for k in range(len(nodes)):
            out[int(edges[k])].add(int(nodes[k]))
    return dict(out)


def window_counts(sessions, feature_type, epsilon):
    """Directed window counts c[v][u]: session b, position i' holding v, some
    other session a also holding v, u = b[j] with 0 < |j - i'| <= epsilon, u != v."""
    seqs = [[int(x) for x in s.sequence(feature_type)] for s in sessions]
    counts = defaultdict(int)
    for b, seq in enumerate(seqs):
        for i, v in enumerate(seq):
            shared = any(v in other for a, other in enumerate(seqs) if a != b)
            if not shared:
                continue
            for j in range(max(0, i - epsilon), min(len(seq), i + epsilon + 1)):
                if j != i and seq[j] != v:
                    counts[(v, seq[j])] += 1
    return counts


def window_weights(sessions, feature_type, epsilon, top_n=None):
    """Symmetric weights {(i, j): w}, max-symmetrised, with optional mutual top-N."""
    c = window_counts(sessions, feature_type, epsilon)
    w = {}
    for (a, b), n in c.items():
        w[(a, b)] = max(n, c.get((b, a), 0))
        w[(b, a)] = max(n, c.get((b, a), 0))
    if top_n is None:
        return w
    best = {}
    for node in {a for a, _ in w}:
        nbrs = sorted(((-wt, j) for (i, j), wt in w.items() if i == node))
        best[node] = {j for _, j in nbrs[:top_n]}
    return {(i, j): wt for (i, j), wt in w.items() if j in best[i] and i in best[j]}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def full_sort_rank(scores, label):
    """1-based rank of ``label`` after a stable sort by descending score."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order.index(label) + 1


def precision_mrr(scores, label, k):
    r = full_sort_rank(scores, label)
    return (1.0 if r <= k else 0.0), (1.0 / r if r <= k else 0.0)


# ---------------------------------------------------------------------------
# forward pass, one session at a time
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softmax(x):
    z = np.exp(x - np.max(x))
    return z / z.sum()


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def hyper_neighbourhood(graph, i):
    nb = {i}
    for nodes in graph.incidence.values():
        if i in nodes:
            nb.update(nodes)
    return sorted(nb)


def hyper_branch(P, graphs, t, layers):
    """Two-step hypergraph embeddings for feature type t (whole vocabulary)."""
    others = [tau for tau in ("id", "pri", "lrg", "mid") if tau != t]
    h = P[f"emb_{t}"].copy()
    n, d = h.shape
    nbhd = {tau: [hyper_neighbourhood(graphs.hyper(t, tau), i) for i in range(n)] for tau in others}
    for _ in range(layers):
        new = np.zeros_like(h)
        for i in range(n):
            cands = [h[i]]
            logits = [P[f"W_{t}"] @ h[i]]
            for tau in others:
                nb = nbhd[tau][i]
                alpha = _softmax(np.array([P[f"u_{t}"] @ h[j] for j in nb]))
                m = sum(a * h[j] for a, j in zip(alpha, nb))
                cands.append(m)
                logits.append(P[f"W_{t}_{tau}"] @ m)
            logits = np.array(logits)
            for c in range(d):
                beta = _softmax(logits[:, c])
                new[i, c] = sum(beta[k] * cands[k][c] for k in range(len(cands)))
        h = new
    return h


def global_branch(P, graph, seq, layers, slope):
    """Session-conditioned global-graph embeddings for one session's sequence."""
    h = P[f"emb_{graph.feature_type}"].copy()
    n, d = h.shape
    for _ in range(layers):
        sbar = np.mean([h[v] for v in seq], axis=0)
        new = np.zeros_like(h)
        for i in range(n):
            nbrs = graph.adjacency.get(i, [])
            neigh = np.zeros(d)
            if nbrs:
                scores = []
                for j, w in nbrs:
                    z = P["W1"] @ np.concatenate([sbar * h[j], [float(w)]])
                    scores.append(P["q"] @ _leaky(z, slope))
                pi = _softmax(np.array(scores))
                neigh = sum(p * h[j] for p, (j, _) in zip(pi, nbrs))
            new[i] = np.maximum(P["W2"] @ np.concatenate([h[i], neigh]), 0.0)
        h = new
    return h


def week_code(m, c):
    out = np.zeros(c)
    for k in range(1, c // 2 + 1):
        out[2 * k - 2] = math.sin(2 * m * math.pi / (52 * k))
        out[2 * k - 1] = math.cos(2 * m * math.pi / (52 * k))
    return out


def position_code(i, d):
    out = np.zeros(d)
    for k in range(d // 2):
        out[2 * k] = math.sin(i / 10000 ** (2 * k / d))
        out[2 * k + 1] = math.cos(i / 10000 ** (2 * k / d))
    return out


def session_probs(P, graphs, session, n_known, layers, time_dim, slope, max_len=None):
    """Next-item distribution for one encoded session (its last item is the target)."""
    items = [int(x) for x in session.items[:-1]]
    prices = [int(x) for x in session.prices[:-1]]
    if max_len is not None:
        items, prices = items[-max_len:], prices[-max_len:]
    s = len(items)
    d = P["emb_id"].shape[1]
    fused = {}
    for t, seq in (("id", items), ("pri", prices)):
        hy = hyper_branch(P, graphs, t, layers)
        gl = global_branch(P, graphs.globals[t], seq, layers, slope)
        g = _sigmoid(hy @ P["W3"].T + gl @ P["W4"].T)
        fused[t] = g * hy + (1 - g) * gl
    h_items = [fused["id"][v] for v in items]
    side = np.concatenate([session.sale_flags, week_code(session.week, time_dim)])
    v = []
    for i in range(s):
        z = (P["W5"] @ np.concatenate([h_items[i], position_code(i + 1, d)]) + P["W6"] @ side
             + P["W7"] @ session.attr_flags + P["b1"])
        v.append(np.tanh(z))
    vbar = np.mean(v, axis=0)
    I_hat = np.zeros(d)
    for i in range(s):
        beta = P["u"] @ _sigmoid(P["W8"] @ v[i] + P["W9"] @ vbar + P["b2"])
        I_hat += beta * h_items[i]
    E = [fused["pri"][p] for p in prices]
    heads = []
    for k in range(P["WQ"].shape[0]):
        q = P["WQ"][k] @ E[-1]
        keys = [P["WK"][k] @ e for e in E]
        vals = [P["WV"][k] @ e for e in E]
        a = _softmax(np.array([q @ kk for kk in keys]) / math.sqrt(len(q)))
        heads.append(sum(w * vv for w, vv in zip(a, vals)))
    P_hat = np.concatenate(heads)
    both = np.concatenate([I_hat, P_hat])
    g_i, g_p = _sigmoid(P["Wa"] @ both), _sigmoid(P["Wb"] @ both)
    I = g_i * I_hat + (1 - g_i) * np.tanh(P["Wc"] @ P_hat)
    Pv = g_p * P_hat + (1 - g_p) * np.tanh(P["Wd"] @ I_hat)
    q = np.array([Pv @ fused["pri"][graphs.item_price[i]] + I @ fused["id"][i] for i in range(n_known)])
    return _softmax(q)
