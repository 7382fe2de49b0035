"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with identical results. Set
``COHHGN_DISABLE_NUMBA=1`` to force the numpy path (useful for debugging
and for the benchmark in ``benchmarks/bench_kernels.py``).
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("COHHGN_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via the env flag
    HAVE_NUMBA = False


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference paths
# ---------------------------------------------------------------------------


def _window_counts_np(values, offsets, gate, epsilon, n):
    counts = np.zeros((n, n), dtype=np.int64)
    values = np.asarray(values, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    if values.size == 0:
        return counts
    lengths = np.diff(offsets)
    session_of = np.repeat(np.arange(lengths.size), lengths)
    for delta in range(1, epsilon + 1):
        left = np.arange(values.size - delta)
        right = left + delta
        same = session_of[left] == session_of[right]
        a = values[left[same]]
        b = values[right[same]]
        keep = a != b
        a, b = a[keep], b[keep]
        # centre at a, neighbour b; and centre at b, neighbour a
        fwd = gate[a]
        np.add.at(counts, (a[fwd], b[fwd]), 1)
        bwd = gate[b]
        np.add.at(counts, (b[bwd], a[bwd]), 1)
    return counts


def _scatter_add_rows_np(n_rows, idx, src):
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    np.add.at(out, idx, src)
    return out


def _label_ranks_np(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_rows, n_items = scores.shape
    ranks = np.full(n_rows, n_items + 1, dtype=np.int64)
    known = (labels >= 0) & (labels < n_items)
    if not known.any():
        return ranks
    sub = scores[known]
    lab = labels[known]
    target = sub[np.arange(lab.size), lab][:, None]
    cols = np.arange(n_items)[None, :]
    better = (sub > target) | ((sub == target) & (cols < lab[:, None]))
    ranks[known] = 1 + better.sum(axis=1)
    return ranks


def _edge_scores_np(proj, nbr, w, wcol, q, slope):
    pre = proj[:, nbr, :] + w[None, :, :, None] * wcol  # (B, n, N, D)
    act = np.where(pre > 0, pre, slope * pre)
    return np.ascontiguousarray(np.transpose(act @ q, (1, 2, 0)))


def _edge_scores_grad_np(grad, proj, nbr, w, wcol, q, slope):
    pre = proj[:, nbr, :] + w[None, :, :, None] * wcol
    pos = pre > 0
    act = np.where(pos, pre, slope * pre)
    g = np.transpose(grad, (2, 0, 1))[..., None]  # (B, n, N, 1)
    dq = (g * act).sum(axis=(0, 1, 2))
    dpre = g * q * np.where(pos, 1.0, slope)
    dwcol = (dpre * w[None, :, :, None]).sum(axis=(0, 1, 2))
    B, _, D = proj.shape
    dproj = np.zeros_like(proj)
    for k in range(nbr.shape[1]):
        np.add.at(dproj, (slice(None), nbr[:, k]), dpre[:, :, k, :])
    return dproj, dwcol, dq


def _neighbour_sum_np(pi, h, nbr):
    # pi (n, N, B), h (B, n, d) -> (B, n, d)
    gathered = h[:, nbr, :]  # (B, n, N, d)
    return np.einsum("knb,bknd->bkd", pi, gathered)


def _neighbour_sum_grad_np(grad, pi, h, nbr):
    gathered = h[:, nbr, :]
    dpi = np.einsum("bkd,bknd->knb", grad, gathered)
    contrib = np.einsum("knb,bkd->bknd", pi, grad)
    dh = np.zeros_like(h)
    for k in range(nbr.shape[1]):
        np.add.at(dh, (slice(None), nbr[:, k]), contrib[:, :, k, :])
    return dpi, dh


# ---------------------------------------------------------------------------
# numba paths
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _window_counts_nb(values, offsets, gate, epsilon, n):
        counts = np.zeros((n, n), dtype=np.int64)
        for s in range(offsets.size - 1):
            lo = offsets[s]
            hi = offsets[s + 1]
            for p in range(lo, hi):
                v = values[p]
                if not gate[v]:
                    continue
                start = max(lo, p - epsilon)
                stop = min(hi, p + epsilon + 1)
                for q in range(start, stop):
                    u = values[q]
                    if q != p and u != v:
                        counts[v, u] += 1
        return counts

    @njit(cache=True)
    def _scatter_add_rows_nb(n_rows, idx, src):
        out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
        for r in range(idx.size):
            row = idx[r]
            for c in range(src.shape[1]):
                out[row, c] += src[r, c]
        return out

    @njit(cache=True)
    def _label_ranks_nb(scores, labels):
        n_rows, n_items = scores.shape
        ranks = np.empty(n_rows, dtype=np.int64)
        for r in range(n_rows):
            lab = labels[r]
            if lab < 0 or lab >= n_items:
                ranks[r] = n_items + 1
                continue
            target = scores[r, lab]
            rank = 1
            for j in range(n_items):
                s = scores[r, j]
                if s > target or (s == target and j < lab):
                    rank += 1
            ranks[r] = rank
        return ranks


    @njit(cache=True)
    def _edge_scores_nb(proj, nbr, w, wcol, q, slope):
        B, _, D = proj.shape
        n, N = nbr.shape
        out = np.zeros((n, N, B))
        for i in range(n):
            for k in range(N):
                j = nbr[i, k]
                wik = w[i, k]
                for b in range(B):
                    acc = 0.0
                    for c in range(D):
                        x = proj[b, j, c] + wik * wcol[c]
                        if x <= 0:
                            x *= slope
                        acc += q[c] * x
                    out[i, k, b] = acc
        return out

    @njit(cache=True)
    def _edge_scores_grad_nb(grad, proj, nbr, w, wcol, q, slope):
        B, _, D = proj.shape
        n, N = nbr.shape
        dproj = np.zeros_like(proj)
        dwcol = np.zeros(D)
        dq = np.zeros(D)
        for i in range(n):
            for k in range(N):
                j = nbr[i, k]
                wik = w[i, k]
                for b in range(B):
                    g = grad[i, k, b]
                    if g == 0.0:
                        continue
                    for c in range(D):
                        x = proj[b, j, c] + wik * wcol[c]
                        if x > 0:
                            dq[c] += g * x
                            d = g * q[c]
                        else:
                            dq[c] += g * slope * x
                            d = g * q[c] * slope
                        dproj[b, j, c] += d
                        dwcol[c] += d * wik
        return dproj, dwcol, dq

    @njit(cache=True)
    def _neighbour_sum_nb(pi, h, nbr):
        B, _, d = h.shape
        n, N = nbr.shape
        out = np.zeros((B, n, d))
        for i in range(n):
            for k in range(N):
                j = nbr[i, k]
                for b in range(B):
                    p = pi[i, k, b]
                    if p == 0.0:
                        continue
                    for c in range(d):
                        out[b, i, c] += p * h[b, j, c]
        return out

    @njit(cache=True)
    def _neighbour_sum_grad_nb(grad, pi, h, nbr):
        B, _, d = h.shape
        n, N = nbr.shape
        dpi = np.zeros((n, N, B))
        dh = np.zeros_like(h)
        for i in range(n):
            for k in range(N):
                j = nbr[i, k]
                for b in range(B):
                    p = pi[i, k, b]
                    acc = 0.0
                    for c in range(d):
                        g = grad[b, i, c]
                        acc += g * h[b, j, c]
                        dh[b, j, c] += p * g
                    dpi[i, k, b] = acc
        return dpi, dh


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def window_counts(values, offsets, gate, epsilon: int, n: int, use_numba: bool | None = None) -> np.ndarray:
    """Directed windowed co-occurrence counts over a ragged sequence array.

    ``values`` holds every session back to back and ``offsets`` marks the
    session starts (CSR style, length n_sessions + 1). ``counts[v, u]``
    counts positions p holding v and q holding u, inside the same session,
    with ``0 < |p - q| <= epsilon`` and ``u != v``. Centres whose ``gate``
    entry is False contribute nothing.
    """
    values = np.ascontiguousarray(values, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    gate = np.ascontiguousarray(gate, dtype=np.bool_)
    if _pick(use_numba):
        return _window_counts_nb(values, offsets, gate, int(epsilon), int(n))
    return _window_counts_np(values, offsets, gate, int(epsilon), int(n))


def scatter_add_rows(n_rows: int, idx, src, use_numba: bool | None = None) -> np.ndarray:
    """``out[idx[r]] += src[r]`` for every r, starting from zeros."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    src = np.ascontiguousarray(src, dtype=np.float64)
    if _pick(use_numba):
        return _scatter_add_rows_nb(int(n_rows), idx, src)
    return _scatter_add_rows_np(int(n_rows), idx, src)


def label_ranks(scores, labels, use_numba: bool | None = None) -> np.ndarray:
    """1-based rank of each row's label; ties go to the lower item index.

    Labels outside ``[0, n_items)`` get rank ``n_items + 1``.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if _pick(use_numba):
        return _label_ranks_nb(scores, labels)
    return _label_ranks_np(scores, labels)


def edge_scores(proj, nbr, w, wcol, q, slope: float, use_numba: bool | None = None) -> np.ndarray:
    """Global-graph attention logits.

    ``out[i, k, b] = q . leaky(proj[b, nbr[i, k]] + w[i, k] * wcol)`` with
    ``proj`` (B, n, D), ``nbr``/``w`` (n, N); result (n, N, B).
    """
    args = _edge_args(proj, nbr, w, wcol, q)
    if _pick(use_numba):
        return _edge_scores_nb(*args, float(slope))
    return _edge_scores_np(*args, float(slope))


def edge_scores_grad(grad, proj, nbr, w, wcol, q, slope: float, use_numba: bool | None = None):
    """Vector-Jacobian product of :func:`edge_scores` for (proj, wcol, q)."""
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    args = _edge_args(proj, nbr, w, wcol, q)
    if _pick(use_numba):
        return _edge_scores_grad_nb(grad, *args, float(slope))
    return _edge_scores_grad_np(grad, *args, float(slope))


def neighbour_sum(pi, h, nbr, use_numba: bool | None = None) -> np.ndarray:
    """``out[b, i] = sum_k pi[i, k, b] * h[b, nbr[i, k]]``; pi (n, N, B), h (B, n, d)."""
    pi = np.ascontiguousarray(pi, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    nbr = np.ascontiguousarray(nbr, dtype=np.int64)
    if _pick(use_numba):
        return _neighbour_sum_nb(pi, h, nbr)
    return _neighbour_sum_np(pi, h, nbr)


def neighbour_sum_grad(grad, pi, h, nbr, use_numba: bool | None = None):
    """Vector-Jacobian product of :func:`neighbour_sum` for (pi, h)."""
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    pi = np.ascontiguousarray(pi, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    nbr = np.ascontiguousarray(nbr, dtype=np.int64)
    if _pick(use_numba):
        return _neighbour_sum_grad_nb(grad, pi, h, nbr)
    return _neighbour_sum_grad_np(grad, pi, h, nbr)


def _edge_args(proj, nbr, w, wcol, q):
    return (np.ascontiguousarray(proj, dtype=np.float64), np.ascontiguousarray(nbr, dtype=np.int64),
            np.ascontiguousarray(w, dtype=np.float64), np.ascontiguousarray(wcol, dtype=np.float64),
            np.ascontiguousarray(q, dtype=np.float64))


def _pick(use_numba):
    if use_numba is None:
        return HAVE_NUMBA
    if use_numba and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but unavailable or disabled")
    return bool(use_numba)
