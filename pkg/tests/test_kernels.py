"""The compiled kernels and their numpy twins must agree exactly (integer
kernels) or to rounding (float kernels)."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohhgn import kernels

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba backend disabled")
seeds = st.integers(0, 2**31 - 1)


def ragged(rng, n_sessions, n_values, max_len=6):
    lengths = rng.integers(1, max_len + 1, size=n_sessions)
    values = rng.integers(0, n_values, size=lengths.sum())
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    return values, offsets


def test_window_counts_small_example():
    # one session [0, 1, 0, 2]: centre 0 at p=0 sees 1 (eps=1); at p=2 sees 1 and 2
    values, offsets = np.array([0, 1, 0, 2]), np.array([0, 4])
    gate = np.ones(3, dtype=bool)
    for flag in ([False, True] if kernels.HAVE_NUMBA else [False]):
        c = kernels.window_counts(values, offsets, gate, 1, 3, use_numba=flag)
        assert c[0, 1] == 2 and c[0, 2] == 1 and c[1, 0] == 2 and c[2, 0] == 1
        assert np.trace(c) == 0


def test_label_ranks_ties_and_unknown_labels():
    scores = np.array([[0.5, 0.9, 0.5, 0.1], [1.0, 1.0, 1.0, 1.0]])
    np.testing.assert_array_equal(kernels.label_ranks(scores, [2, 3], use_numba=False), [3, 4])
    np.testing.assert_array_equal(kernels.label_ranks(scores, [0, 9], use_numba=False), [2, 5])


@needs_numba
@settings(max_examples=25, deadline=None)
@given(seeds, st.integers(1, 4))
def test_window_counts_backends_agree(seed, eps):
    rng = np.random.default_rng(seed)
    values, offsets = ragged(rng, 15, 7)
    gate = rng.random(7) < 0.7
    a = kernels.window_counts(values, offsets, gate, eps, 7, use_numba=False)
    b = kernels.window_counts(values, offsets, gate, eps, 7, use_numba=True)
    np.testing.assert_array_equal(a, b)


@needs_numba
@settings(max_examples=25, deadline=None)
@given(seeds)
def test_scatter_and_ranks_backends_agree(seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 5, size=12)
    src = rng.normal(size=(12, 3))
    np.testing.assert_allclose(kernels.scatter_add_rows(5, idx, src, use_numba=False),
                               kernels.scatter_add_rows(5, idx, src, use_numba=True), atol=1e-14)
    scores = np.round(rng.normal(size=(6, 9)), 1)  # rounding forces ties
    labels = rng.integers(0, 10, size=6)
    np.testing.assert_array_equal(kernels.label_ranks(scores, labels, use_numba=False),
                                  kernels.label_ranks(scores, labels, use_numba=True))


def _edge_case(rng, B=3, n=6, N=4, D=5):
    proj = rng.normal(size=(B, n, D))
    nbr = rng.integers(0, n, size=(n, N))
    w = rng.integers(1, 4, size=(n, N)).astype(float)
    wcol, q = rng.normal(size=D), rng.normal(size=D)
    return proj, nbr, w, wcol, q


@needs_numba
@settings(max_examples=20, deadline=None)
@given(seeds)
def test_edge_kernels_backends_agree(seed):
    rng = np.random.default_rng(seed)
    proj, nbr, w, wcol, q = _edge_case(rng)
    a = kernels.edge_scores(proj, nbr, w, wcol, q, 0.01, use_numba=False)
    b = kernels.edge_scores(proj, nbr, w, wcol, q, 0.01, use_numba=True)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    g = rng.normal(size=a.shape)
    for x, y in zip(kernels.edge_scores_grad(g, proj, nbr, w, wcol, q, 0.01, use_numba=False),
                    kernels.edge_scores_grad(g, proj, nbr, w, wcol, q, 0.01, use_numba=True)):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)


@needs_numba
@settings(max_examples=20, deadline=None)
@given(seeds)
def test_neighbour_kernels_backends_agree(seed):
    rng = np.random.default_rng(seed)
    B, n, N, d = 3, 6, 4, 5
    pi = rng.random(size=(n, N, B))
    h = rng.normal(size=(B, n, d))
    nbr = rng.integers(0, n, size=(n, N))
    a = kernels.neighbour_sum(pi, h, nbr, use_numba=False)
    np.testing.assert_allclose(a, kernels.neighbour_sum(pi, h, nbr, use_numba=True), atol=1e-12)
    g = rng.normal(size=a.shape)
    for x, y in zip(kernels.neighbour_sum_grad(g, pi, h, nbr, use_numba=False),
                    kernels.neighbour_sum_grad(g, pi, h, nbr, use_numba=True)):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_edge_scores_match_direct_loop():
    rng = np.random.default_rng(5)
    proj, nbr, w, wcol, q = _edge_case(rng)
    out = kernels.edge_scores(proj, nbr, w, wcol, q, 0.01)
    for i in range(nbr.shape[0]):
        for k in range(nbr.shape[1]):
            for b in range(proj.shape[0]):
                z = proj[b, nbr[i, k]] + w[i, k] * wcol
                assert out[i, k, b] == pytest.approx(q @ np.where(z > 0, z, 0.01 * z), abs=1e-12)


def test_kernel_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    proj, nbr, w, wcol, q = _edge_case(rng, B=2, n=4, N=3, D=3)
    g = rng.normal(size=(4, 3, 2))
    dproj, dwcol, dq = kernels.edge_scores_grad(g, proj, nbr, w, wcol, q, 0.01)

    def f(p=proj, c=wcol, qq=q):
        return float(np.sum(g * kernels.edge_scores(p, nbr, w, c, qq, 0.01)))

    for arr, grad, key in ((proj, dproj, "p"), (wcol, dwcol, "c"), (q, dq, "qq")):
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            x = arr.copy()
            x[i] += 1e-6
            up = f(**{key: x})
            x[i] -= 2e-6
            num[i] = (up - f(**{key: x})) / 2e-6
        np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-8)


def test_env_flag_selects_numpy_backend():
    env = {**os.environ, "COHHGN_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", "from cohhgn import kernels; print(kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_requesting_missing_backend_fails(monkeypatch):
    monkeypatch.setattr(kernels, "HAVE_NUMBA", False)
    with pytest.raises(RuntimeError):
        kernels.label_ranks(np.zeros((1, 2)), [0], use_numba=True)
