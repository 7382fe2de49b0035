"""Time each hot kernel with the numba and the numpy backend.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Sizes follow the default training setup (d=128, batch 100, top-12
neighbours, 50 items plus the unknown slot). The last section times one
training step end to end under each backend in a subprocess, since the
backend is fixed at import time by ``COHHGN_DISABLE_NUMBA``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from cohhgn import kernels

STEP = """
import time
import numpy as np
from cohhgn import autodiff as ad
from cohhgn.data import prepare
from cohhgn.graphs import build_graphs
from cohhgn.model import CoHHGN, ModelConfig, make_batch
from cohhgn.synthgen import SynthConfig, generate
c = prepare(generate(SynthConfig(n_sessions=1500, seed=0)))
g = build_graphs(c.train, c.vocab)
m = CoHHGN.from_graphs(ModelConfig(), g, c.vocab.n_items, c.vocab.d_sale, c.vocab.d_type)
b = make_batch(c.train[:100])
times = []
for _ in range(4):
    t = time.perf_counter()
    with ad.Tape() as tape:
        tape.backward(m.loss(b, training=False))
    times.append(time.perf_counter() - t)
print(min(times[1:]))
"""


def cases(rng):
    B, n, N, d = 100, 51, 12, 129
    lengths = rng.integers(2, 6, size=4000)
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    values = rng.integers(0, n, size=offsets[-1])
    proj = rng.normal(size=(B, n, d))
    nbr = rng.integers(0, n, size=(n, N))
    w = rng.integers(1, 20, size=(n, N)).astype(float)
    wcol, q = rng.normal(size=d), rng.normal(size=d)
    pi = rng.random(size=(n, N, B))
    h = rng.normal(size=(B, n, d - 1))
    g_edge = rng.normal(size=(n, N, B))
    g_sum = rng.normal(size=(B, n, d - 1))
    scores = rng.normal(size=(1000, n))
    labels = rng.integers(0, n, size=1000)
    gate = np.ones(n, dtype=bool)
    return {
        "window_counts": lambda f: kernels.window_counts(values, offsets, gate, 12, n, use_numba=f),
        "label_ranks": lambda f: kernels.label_ranks(scores, labels, use_numba=f),
        "edge_scores": lambda f: kernels.edge_scores(proj, nbr, w, wcol, q, 0.01, use_numba=f),
        "edge_scores_grad": lambda f: kernels.edge_scores_grad(g_edge, proj, nbr, w, wcol, q, 0.01, use_numba=f),
        "neighbour_sum": lambda f: kernels.neighbour_sum(pi, h, nbr, use_numba=f),
        "neighbour_sum_grad": lambda f: kernels.neighbour_sum_grad(g_sum, pi, h, nbr, use_numba=f),
    }


def best_of(fn, repeat):
    fn()  # warm-up (and JIT compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-step", action="store_true", help="only time the kernels")
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        sys.exit("numba is not available (or COHHGN_DISABLE_NUMBA is set); nothing to compare")

    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speed-up':>9}")
    for name, fn in cases(np.random.default_rng(0)).items():
        a = best_of(lambda: fn(False), args.repeat) * 1e3
        b = best_of(lambda: fn(True), args.repeat) * 1e3
        print(f"{name:<20} {a:10.2f} {b:10.2f} {a / b:8.1f}x")

    if args.skip_step:
        return
    step = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = {**os.environ, "COHHGN_DISABLE_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", STEP], env=env, capture_output=True, text=True, check=True)
        step[label] = float(out.stdout.strip())
    print(f"\ntraining step (batch 100, d=128): numpy {step['numpy'] * 1e3:.0f} ms, "
          f"numba {step['numba'] * 1e3:.0f} ms ({step['numpy'] / step['numba']:.1f}x)")


if __name__ == "__main__":
    main()
