"""Compare the two compute backends on the hot kernels and a full
forward+backward pass.

Run:  python bench/bench_kernels.py

The backend is chosen at import time by FEDROBUST_BACKEND, so this script
re-executes itself once per backend and prints a side-by-side table.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import time

import numpy as np


def timeit(fn, repeats=10, warmup=2):
    for _ in range(warmup):
        fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_suite() -> dict[str, float]:
    from fedrobust import BACKEND
    from fedrobust import autodiff as ad
    from fedrobust import model as M
    from fedrobust.kernels import (conv2d_fwd, conv2d_bwd_input,
                                   conv2d_bwd_weight, avgpool_fwd)

    rng = np.random.default_rng(0)
    results: dict[str, float] = {"backend": BACKEND}

    x = rng.normal(size=(32, 8, 8, 128))
    w = rng.normal(size=(16, 8, 1, 15))
    y = conv2d_fwd(x, w, 1)
    results["conv2d_fwd"] = timeit(lambda: conv2d_fwd(x, w, 1))
    results["conv2d_bwd_input"] = timeit(
        lambda: conv2d_bwd_input(y, w, 1, x.shape[2], x.shape[3]))
    results["conv2d_bwd_weight"] = timeit(
        lambda: conv2d_bwd_weight(x, y, 1, w.shape[2], w.shape[3]))
    results["avgpool_fwd"] = timeit(lambda: avgpool_fwd(x, 1, 4))

    cfg = M.ModelConfig(channels=8, samples=128, classes=2)
    ps = M.build(cfg, seed=0)
    xb = rng.normal(size=(32, 1, 8, 128))
    yb = rng.integers(0, 2, size=32)

    def fwd_bwd():
        logits = M.forward(ps, xb, "eval", batch_stats=True)
        loss = ad.softmax_cross_entropy(logits, yb)
        loss.backward()

    results["model_fwd_bwd_b32"] = timeit(fwd_bwd, repeats=5)
    return results


def main() -> int:
    if os.environ.get("_BENCH_CHILD"):
        print(json.dumps(run_suite()))
        return 0
    rows = []
    for backend in ("numba", "numpy"):
        env = dict(os.environ, FEDROBUST_BACKEND=backend, _BENCH_CHILD="1")
        out = subprocess.run([sys.executable, os.path.abspath(__file__)],
                             env=env, capture_output=True, text=True,
                             check=True)
        rows.append(json.loads(out.stdout.strip().splitlines()[-1]))
    keys = [k for k in rows[0] if k != "backend"]
    width = max(len(k) for k in keys) + 2
    print(f"{'kernel':<{width}}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for k in keys:
        a, b = rows[0][k], rows[1][k]
        print(f"{k:<{width}}{a * 1e3:>10.2f}ms{b * 1e3:>10.2f}ms"
              f"{b / a:>9.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
