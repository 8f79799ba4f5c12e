"""Benchmark the jitted convolution kernels against the pure-numpy fallback.

The kernel path is chosen by the DUALTOKEN_NUMBA environment flag at import
time, so the fallback numbers come from a child process started with
DUALTOKEN_NUMBA=0. Run:

    python3 benchmarks/bench_kernels.py
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

# representative shapes: (label, h, w, cin, k, cout, stride, groups)
SHAPES = [
    ("stage1 depthwise 5x5", 28, 28, 48, 5, 48, 1, 48),
    ("stage2 depthwise 7x7", 14, 14, 96, 7, 96, 1, 96),
    ("grouped 3x3 g=8", 14, 14, 64, 3, 64, 1, 8),
    ("grouped 3x3 g=16", 14, 14, 64, 3, 64, 1, 16),
    ("dense pointwise 1x1", 28, 28, 48, 1, 192, 1, 1),
    ("dense stem 3x3 s2", 112, 112, 24, 3, 24, 2, 1),
]


def time_case(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_worker(repeats):
    from dualtoken import kernels

    rng = np.random.default_rng(0)
    rows = []
    for label, h, w, cin, k, cout, stride, groups in SHAPES:
        xp = rng.standard_normal((h, w, cin)).astype(np.float32)
        wt = rng.standard_normal((k, k, cin // groups, cout)).astype(np.float32)
        ho = (h - k) // stride + 1
        wo = (w - k) // stride + 1
        dy = rng.standard_normal((ho, wo, cout)).astype(np.float32)
        kernels.conv_forward(xp, wt, stride, groups)      # warm up / jit
        kernels.conv_backward(xp, wt, dy, stride, groups)
        fwd = time_case(lambda: kernels.conv_forward(xp, wt, stride, groups),
                        repeats)
        bwd = time_case(
            lambda: kernels.conv_backward(xp, wt, dy, stride, groups), repeats)
        rows.append({"label": label, "fwd_ms": fwd * 1e3, "bwd_ms": bwd * 1e3})
    print(json.dumps({"path": "numba" if kernels.use_numba() else "numpy",
                      "rows": rows}))


def collect(env_flag, repeats):
    env = dict(os.environ, DUALTOKEN_NUMBA=env_flag)
    out = subprocess.run(
        [sys.executable, __file__, "--worker", "--repeats", str(repeats)],
        env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--worker", action="store_true",
                        help=argparse.SUPPRESS)
    args = parser.parse_args()
    if args.worker:
        run_worker(args.repeats)
        return
    jit = collect("1", args.repeats)
    ref = collect("0", args.repeats)
    print(f"{'case':<24} {'numba fwd':>10} {'numpy fwd':>10} {'speedup':>8}   "
          f"{'numba bwd':>10} {'numpy bwd':>10} {'speedup':>8}")
    for a, b in zip(jit["rows"], ref["rows"]):
        print(f"{a['label']:<24} {a['fwd_ms']:>8.2f}ms {b['fwd_ms']:>8.2f}ms "
              f"{b['fwd_ms'] / a['fwd_ms']:>7.1f}x   "
              f"{a['bwd_ms']:>8.2f}ms {b['bwd_ms']:>8.2f}ms "
              f"{b['bwd_ms'] / a['bwd_ms']:>7.1f}x")
    print(f"(paths: {jit['path']} vs {ref['path']}, best of "
          f"{args.repeats} runs)")


if __name__ == "__main__":
    main()
