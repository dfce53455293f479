"""Timing comparison: compiled kernels vs the pure-numpy fallback.

Runs each spatial kernel on shapes matching a real stylization session
(encoder blocks at the working size) and prints best-of-N wall times for
both backends plus the speedup.  Usage:

    python3 benchmarks/bench_kernels.py [--size 128] [--repeats 5]
"""

import argparse
import time

import numpy as np

from dtp._kernels import fallback

try:
    from dtp._kernels import _core as core
except ImportError:
    core = None


def best_of(repeats, fn, *args):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(size):
    s2, s4 = size // 2, size // 4
    rng = np.random.default_rng(0)

    def act(c, hw):
        return rng.standard_normal((1, c, hw, hw)).astype(np.float32)

    x1 = act(64, size)      # conv1-block activations
    x3 = act(256, s4)       # conv3-block activations
    col3 = fallback.im2col(x3, 3, 1, 1)
    gy_pool = act(64, s2)
    _, idx = fallback.maxpool2x2_forward(x1)
    up_in = act(128, s4)
    gy_up = act(128, s2)
    return [
        ("im2col 64ch", "im2col", (x1, 3, 1, 1)),
        ("im2col 256ch", "im2col", (x3, 3, 1, 1)),
        ("col2im 256ch", "col2im", (col3, x3.shape, 3, 1, 1)),
        ("maxpool fwd", "maxpool2x2_forward", (x1,)),
        ("maxpool bwd", "maxpool2x2_backward", (gy_pool, idx)),
        ("upsample fwd", "upsample2x_forward", (up_in,)),
        ("upsample bwd", "upsample2x_backward", (gy_up,)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128, help="working size (default 128)")
    ap.add_argument("--repeats", type=int, default=5, help="best-of repeats")
    args = ap.parse_args()

    if core is None:
        print("compiled backend not built; timing fallback only")
    rows = []
    for label, name, fn_args in cases(args.size):
        t_py = best_of(args.repeats, getattr(fallback, name), *fn_args)
        if core is not None:
            t_c = best_of(args.repeats, getattr(core, name), *fn_args)
            rows.append((label, t_py, t_c, t_py / t_c))
        else:
            rows.append((label, t_py, None, None))

    print(f"\nkernel timings at size {args.size} (best of {args.repeats})")
    print(f"{'kernel':<14} {'python':>10} {'compiled':>10} {'speedup':>8}")
    for label, t_py, t_c, sp in rows:
        if t_c is None:
            print(f"{label:<14} {t_py*1e3:>8.2f}ms {'-':>10} {'-':>8}")
        else:
            print(f"{label:<14} {t_py*1e3:>8.2f}ms {t_c*1e3:>8.2f}ms {sp:>7.2f}x")


if __name__ == "__main__":
    main()
