#!/usr/bin/env python3
"""Benchmark the compiled conv kernels against the numpy fallback.

Times the individual conv shapes used by the default network plus a full
16-rotation forward pass, and checks the two backends agree numerically.

Run: python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from pushgrasp import kernels, percept, qfunc
from pushgrasp.config import ArchConfig

CONV_SHAPES = [
    ("encoder-1 (s2)", (16, 4, 64, 64), (16, 4, 3, 3), 2, 1),
    ("encoder-2 (s2)", (16, 16, 32, 32), (32, 16, 3, 3), 2, 1),
    ("encoder-3 (s2)", (16, 32, 16, 16), (64, 32, 3, 3), 2, 1),
    ("decoder-1", (16, 96, 16, 16), (16, 96, 3, 3), 1, 1),
    ("decoder-2", (16, 32, 32, 32), (16, 32, 3, 3), 1, 1),
    ("decoder-3", (16, 20, 64, 64), (8, 20, 3, 3), 1, 1),
    ("head-1x1", (16, 8, 64, 64), (1, 8, 1, 1), 1, 0),
]


def timeit(fn, repeats):
    fn()                        # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def available_backends():
    out = {"numpy": kernels.get_backend("numpy")}
    try:
        out["compiled"] = kernels.get_backend("compiled")
    except ImportError:
        pass
    return out


def bench_convs(backends, repeats):
    rng = np.random.default_rng(0)
    print(f"{'conv':<16}" + "".join(f"{n + ' fwd':>16}{n + ' bwd':>16}"
                                    for n in backends))
    for name, xs, ws, stride, pad in CONV_SHAPES:
        x = rng.standard_normal(xs).astype(np.float32)
        w = (rng.standard_normal(ws) * 0.1).astype(np.float32)
        b = np.zeros(ws[0], dtype=np.float32)
        row = f"{name:<16}"
        ref_y = None
        for bname, mod in backends.items():
            y = mod.conv2d_forward(x, w, b, stride, pad)
            if ref_y is None:
                ref_y = y
                dout = rng.standard_normal(y.shape).astype(np.float32)
            else:
                assert np.allclose(y, ref_y, rtol=2e-4, atol=1e-5), name
            fwd = timeit(lambda m=mod: m.conv2d_forward(x, w, b, stride, pad),
                         repeats)
            bwd = timeit(lambda m=mod: m.conv2d_backward(x, w, dout, stride, pad),
                         repeats)
            macs = xs[0] * ws[0] * ws[1] * ws[2] * ws[3] * y.shape[2] * y.shape[3]
            row += f"{fwd * 1e3:>9.2f} ms{2 * macs / fwd / 1e9:>5.1f}G"
            row += f"{bwd * 1e3:>9.2f} ms     "
        print(row)


def bench_full_net(repeats):
    agent = __import__("pushgrasp.agent", fromlist=["forward_all_rotations"])
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 64, 64)).astype(np.float32)
    params = qfunc.init_params(0, ArchConfig(), dtype=np.float32)
    import os
    print("\nfull 16-rotation forward (64x64, default arch, "
          f"{qfunc.count_params(ArchConfig())} params)")
    print(f"  active backend: {kernels.backend_name()}")
    batched = timeit(lambda: agent.forward_all_rotations(params, x), max(3, repeats // 4))
    seq = timeit(lambda: agent.forward_all_rotations(params, x, sequential=True),
                 max(3, repeats // 4))
    q1 = agent.forward_all_rotations(params, x)
    q2 = agent.forward_all_rotations(params, x, sequential=True)
    exact = np.array_equal(q1.grasp, q2.grasp) and np.array_equal(q1.push, q2.push)
    print(f"  batched:    {batched * 1e3:7.1f} ms")
    print(f"  sequential: {seq * 1e3:7.1f} ms   (bit-identical: {exact})")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    backends = available_backends()
    if len(backends) == 1:
        print("note: compiled backend unavailable, timing numpy only")
    bench_convs(backends, args.repeats)
    bench_full_net(args.repeats)


if __name__ == "__main__":
    main()
