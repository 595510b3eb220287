#!/usr/bin/env python3
"""Benchmark the composite-convolution backends (numba vs pure numpy).

Times the three hot paths over realistic shapes: batched forward,
batched forward+backward through the full network, and single-sample
latency (the finite-difference harness pattern).

Usage:
    python3 benchmarks/bench_kernels.py [--batch 256] [--repeats 10]
"""

import argparse
import time

import numpy as np

from dcnet import backends
from dcnet.kernels import conv_apply, conv_weight_grads, get_meta, pack_input
from dcnet.network import NetworkConfig, backward_batch, forward_batch, init_params, param_layout


def time_call(fn, repeats):
    fn()  # warm up (JIT compile, allocator)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(batch, repeats):
    rng = np.random.default_rng(0)
    cfg = NetworkConfig()
    params = init_params(cfg, seed=0)
    x = rng.normal(size=(batch, 3, 3, 3, 28))
    x_small = rng.normal(size=(1, 3, 3, 3, 6))
    cfg_small = NetworkConfig(n_max=2)
    params_small = init_params(cfg_small, seed=0)
    targets = (np.arange(batch) % 2).astype(float)

    meta3 = get_meta(3, 3, 3, 6)
    w = params.view("layer1/0/w")
    b = params.view("layer1/0/b")
    flat = x.reshape(batch, -1, 28)

    rows = []
    for be in ("numpy", "numba"):
        backends.set_backend(be)

        def conv_only():
            pack = pack_input(flat, meta3)
            out = conv_apply(pack, w, b)
            conv_weight_grads(pack, out)

        def full_step():
            gamma, cache = forward_batch(params, x)
            backward_batch(params, cache, targets)

        def single():
            forward_batch(params_small, x_small)

        rows.append(
            (
                be,
                time_call(conv_only, repeats) * 1e3,
                time_call(full_step, repeats) * 1e3,
                time_call(single, max(repeats * 50, 200)) * 1e6,
            )
        )
    backends.set_backend(None)

    print(f"batch size {batch}, best of {repeats}")
    print(f"{'backend':<8} {'conv fwd+wgrad':>16} {'net fwd+bwd':>14} {'B=1 forward':>13}")
    for be, conv_ms, step_ms, single_us in rows:
        print(f"{be:<8} {conv_ms:>13.1f} ms {step_ms:>11.1f} ms {single_us:>10.0f} us")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=256)
    parser.add_argument("--repeats", type=int, default=10)
    args = parser.parse_args()
    bench(args.batch, args.repeats)
