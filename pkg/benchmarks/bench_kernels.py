#!/usr/bin/env python3
"""Benchmark the numba lowering kernels against the pure-numpy fallback.

The two paths are tested equal elsewhere; this script only times them, plus
one end-to-end capsule layer forward/backward under each backend. Run with
``CAPSROUTE_NO_NUMBA=1`` set by the script itself for the fallback half, so
a single invocation prints the comparison table:

    python benchmarks/bench_kernels.py
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def time_call(fn, repeats):
    fn()  # warmup / JIT compile
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats * 1000.0


def run_cases(repeats):
    from capsroute import kernels as K
    from capsroute import layers as L
    from capsroute import tensor as T

    rng = np.random.default_rng(0)
    results = {}

    x64 = rng.normal(size=(64, 64, 96)).astype(np.float32)
    results["im2col 64x64x96 k3"] = time_call(
        lambda: K.im2col(x64, 3, 3, 1, "same"), repeats)
    results["im2col 64x64x96 k3 s2"] = time_call(
        lambda: K.im2col(x64, 3, 3, 2, "same"), repeats)
    cols = K.im2col(x64, 3, 3, 1, "same")
    results["col2im 64x64x96 k3"] = time_call(
        lambda: K.col2im(cols, 3, 3, 1, 64, 64, "same"), repeats)

    poses = T.Tensor(rng.normal(0, 0.3, (32, 32, 4, 16)).astype(np.float32))
    grid = L.CapsuleGrid(poses)
    w = T.parameter(rng.normal(0, 0.1, (3, 3, 16, 4, 4, 16)).astype(np.float32))
    layer = L.CapsuleLayer(L.TransformKernel(w, 3, 3, 1, "conv"), 3)

    def layer_step():
        with T.tape() as tp:
            out = layer.forward(grid)
            T.backward(T.sum_(T.square(out.poses)), tp)
        w.grad = None

    results["conv capsule fwd+bwd 32x32 4x16d d3"] = time_call(
        layer_step, max(1, repeats // 4))
    return results


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=30)
    parser.add_argument("--emit-json", action="store_true",
                        help=argparse.SUPPRESS)  # worker mode
    args = parser.parse_args()

    if args.emit_json:
        print(json.dumps(run_cases(args.repeats)))
        return 0

    rows = {}
    for label, env_value in (("numba", ""), ("numpy", "1")):
        env = dict(os.environ, CAPSROUTE_NO_NUMBA=env_value)
        out = subprocess.run(
            [sys.executable, __file__, "--repeats", str(args.repeats),
             "--emit-json"],
            env=env, capture_output=True, text=True, check=True,
        )
        rows[label] = json.loads(out.stdout.strip().splitlines()[-1])

    width = max(len(k) for k in rows["numba"])
    print(f"{'case':<{width}}  {'numba ms':>10}  {'numpy ms':>10}  {'speedup':>8}")
    for case in rows["numba"]:
        nb = rows["numba"][case]
        np_ = rows["numpy"][case]
        print(f"{case:<{width}}  {nb:>10.2f}  {np_:>10.2f}  {np_ / nb:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
