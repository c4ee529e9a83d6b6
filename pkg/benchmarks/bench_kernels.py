#!/usr/bin/env python3
"""Benchmark the compiled conv/pool kernels against the numpy fallback.

Times the raw kernels at the package's working sizes plus one full training
step of the stock stitched network on each backend. Run from the repo root:

    python benchmarks/bench_kernels.py [--repeats 50]

Force the pure-python backend at import time elsewhere with
STITCHNET_PURE_PYTHON=1; here both implementations are imported directly.
"""

import argparse
import time

import numpy as np

from stitchnet._kernels import pykernels

try:
    from stitchnet._kernels import _native
except ImportError:
    _native = None


def timeit(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    cases = []
    for name, n, c, h, f, k in (
        ("conv 32x1x16x16 k3 f8", 32, 1, 16, 8, 3),
        ("conv 32x8x14x14 k3 f16", 32, 8, 14, 16, 3),
    ):
        x = rng.standard_normal((n, c, h, h)).astype(np.float32)
        w = rng.standard_normal((f, c, k, k)).astype(np.float32)
        b = np.zeros(f, dtype=np.float32)
        oh = h - k + 1
        dy = rng.standard_normal((n, f, oh, oh)).astype(np.float32)
        cases.append((f"{name} fwd", lambda impl, x=x, w=w, b=b: impl.conv2d_forward(x, w, b, 1)))
        cases.append((f"{name} bwd",
                      lambda impl, x=x, w=w, dy=dy: impl.conv2d_backward(x, w, dy, 1)))
    xp = rng.standard_normal((32, 8, 14, 14)).astype(np.float32)
    _, arg = pykernels.maxpool2d_forward(xp, 2, 2)
    dyp = rng.standard_normal((32, 8, 7, 7)).astype(np.float32)
    cases.append(("pool 32x8x14x14 fwd", lambda impl: impl.maxpool2d_forward(xp, 2, 2)))
    cases.append(("pool 32x8x14x14 bwd",
                  lambda impl: impl.maxpool2d_backward(arg, dyp, xp.shape)))

    print(f"{'kernel':<28s} {'python':>12s} {'native':>12s} {'speedup':>9s}")
    for name, call in cases:
        t_py = timeit(lambda: call(pykernels), repeats)
        if _native is None:
            print(f"{name:<28s} {t_py * 1e6:>10.1f}us {'n/a':>12s}")
            continue
        t_nat = timeit(lambda: call(_native), repeats)
        print(f"{name:<28s} {t_py * 1e6:>10.1f}us {t_nat * 1e6:>10.1f}us {t_py / t_nat:>8.1f}x")


def bench_training_step(repeats):
    import stitchnet._kernels as kernels
    from stitchnet.datagen import DatasetConfig, generate
    from stitchnet.network import init_networks, stitch
    from stitchnet.specs import default_network_spec
    from stitchnet.training import TaskBatch

    ds = generate(DatasetConfig(n=256), 0)
    x, la, lb, mb = ds.split_arrays("train")
    batch = TaskBatch(x[:32], la[:32], lb[:32], mb[:32])
    net_a, net_b = init_networks("common_init", spec=default_network_spec(8), seed=0)
    model = stitch(net_a, net_b, granularity="per_channel")

    results = {}
    for label, impl in (("python", pykernels), ("native", _native)):
        if impl is None:
            continue
        kernels.conv2d_forward = impl.conv2d_forward
        kernels.conv2d_backward = impl.conv2d_backward
        kernels.maxpool2d_forward = impl.maxpool2d_forward
        kernels.maxpool2d_backward = impl.maxpool2d_backward
        import stitchnet.layers as layers

        layers._kernels = kernels
        results[label] = timeit(lambda: model.loss_and_grads(batch), repeats)
    line = f"{'stitched fwd+bwd step':<28s} {results['python'] * 1e3:>10.2f}ms"
    if "native" in results:
        line += (f" {results['native'] * 1e3:>10.2f}ms"
                 f" {results['python'] / results['native']:>8.1f}x")
    print(line)


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()
    if _native is None:
        print("compiled kernels not available; timing the python fallback only")
    bench_kernels(args.repeats)
    bench_training_step(args.repeats)
