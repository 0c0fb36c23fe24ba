"""Compare the compiled sliding-window kernels with the numpy fallback.

Times each kernel on shapes typical of a desk-scale search, then one full
forward/backward pass of a supernet under each backend.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import statistics
import time

import numpy as np

from pcdarts.search_space import SuperNet
from pcdarts.tensor import Tensor, backward, default_dtype_as, kernels


def _time(fn, repeat):
    fn()  # warm caches
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def kernel_cases(rng, B, C, H):
    k, stride, dil = 3, 1, 1
    xp = rng.normal(size=(B, C, H + 2, H + 2)).astype(np.float32)
    w = rng.normal(size=(C, k, k)).astype(np.float32)
    gout = rng.normal(size=(B, C, H, H)).astype(np.float32)
    gcols = rng.normal(size=(B, C, k, k, H, H)).astype(np.float32)

    def case(name):
        fn = getattr(kernels, name)
        if name == "dw_conv_forward":
            return lambda: fn(xp, w, stride, dil, H, H)
        if name == "dw_conv_backward":
            return lambda: fn(xp, w, gout, stride, dil)
        if name == "col2im":
            return lambda: fn(gcols, xp.shape, stride, dil)
        if name == "window_max_forward":
            return lambda: fn(xp, k, stride, H, H)
        if name == "window_max_backward":
            _, arg = kernels.window_max_forward(xp, k, stride, H, H)
            return lambda: fn(gout, arg, xp.shape, k, stride)
        if name == "window_sum_forward":
            return lambda: fn(xp, k, stride, H, H)
        return lambda: fn(gout, xp.shape, k, stride)

    return case


def network_step(seed=0):
    net = SuperNet(C0=8, num_classes=2, layers=8, nodes=6, K=4, seed=seed)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(64, 3, 8, 8)).astype(np.float32))
    y = rng.integers(0, 2, size=64)

    def step():
        loss, _ = net.loss(x, y)
        backward(loss)
        for p in net.parameters() + net.arch_parameters():
            p.grad = None

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    backends = kernels.available()
    previous = kernels.BACKEND
    results = {}
    try:
        for name in backends:
            kernels.use(name)
            case = kernel_cases(np.random.default_rng(0), args.batch, args.channels, args.size)
            row = {k: _time(case(k), args.repeat) for k in kernels._NAMES}
            with default_dtype_as("float32"):
                row["supernet_step"] = _time(network_step(), max(1, args.repeat // 2))
            results[name] = row
    finally:
        kernels.use(previous)

    names = list(kernels._NAMES) + ["supernet_step"]
    header = f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends)
    if "cython" in results:
        header += f"{'speedup':>10}"
    print(header)
    for k in names:
        line = f"{k:<22}" + "".join(f"{results[b][k] * 1e3:>10.2f}ms" for b in backends)
        if "cython" in results:
            line += f"{results['python'][k] / results['cython'][k]:>9.1f}x"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"shape": [args.batch, args.channels, args.size, args.size], "seconds": results}, fh, indent=2)


if __name__ == "__main__":
    main()
