"""Time the compiled and numpy kernel backends on mini-VGG-sized tensors.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""
import argparse
import json
import timeit

import numpy as np

from wsprune import kernels
from wsprune.archzoo import ArchSpec, build_network
from wsprune.nncore import OptimizerState, TrainingConfig, backward, forward, one_hot, optimizer_step


def cases(rng):
    x = rng.standard_normal((32, 16, 22, 18)).astype(np.float32)  # padded 20x16 map
    cols = kernels.im2col(x, 3, 3, 1)
    w = rng.standard_normal((16, 3, 3)).astype(np.float32)
    dout = rng.standard_normal((32, 16, 20, 16)).astype(np.float32)
    pool_in = rng.standard_normal((32, 16, 40, 16)).astype(np.float32)
    _, arg = kernels.maxpool_forward(pool_in, 2)
    pool_grad = rng.standard_normal((32, 16, 20, 8)).astype(np.float32)
    g = np.full(16, 0.5, np.float32)
    b = np.zeros(16, np.float32)
    _, xhat, _, _, inv = kernels.bn_forward_train(dout, g, b, 1e-5)
    return {
        "im2col": lambda: kernels.im2col(x, 3, 3, 1),
        "col2im": lambda: kernels.col2im(cols, 32, 16, 22, 18, 3, 3, 1),
        "dw_forward": lambda: kernels.dw_forward(x, w, 1),
        "dw_backward": lambda: kernels.dw_backward(x, w, dout, 1),
        "maxpool_forward": lambda: kernels.maxpool_forward(pool_in, 2),
        "maxpool_backward": lambda: kernels.maxpool_backward(pool_grad, arg, pool_in.shape, 2),
        "bn_forward": lambda: kernels.bn_forward_train(dout, g, b, 1e-5),
        "bn_backward": lambda: kernels.bn_backward_train(dout, xhat, g, inv),
    }


def train_step_case(rng):
    net = build_network(ArchSpec("vgg", 7, input_shape=(1, 40, 16)), seed=0)
    x = rng.standard_normal((32, 1, 40, 16)).astype(np.float32)
    y = one_hot(rng.integers(0, 10, 32), 10)
    params, state, cfg = net.parameters(), OptimizerState(), TrainingConfig()

    def step():
        forward(net, x, "train", cache=True)
        optimizer_step(params, backward(net, y, 1e-3), state, cfg)

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    import warnings
    warnings.simplefilter("ignore")
    results = {}
    for backend in kernels.available_backends():
        prev = kernels.use_backend(backend)
        try:
            rng = np.random.default_rng(0)
            timings = {name: min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
                       for name, fn in cases(rng).items()}
            step = train_step_case(rng)
            step()
            timings["vgg7_train_step"] = min(timeit.repeat(step, number=1, repeat=max(3, args.repeat // 4))) * 1e3
            results[backend] = timings
        finally:
            kernels.use_backend(prev)
    names = list(next(iter(results.values())))
    backends = sorted(results)
    print(f"{'kernel (ms, best of N)':<24}" + "".join(f"{b:>10}" for b in backends)
          + ("   speedup" if len(backends) == 2 else ""))
    for name in names:
        row = f"{name:<24}" + "".join(f"{results[b][name]:>10.2f}" for b in backends)
        if len(backends) == 2:
            row += f"{results['numpy'][name] / results['cython'][name]:>9.2f}x"
        print(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
