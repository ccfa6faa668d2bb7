"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py --n 20000 --repeat 5

Both backends are called directly, so ENCORE_BENCH_JIT does not matter here.
"""

import argparse
import time

import numpy as np

from encore_bench import kernels


def make_inputs(n, tau, rng):
    x1 = rng.uniform(-50, 1900, size=(n, tau))
    y1 = rng.uniform(0, 900, size=(n, tau))
    w = rng.uniform(5, 200, size=(n, tau))
    h = rng.uniform(10, 400, size=(n, tau))
    gt = np.stack([x1, y1, x1 + w, y1 + h], axis=-1)
    pred = gt + rng.normal(0, 5, size=gt.shape)
    flat = np.clip(gt.reshape(-1, 4), 0, [1920, 1080, 1920, 1080])
    flat[:, 2] = np.maximum(flat[:, 2], flat[:, 0])
    flat[:, 3] = np.maximum(flat[:, 3], flat[:, 1])
    return pred, gt, flat


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000, help="samples")
    ap.add_argument("--tau", type=int, default=45)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    pred, gt, boxes = make_inputs(args.n, args.tau, rng)
    x = rng.normal(0, 3, size=(args.n, args.tau, 4))
    cases = {
        "box_mse": (kernels.box_mse_numba, kernels.box_mse_numpy, (pred, gt, args.tau)),
        "center_mse": (kernels.center_mse_numba, kernels.center_mse_numpy, (pred, gt, args.tau)),
        "adjusted_dims": (kernels.adjusted_dims_numba, kernels.adjusted_dims_numpy,
                          (boxes, np.full(len(boxes), 1920.0),
                           np.full(len(boxes), 1080.0), 0.34, 1.0)),
        "logcosh": (kernels.logcosh_numba, kernels.logcosh_numpy, (x,)),
        "logcosh_grad": (kernels.logcosh_grad_numba, kernels.logcosh_grad_numpy, (x,)),
    }
    print(f"{'kernel':<15}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  max|diff|")
    for name, (fast, slow, call_args) in cases.items():
        a = fast(*call_args)  # first call compiles
        b = slow(*call_args)
        diff = max(float(np.max(np.abs(np.asarray(u, float) - np.asarray(v, float))))
                   for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)))
        t_fast = best_of(lambda: fast(*call_args), args.repeat)
        t_slow = best_of(lambda: slow(*call_args), args.repeat)
        print(f"{name:<15}{t_fast * 1e3:>10.2f}{t_slow * 1e3:>10.2f}{t_slow / t_fast:>8.1f}x  {diff:.2e}")


if __name__ == "__main__":
    main()
