"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes match one training step of the small generator (batch 16, width 16,
96x96 patches).
"""

import argparse
import timeit

import numpy as np

from triframe import backend, metrics
from triframe.tensor_core import conv2d_backward, conv2d_forward, leaky_relu


def cases(rng):
    x = rng.standard_normal((16, 16, 96, 96)).astype(np.float32)
    w = (0.1 * rng.standard_normal((16, 16, 3, 3))).astype(np.float32)
    b = np.zeros(16, np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    a = rng.random((16 * 9, 96, 96))
    c = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    return {
        "conv forward 16x16x96x96": lambda: conv2d_forward(x, w, b),
        "conv backward 16x16x96x96": lambda: conv2d_backward(g, x, w),
        "leaky relu 2.4M": lambda: leaky_relu(x, 0.2),
        "ssim + grad 144x96x96": lambda: metrics.ssim_and_grad(a, c),
        "ms-ssim + grad 144x96x96": lambda: metrics.ms_ssim_and_grad(a, c),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    names = backend.available()
    rows = {}
    for name in names:
        with backend.use_backend(name):
            for label, fn in cases(np.random.default_rng(0)).items():
                fn()
                rows.setdefault(label, {})[name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{'kernel':28s}" + "".join(f"{n:>10s}" for n in names)
          + ("   speedup" if len(names) > 1 else ""))
    for label, t in rows.items():
        line = f"{label:28s}" + "".join(f"{t[n] * 1e3:8.1f}ms" for n in names)
        if len(names) > 1:
            line += f"  {t['python'] / t['cython']:7.2f}x"
        print(line)


if __name__ == "__main__":
    main()
