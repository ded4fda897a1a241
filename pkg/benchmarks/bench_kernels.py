"""Compare the Cython and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is timed on shapes typical of the desk network (batch 4,
96x96 input).  A second table times one Self-ONN layer forward+backward
end to end, with the backend chosen through OPSEG_KERNELS in a child
process so the dispatch path is the real one.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from opseg.kernels import _pykernels

try:
    from opseg.kernels import _ckernels
except ImportError:
    _ckernels = None

LAYER_SNIPPET = """
import timeit, numpy as np
from opseg.selfonn import SelfOnnLayer, selfonn_forward
from opseg.tensor import Tensor
rng = np.random.default_rng(0)
layer = SelfOnnLayer({c}, 8, 3, q=3, dropout_rate=0.0, rng=rng)
x = Tensor(rng.uniform(-1, 1, (4, {c}, {s}, {s})), requires_grad=True)
def step():
    selfonn_forward(layer, x).sum().backward()
print(min(timeit.repeat(step, number=1, repeat={r})))
"""


def kernel_cases(rng):
    x = rng.standard_normal((4, 16, 96, 96))
    small = rng.standard_normal((4, 32, 48, 48))
    wt = rng.standard_normal((3, 3, 8, 16))
    hp = wp = 98
    xp = _pykernels.pad_flat(x, 1, 3)
    gp = rng.standard_normal((8, 4 * hp * wp))
    cols = _pykernels.im2col(small, 3, 3, 2, 1)
    _, argmax = _pykernels.maxpool_forward(x, 2, 2)
    gpool = rng.standard_normal((4, 16, 48, 48))
    return {
        "pad_flat 4x16x96x96": lambda m: m.pad_flat(x, 1, 3),
        "conv_flat_forward 16->8": lambda m: m.conv_flat_forward(xp, wt, 4, hp, wp),
        "conv_flat_backward 16->8": lambda m: m.conv_flat_backward(gp, xp, wt, 4, hp, wp, True),
        "im2col 3x3/2 on 4x32x48x48": lambda m: m.im2col(small, 3, 3, 2, 1),
        "col2im 3x3/2 on 4x32x48x48": lambda m: m.col2im(cols, 4, 32, 48, 48, 3, 3, 2, 1),
        "maxpool_forward 2x2": lambda m: m.maxpool_forward(x, 2, 2),
        "maxpool_backward 2x2": lambda m: m.maxpool_backward(gpool, argmax, 96, 96),
    }


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def layer_time(backend, channels, size, repeat):
    env = dict(os.environ, OPSEG_KERNELS=backend)
    code = LAYER_SNIPPET.format(c=channels, s=size, r=repeat)
    out = subprocess.run([sys.executable, "-c", code], env=env, check=True, capture_output=True, text=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy backend is available", file=sys.stderr)
    rng = np.random.default_rng(0)

    print(f"{'kernel':32s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, call in kernel_cases(rng).items():
        tp = best(lambda: call(_pykernels), args.repeat) * 1e3
        if _ckernels is None:
            print(f"{name:32s} {tp:10.2f} {'-':>10s} {'-':>8s}")
            continue
        tc = best(lambda: call(_ckernels), args.repeat) * 1e3
        print(f"{name:32s} {tp:10.2f} {tc:10.2f} {tp / tc:7.2f}x")

    print()
    print(f"{'Self-ONN layer fwd+bwd (Q=3)':32s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for channels, size in ((16, 96), (32, 48), (64, 12)):
        name = f"4x{channels}x{size}x{size} -> 8"
        tp = layer_time("python", channels, size, args.repeat) * 1e3
        if _ckernels is None:
            print(f"{name:32s} {tp:10.2f} {'-':>10s} {'-':>8s}")
            continue
        tc = layer_time("cython", channels, size, args.repeat) * 1e3
        print(f"{name:32s} {tp:10.2f} {tc:10.2f} {tp / tc:7.2f}x")


if __name__ == "__main__":
    main()
