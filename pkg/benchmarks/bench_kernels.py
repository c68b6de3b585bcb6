"""Compare the compiled and NumPy convolution kernels on model-sized shapes.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from stvid.numerics import kernels

CASES = {
    # name: (x shape, kernel shape, pad); activations are [T, C, H, W]
    "conv2d 16x32x32x32 k3": ((16, 32, 32, 32), (32, 32, 3, 3), 1),
    "conv2d 16x64x8x8 k3": ((16, 64, 8, 8), (64, 64, 3, 3), 1),
    "conv1d_time 16x64x16x16 k3": ((16, 64, 16, 16), (64, 64, 3), 1),
    "conv1d_time 8x128x8x8 k3": ((8, 128, 8, 8), (128, 128, 3), 1),
}


def _calls(mod, xs, ks, pad, dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(xs).astype(dtype)
    k = rng.standard_normal(ks).astype(dtype)
    if len(ks) == 4:
        g = mod.conv2d_forward(x, k, pad, pad)
        return (lambda: mod.conv2d_forward(x, k, pad, pad)), (lambda: mod.conv2d_backward(x, k, g, pad, pad))
    g = mod.conv1d_time_forward(x, k, pad)
    return (lambda: mod.conv1d_time_forward(x, k, pad)), (lambda: mod.conv1d_time_backward(x, k, g, pad))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"backends: {backends}; dtype {args.dtype}; best of {args.repeat}, ms per call")
    print(f"{'case':30s} {'pass':4s} " + " ".join(f"{b:>9s}" for b in backends) + "  speedup")
    for name, (xs, ks, pad) in CASES.items():
        res = {}
        for b in backends:
            fwd, bwd = _calls(kernels.get_backend(b), xs, ks, pad, args.dtype)
            res[b] = [min(timeit.repeat(f, number=1, repeat=args.repeat)) * 1e3 for f in (fwd, bwd)]
        for i, label in enumerate(("fwd", "bwd")):
            cols = " ".join(f"{res[b][i]:9.2f}" for b in backends)
            speed = f"{res['python'][i] / res['cython'][i]:6.2f}x" if "cython" in res else ""
            print(f"{name:30s} {label:4s} {cols}  {speed}")


if __name__ == "__main__":
    main()
