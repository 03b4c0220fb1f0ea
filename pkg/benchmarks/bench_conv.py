"""Compare the compiled convolution core against the numpy fallback.

Run:  python benchmarks/bench_conv.py
The dispatch thresholds in cfquant.core were chosen from this table; both
backends implement identical semantics, so the faster one per call shape
is always safe to pick.
"""

import time

import numpy as np

from cfquant import core
from cfquant.core import reference

SHAPES = [
    ("encoder stage 1 (1->8 @32^3)", (1, 32, 32, 32), (8, 1, 3, 3, 3)),
    ("encoder stage 2 (8->16 @16^3)", (8, 16, 16, 16), (16, 8, 3, 3, 3)),
    ("encoder stage 3 (16->32 @8^3)", (16, 8, 8, 8), (32, 16, 3, 3, 3)),
    ("fusion level 1 (10->4 @16^3)", (10, 16, 16, 16), (4, 10, 3, 3, 3)),
    ("fusion level 3 (34->16 @8^3)", (34, 8, 8, 8), (16, 34, 3, 3, 3)),
    ("decoder merge (28->8 @16^3)", (28, 16, 16, 16), (8, 28, 3, 3, 3)),
]


def bench(fn, *args, reps=7):
    fn(*args)
    start = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - start) / reps * 1e3


def main():
    if not core.USE_COMPILED:
        print("compiled extension not available; timing the fallback only")
    rng = np.random.default_rng(0)
    header = f"{'call shape':34s} {'cy fwd':>8s} {'np fwd':>8s} {'cy bwdI':>8s} {'np bwdI':>8s} {'cy bwdW':>8s} {'np bwdW':>8s}"
    print(header)
    print("-" * len(header))
    for name, xs, ws in SHAPES:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        b = np.zeros(ws[0], dtype=np.float32)
        y = reference.conv3d_forward(x, w, b, 1, 1)
        gy = rng.standard_normal(y.shape).astype(np.float32)
        row = [f"{name:34s}"]
        if core.USE_COMPILED:
            from cfquant.core import _convolve, _pad4
            xp = _pad4(x, 1)
            out = np.empty_like(y)
            row.append(f"{bench(_convolve.conv3d_forward_padded, xp, w, b, 1, out):7.2f}m")
            gxp = np.zeros((xs[0],) + tuple(s + 2 for s in xs[1:]), dtype=np.float32)
            row.append(f"{bench(reference.conv3d_forward, x, w, b, 1, 1):7.2f}m")
            row.append(f"{bench(_convolve.conv3d_backward_input_padded, gy, w, 1, gxp):7.2f}m")
            row.append(f"{bench(reference.conv3d_backward_input, gy, w, x.shape, 1, 1):7.2f}m")
            gw = np.empty(ws, dtype=np.float32)
            row.append(f"{bench(_convolve.conv3d_backward_weight_padded, xp, gy, 1, gw):7.2f}m")
            row.append(f"{bench(reference.conv3d_backward_weight, x, gy, 3, 1, 1):7.2f}m")
        else:
            row.append("     n/a")
            row.append(f"{bench(reference.conv3d_forward, x, w, b, 1, 1):7.2f}m")
            row.append("     n/a")
            row.append(f"{bench(reference.conv3d_backward_input, gy, w, x.shape, 1, 1):7.2f}m")
            row.append("     n/a")
            row.append(f"{bench(reference.conv3d_backward_weight, x, gy, 3, 1, 1):7.2f}m")
        print(" ".join(row))
    print(f"\nactive backend: {core.BACKEND} (override with CFXQ_BACKEND)")


if __name__ == "__main__":
    main()
