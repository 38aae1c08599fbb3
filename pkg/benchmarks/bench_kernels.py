"""Compare the compiled and numpy convolution kernels on model-shaped inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from sincvae import _kernels_py

try:
    from sincvae import _ckernels
except ImportError:
    _ckernels = None

# (label, batch, in_channels, length, out_channels, kernel, stride); the sinc
# front runs as (batch * channels, 1, padded time) against (filters, 1, L)
CASES = [
    ("sinc front 1x128, 8 filters k31", 128, 1, 158, 8, 31, 1),
    ("sinc front 1x173, 16 filters k41", 128, 1, 213, 16, 41, 1),
    ("sinc front 23x256, 4 filters k71", 32 * 23, 1, 326, 4, 71, 1),
    ("encoder block 8->16 k3 s2", 128, 8, 130, 16, 3, 2),
    ("encoder block 16->16 k3 s2", 128, 16, 66, 16, 3, 2),
    ("decoder block 16->16 k3", 128, 16, 130, 16, 3, 1),
    ("decoder out 16->1 k3", 128, 16, 130, 1, 3, 1),
]


def _ops(mod, x, w, gy, stride, K, T):
    return {
        "forward": lambda: mod.conv1d_forward(x, w, stride),
        "grad_weight": lambda: mod.conv1d_backward_weight(gy, x, stride, K),
        "grad_input": lambda: mod.conv1d_backward_input(gy, w, stride, T),
    }


def best_time(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def run(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for label, n, c, t, o, k, s in CASES:
        x = rng.standard_normal((n, c, t))
        w = rng.standard_normal((o, c, k))
        gy = rng.standard_normal((n, o, (t - k) // s + 1))
        ref = _ops(_kernels_py, x, w, gy, s, k, t)
        comp = _ops(_ckernels, x, w, gy, s, k, t) if _ckernels else None
        for op, fn in ref.items():
            row = {"case": label, "op": op, "numpy_ms": 1e3 * best_time(fn, repeat)}
            if comp:
                np.testing.assert_allclose(np.asarray(comp[op]()), fn(), rtol=1e-10, atol=1e-10)
                row["cython_ms"] = 1e3 * best_time(comp[op], repeat)
                row["speedup"] = row["numpy_ms"] / row["cython_ms"]
            rows.append(row)
    return rows


_EPOCH_SCRIPT = """
import time, numpy as np
from sincvae import kernels, vae as V
x = np.random.default_rng(0).standard_normal((1024, 1, 128))
arch = V.VaeArchitecture(in_channels=1, window_len=128, fs=128.0)
t0 = time.perf_counter()
V.train(x, V.TrainConfig(max_epochs=3, seed=0), arch)
print(kernels.BACKEND, (time.perf_counter() - t0) / 3)
"""


def epoch_times():
    """Seconds per training epoch (1024 windows, default architecture) under each backend."""
    out = {}
    for pure in ("", "1"):
        env = dict(os.environ, SINCVAE_PURE_PYTHON=pure)
        backend, seconds = subprocess.run([sys.executable, "-c", _EPOCH_SCRIPT], env=env, check=True,
                                          capture_output=True, text=True).stdout.split()
        out[backend] = float(seconds)
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write the rows as JSON")
    p.add_argument("--epoch", action="store_true", help="also time whole training epochs per backend")
    args = p.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; timing the numpy backend only", file=sys.stderr)
    rows = run(args.repeat)
    print(f"{'case':36s} {'op':12s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for r in rows:
        cy = f"{r['cython_ms']:10.3f} {r['speedup']:7.2f}x" if "cython_ms" in r else f"{'-':>10s} {'-':>8s}"
        print(f"{r['case']:36s} {r['op']:12s} {r['numpy_ms']:10.3f} {cy}")
    if args.epoch:
        for backend, seconds in epoch_times().items():
            print(f"training epoch, {backend} backend: {seconds:.3f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
