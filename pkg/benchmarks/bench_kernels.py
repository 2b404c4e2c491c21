"""Compare the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each kernel
is timed on a training-sized workload under both backends and the outputs
are checked to agree before timing.
"""

import argparse
import time

import numpy as np

from fnguided._alloc import tune_allocator
from fnguided.kernels import _fallback
from fnguided.netblocks import init_block_params

try:
    from fnguided.kernels import _ckernels
except ImportError:
    _ckernels = None


def _workloads(rng):
    B, N, C = 16, 500, 32
    M = B * N
    sym = rng.normal(size=(512, 9, 9))
    sym = sym @ np.swapaxes(sym, 1, 2)
    Es = rng.normal(size=(512, 3, 3))
    x1, x2 = rng.normal(size=(2, N, 2))
    x = rng.normal(size=(B, N, C))
    w = rng.random((B, N))
    w /= w.sum(axis=1, keepdims=True)
    p = {k: getattr(v, "value", v) for k, v in init_block_params(rng, C).items()}
    h = rng.normal(size=(M, C))
    g = rng.normal(size=(M, C))
    gamma, beta = rng.normal(size=(2, C))

    def wstd_bwd(k):
        y, d, s = k.wstd_forward(x, w, 1e-3)
        return lambda: k.wstd_backward(g.reshape(B, N, C), x, d, s, w, True)

    def gate_bwd(k):
        _, hid, gate = k.channel_gate_forward(h, p["ca_w1"], p["ca_b1"], p["ca_w2"], p["ca_b2"])
        return lambda: k.channel_gate_backward(g, h, p["ca_w1"], p["ca_w2"], hid, gate)

    def relu_bwd(k):
        out = k.affine_relu_forward(h, gamma, beta)
        return lambda: k.affine_relu_backward(g, h, out, gamma)

    return {
        "jacobi_eigh_batch (512x9x9)": lambda k: lambda: k.jacobi_eigh_batch(sym),
        "symmetric_epipolar_distances (512x500)":
            lambda k: lambda: k.symmetric_epipolar_distances(Es, x1, x2),
        "count_inliers (512x500)": lambda k: lambda: k.count_inliers(Es, x1, x2, 1e-3),
        "wstd_forward (16x500x32)": lambda k: lambda: k.wstd_forward(x, w, 1e-3),
        "wstd_backward (16x500x32)": wstd_bwd,
        "channel_gate_forward (8000x32)":
            lambda k: lambda: k.channel_gate_forward(h, p["ca_w1"], p["ca_b1"], p["ca_w2"], p["ca_b2"]),
        "channel_gate_backward (8000x32)": gate_bwd,
        "affine_relu_forward (8000x32)": lambda k: lambda: k.affine_relu_forward(h, gamma, beta),
        "affine_relu_backward (8000x32)": relu_bwd,
    }


def _flatten(out):
    if isinstance(out, tuple):
        return [a for o in out if o is not None for a in _flatten(o)]
    return [np.asarray(out, dtype=np.float64)]


def _best_time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    tune_allocator()
    if _ckernels is None:
        print("compiled kernels not built; run `pip install --no-build-isolation -e .` first")
        return 1
    work = _workloads(np.random.default_rng(args.seed))
    print(f"{'kernel':42s} {'cython ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max diff':>9s}")
    for name, make in work.items():
        fc, ff = make(_ckernels), make(_fallback)
        diff = max((float(np.max(np.abs(a - b))) if a.size else 0.0)
                   for a, b in zip(_flatten(fc()), _flatten(ff())))
        tc, tf = _best_time(fc, args.repeat), _best_time(ff, args.repeat)
        print(f"{name:42s} {tc * 1e3:10.3f} {tf * 1e3:10.3f} {tf / tc:7.2f}x {diff:9.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
