"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each row reports the best-of-N wall time for both paths and checks that the two
agree to 1e-10. The first numba call (compilation) is excluded.
"""
import argparse
import json
import time

import numpy as np

from rawvid import kernels
from rawvid.metrics import gaussian_taps
from rawvid.raw import cfa_channel_map


def cases(rng):
    mosaic = rng.uniform(0, 1, (512, 512))
    cfa = np.ascontiguousarray(cfa_channel_map("RGGB", 512, 512), dtype=np.int64)
    yield "demosaic 512x512", kernels.numba_demosaic, kernels.numpy_demosaic, \
        (mosaic, cfa, kernels.DEMOSAIC_WEIGHTS), {}
    stack = rng.normal(0.5, 0.01, (100, 128, 128))
    yield "temporal_mean_var 100x128x128", kernels.numba_temporal_mean_var, kernels.numpy_temporal_mean_var, \
        (stack,), {}
    img = rng.uniform(0, 1, (512, 512))
    yield "separable_filter 512x512 (11 taps)", kernels.numba_separable_filter, kernels.numpy_separable_filter, \
        (img, gaussian_taps(1.5, 5)), {}
    x = rng.normal(size=(8, 32, 32))
    offset = rng.normal(scale=2, size=(18, 32, 32))
    mask = rng.uniform(size=(9, 32, 32))
    weight = rng.normal(size=(8, 8, 3, 3))
    yield "dconv 8->8 32x32", kernels.numba_dconv, kernels.numpy_dconv, (x, offset, mask, weight, np.zeros(8)), {}


def best_time(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t)
    return min(times), out


def _flat(out):
    return np.concatenate([np.ravel(o) for o in out]) if isinstance(out, tuple) else np.ravel(out)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json")
    args = p.parse_args(argv)
    if kernels.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rows = []
    print(f"{'kernel':<36}{'numba (ms)':>12}{'numpy (ms)':>12}{'speedup':>10}{'max diff':>12}")
    for name, jit_fn, np_fn, fn_args, _ in cases(np.random.default_rng(args.seed)):
        jit_fn(*fn_args)  # compile
        t_jit, a = best_time(jit_fn, fn_args, args.repeat)
        t_np, b = best_time(np_fn, fn_args, args.repeat)
        diff = float(np.max(np.abs(_flat(a) - _flat(b))))
        rows.append({"kernel": name, "numba_s": t_jit, "numpy_s": t_np, "speedup": t_np / t_jit, "max_diff": diff})
        print(f"{name:<36}{1e3 * t_jit:>12.2f}{1e3 * t_np:>12.2f}{t_np / t_jit:>9.1f}x{diff:>12.1e}")
        if diff > 1e-10:
            raise SystemExit(f"{name}: implementations disagree by {diff}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
