"""Compare the numba kernels with their pure-numpy twins.

Both variants are imported side by side from ``lampe.kernels`` (the ``*_loop``
functions are the jitted ones), so one process times both. Each kernel is
run once before timing to pay the compile cost, then the best of
``--repeat`` runs is reported.

    python benchmarks/bench_backends.py --repeat 5
"""

import argparse
import time

import numpy as np

from lampe import _backend, kernels
from lampe.pe_map import MappingConfig
from lampe.rope_attention import RotaryBasis, apply_rotation, random_batch


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(l, heads, dim):
    m, s = l // 4, l // 32
    out = np.zeros((l, l), dtype=np.int64)
    kernels.fill_index_loop(l, m, s, s, out)
    batch = random_batch(0, heads, l, dim)
    basis = RotaryBasis(dim)
    pos = np.arange(l)
    qr = np.ascontiguousarray(apply_rotation(batch.q, pos[None, :], basis))
    kr = np.ascontiguousarray(apply_rotation(batch.k, pos[None, :], basis))
    mask = np.tri(l, dtype=bool)
    scale = float(batch.scale)
    buf = np.zeros((l, l), dtype=np.int64)
    small = min(48, max(8, l // 16))
    return {
        "fill_index": (
            lambda: kernels.fill_index_loop(l, m, s, s, buf),
            lambda: kernels.fill_index_numpy(l, m, s, s, buf),
        ),
        "first_violation": (
            lambda: kernels.first_violation_loop(out),
            lambda: kernels.first_violation_numpy(out),
        ),
        "stream_monotonicity": (
            lambda: kernels.stream_index_violation_loop(l, m, s, s),
            lambda: kernels.stream_index_violation_numpy(l, m, s, s),
        ),
        "masked_attention": (
            lambda: kernels.masked_attention_loop(qr, kr, batch.v, mask, scale),
            lambda: kernels.masked_attention_numpy(qr, kr, batch.v, mask, scale),
        ),
        "dense_oracle": (
            lambda: kernels.dense_relative_attention_loop(
                batch.q, batch.k, batch.v, out, basis.angles, scale
            ),
            lambda: kernels.dense_relative_attention_numpy(
                batch.q, batch.k, batch.v, out, basis.angles, scale
            ),
        ),
        f"exhaustive_audit(l={small})": (
            lambda: kernels.exhaustive_audit_loop(small),
            lambda: kernels.exhaustive_audit_numpy(small),
        ),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--l", type=int, default=1024)
    ap.add_argument("--heads", type=int, default=2)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    if not _backend.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    MappingConfig(args.l, args.l // 4, args.l // 32, args.l // 32)  # validates the sizes

    print(f"l={args.l} heads={args.heads} dim={args.dim} threads={_backend.numba.config.NUMBA_NUM_THREADS}")
    print(f"{'kernel':<26}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, (jit_fn, np_fn) in cases(args.l, args.heads, args.dim).items():
        t_jit = best_of(jit_fn, args.repeat)
        t_np = best_of(np_fn, args.repeat)
        print(f"{name:<26}{t_jit * 1e3:>12.2f}{t_np * 1e3:>12.2f}{t_np / t_jit:>9.1f}x")


if __name__ == "__main__":
    main()
