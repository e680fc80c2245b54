"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat N] [--json]

Both paths are called directly, so the FP4STREAM_DISABLE_NUMBA flag does not
matter here. Numba compilation happens in a warm-up call outside the timing.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from fp4stream import _kernels as K
from fp4stream._backend import HAVE_NUMBA
from fp4stream.fp_codec import E2M1_MAGNITUDES, E2M1_MIDPOINTS, E4M3_MAGNITUDES, E4M3_MIDPOINTS


def cases(rng):
    xb = rng.standard_normal((1024, 16, 16))
    g = float(np.float32(np.abs(xb).max() / 2688))
    tables = (E2M1_MAGNITUDES, E2M1_MIDPOINTS, E4M3_MAGNITUDES, E4M3_MIDPOINTS)
    signed = np.r_[E2M1_MAGNITUDES, -E2M1_MAGNITUDES]
    va, vb = rng.choice(signed, (128, 16, 16)), rng.choice(signed, (128, 16, 16))
    sa, sb = rng.choice(E4M3_MAGNITUDES[1:], (128, 16)), rng.choice(E4M3_MAGNITUDES[1:], (128, 16))
    return {
        "round_to_grid 1M": ("round_to_grid", (np.abs(rng.standard_normal(1 << 20)) * 4, E2M1_MIDPOINTS)),
        "quantize_blocks 256k std": ("quantize_blocks", (xb, g, False) + tables),
        "quantize_blocks 256k search": ("quantize_blocks", (xb, g, True) + tables),
        "block_gemm 128x256x128": ("block_gemm", (va, sa, vb, sb)),
        "causal_fir 4096x64 R=8": ("causal_fir", (rng.standard_normal((4096, 64)), np.full(8, 1 / 8))),
        "natural_mask_table L=512": ("natural_mask_table", (512, 64, 16)),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1

    rows = []
    for label, (name, params) in cases(np.random.default_rng(0)).items():
        fn_np, fn_nb = getattr(K, f"{name}_numpy"), getattr(K, f"{name}_numba")
        fn_nb(*params)
        t_np = min(timeit.repeat(lambda: fn_np(*params), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: fn_nb(*params), number=1, repeat=args.repeat))
        rows.append({"kernel": label, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb})

    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        print(f"{'kernel':32} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
        for r in rows:
            print(f"{r['kernel']:32} {1e3 * r['numpy_s']:10.2f} {1e3 * r['numba_s']:10.2f} {r['speedup']:8.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
