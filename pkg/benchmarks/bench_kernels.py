"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each kernel is run on identical inputs under both backends; outputs are
checked for equality before timing so a fast-but-wrong build is caught.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from mome.kernels import available_backends


def cases(rng):
    words = [("token%06d" % i).encode() for i in range(20_000)]
    scores = rng.standard_normal((4096, 16))
    series = rng.standard_normal(20_000)
    a = rng.standard_normal((24, 24))
    sym = a + a.T
    return {
        "fnv1a64 x20000": lambda k: [k.fnv1a64(w) for w in words],
        "topk_mask_rows 4096x16 K=4": lambda k: k.topk_mask_rows(scores, 4),
        "moving_average n=20000 k=25": lambda k: k.moving_average(series, 25),
        "jacobi_eigvalsh 24x24": lambda k: k.jacobi_eigvalsh(sym),
    }


def same(a, b):
    if isinstance(a, list):
        return a == b
    return np.array_equal(np.asarray(a), np.asarray(b)) or np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the numpy fallback is available", file=sys.stderr)
    rows = []
    for name, fn in cases(np.random.default_rng(0)).items():
        ref = fn(backends["python"])
        row = {"kernel": name}
        for label, mod in backends.items():
            if not same(fn(mod), ref):
                raise SystemExit(f"{name}: {label} output differs from the fallback")
            row[label] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
        if "cython" in row:
            row["speedup"] = row["python"] / row["cython"]
        rows.append(row)

    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for r in rows:
        cy = f"{1e3 * r['cython']:10.3f}" if "cython" in r else f"{'-':>10s}"
        sp = f"{r['speedup']:7.1f}x" if "speedup" in r else f"{'-':>8s}"
        print(f"{r['kernel']:32s} {1e3 * r['python']:10.3f} {cy} {sp}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
