"""Compiled vs pure-Python kernel timings.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import json
import timeit

import numpy as np

from soundloc import _pykernels

try:
    from soundloc import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    X = rng.normal(size=(2000, 32))
    C = rng.normal(size=(16, 32))
    yield "assign_nearest 2000x32, K=16", "assign_nearest", (X, C)
    X = rng.normal(size=(20000, 128))
    C = rng.normal(size=(12, 128))
    yield "assign_nearest 20000x128, K=12", "assign_nearest", (X, C)
    for K, n in ((8, 4), (10, 4), (12, 3)):
        fr = rng.dirichlet(np.ones(n), size=K)
        yield f"best_surjective_map K={K}, {n} categories", "best_surjective_map", (fr,)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true", help="print one JSON object per case")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    impls = {"python": _pykernels}
    if _ckernels is not None:
        impls["cython"] = _ckernels
    for label, name, inputs in cases(rng):
        row = {"case": label}
        outs = {}
        for impl_name, mod in impls.items():
            fn = getattr(mod, name)
            outs[impl_name] = fn(*inputs)
            row[impl_name] = min(timeit.repeat(lambda: fn(*inputs), number=1, repeat=args.repeat))
        if len(outs) == 2:
            a, b = outs["python"], outs["cython"]
            assert np.array_equal(a[0], b[0]) and np.allclose(a[1], b[1])
            row["speedup"] = row["python"] / row["cython"]
        if args.json:
            print(json.dumps(row))
        else:
            parts = [f"{k} {row[k] * 1e3:9.2f} ms" for k in impls]
            if "speedup" in row:
                parts.append(f"x{row['speedup']:.1f}")
            print(f"{label:40s} " + "  ".join(parts))


if __name__ == "__main__":
    main()
