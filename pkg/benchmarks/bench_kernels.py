"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on identical inputs under both backends; outputs are
checked for equality before timing.
"""

import argparse
import json
import timeit

import numpy as np

from rfv import _pykernels
from rfv.retriever import RetrievalIndex

try:
    from rfv import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _cases(rng):
    flat = (rng.random(224 * 224) < 0.3).astype(np.uint8)
    runs = _pykernels.rle_encode(flat)
    blobs = np.zeros((224, 224), np.uint8)  # mask-like: a few rectangles
    for _ in range(40):
        r, c = rng.integers(0, 200, 2)
        blobs[r:r + rng.integers(3, 24), c:c + rng.integers(3, 24)] = 1
    mats = {}
    for n in (1_000, 10_000):
        m = rng.standard_normal((n, 64)) * rng.uniform(0.2, 2.0, (n, 1))
        idx = RetrievalIndex([f"e{i:06d}" for i in range(n)], m)
        mats[n] = idx
    q = rng.standard_normal(64)
    bflat = blobs.ravel()
    bruns = _pykernels.rle_encode(bflat)
    yield "rle_encode 224x224 noise", lambda K: K.rle_encode(flat)
    yield "rle_decode 224x224 noise", lambda K: K.rle_decode(runs, flat.size)
    yield "rle_encode 224x224 blobs", lambda K: K.rle_encode(bflat)
    yield "rle_decode 224x224 blobs", lambda K: K.rle_decode(bruns, bflat.size)
    yield "label_components 224x224", lambda K: K.label_components(blobs)
    for n, idx in mats.items():
        for prune in (False, True):
            args = (idx.sorted_matrix, idx.sorted_norms, idx.sorted_rank, q, float(np.linalg.norm(q)), 5, prune)
            name = f"mips_scan n={n} k=5 {'pruned' if prune else 'exhaustive'}"
            yield name, lambda K, a=args: K.mips_scan(*a)


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray) and a.dtype.kind == "f":
        return np.allclose(a, b, rtol=1e-12, atol=0)  # summation order differs
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    return a == b


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="write results to this file")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 1
    rows = []
    print(f"{'kernel':<40}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in _cases(np.random.default_rng(args.seed)):
        if not _same(fn(_pykernels), fn(_ckernels)):
            raise SystemExit(f"backend outputs differ on {name}")
        t = {}
        for label, K in (("python", _pykernels), ("cython", _ckernels)):
            timer = timeit.Timer(lambda: fn(K))
            number, _ = timer.autorange()
            t[label] = min(timer.repeat(args.repeat, number)) / number * 1e3
        rows.append({"kernel": name, "python_ms": t["python"], "cython_ms": t["cython"],
                     "speedup": t["python"] / t["cython"]})
        print(f"{name:<40}{t['python']:>12.3f}{t['cython']:>12.3f}{rows[-1]['speedup']:>9.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
