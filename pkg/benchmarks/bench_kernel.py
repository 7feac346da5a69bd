"""Compare the compiled and numpy correlation backends.

Times Gram and cross-correlation builds plus one likelihood fit per
backend, checks that both produce the same matrices, and writes the
results as CSV (stdout) and optionally JSON.

    python3 benchmarks/bench_kernel.py [--json out.json] [--repeats 20]
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import timeit
from dataclasses import replace

import numpy as np

from bnopt import kernel
from bnopt.bench import bn2d_space, cnn_mock_space
from bnopt.gp import Dataset, FitOptions, fit
from bnopt.kernel import KernelParams, cross_correlation, gram_matrix
from bnopt.space import sample_uniform


def _points(space, n, seed):
    rng = np.random.default_rng(seed)
    return space.encode_many([sample_uniform(space, rng) for _ in range(n)])


def _params(space, nu):
    rng = np.random.default_rng(1)
    return KernelParams(
        rng.uniform(0.5, 5.0, space.d),
        np.full(space.q, 2.0),
        np.full(len(space.nested), 0.5),
        nu,
    )


def _best_of(fn, repeats):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeats, number=number)) / number


def run(repeats: int, sizes=(10, 30, 60, 120, 240)):
    backends = sorted(kernel.BACKENDS)
    rows = []
    for label, space in (("bn2d", bn2d_space()), ("cnn_mock", cnn_mock_space())):
        for n in sizes:
            pts = _points(space, n, n)
            query = _points(space, 256, n + 1)
            params = _params(space, 2.5)
            ref_gram = gram_matrix(pts, params, space, backend="python")
            ref_cross = cross_correlation(query, pts, params, space, backend="python")
            for b in backends:
                err = max(
                    np.max(np.abs(gram_matrix(pts, params, space, backend=b) - ref_gram)),
                    np.max(np.abs(cross_correlation(query, pts, params, space, backend=b) - ref_cross)),
                )
                t_gram = _best_of(lambda: gram_matrix(pts, params, space, backend=b), repeats)
                t_cross = _best_of(lambda: cross_correlation(query, pts, params, space, backend=b), repeats)
                rows.append({
                    "space": label, "n": n, "backend": b,
                    "gram_us": round(t_gram * 1e6, 2),
                    "cross256_us": round(t_cross * 1e6, 2),
                    "max_abs_diff_vs_python": float(err),
                })
    fits = []
    space = bn2d_space()
    rng = np.random.default_rng(5)
    cfgs = [sample_uniform(space, rng) for _ in range(60)]
    y = rng.normal(size=60)
    ds = Dataset.from_configs(space, cfgs, y)
    opts = FitOptions(restarts=3)
    for b in backends:
        previous = kernel.BACKEND
        kernel.BACKEND = b
        try:
            t = _best_of(lambda: fit(ds, space, replace(opts), rng_seed=0), max(1, repeats // 10))
        finally:
            kernel.BACKEND = previous
        fits.append({"backend": b, "n": 60, "restarts": 3, "fit_s": round(t, 4)})
    return rows, fits


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--json", help="also write results here")
    args = parser.parse_args(argv)
    rows, fits = run(args.repeats)
    writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    print()
    for f in fits:
        print(f"fit n={f['n']} restarts={f['restarts']} backend={f['backend']}: {f['fit_s']:.3f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"correlation": rows, "fit": fits}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
