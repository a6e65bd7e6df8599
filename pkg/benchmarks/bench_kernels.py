"""Compare the numba scan kernels with the pure-numpy fallbacks.

Times one query-vs-database scan per measure on a synthetic database, checks the
two paths agree, and prints a table. Example::

    python benchmarks/bench_kernels.py --size 5000 --queries 5
"""
import argparse
import json
import time

import numpy as np
from threadpoolctl import threadpool_limits

from billiards.baselines import MEASURES, PointSeqDB
from billiards.core import pack_layouts
from billiards.evalkit import format_table
from billiards.synth import SynthConfig, generate_synthetic


def time_scan(db, measure, queries, use_numba, repeat):
    scan = lambda i: db.scan(measure, queries, i, use_numba)[0]
    for i in range(len(queries)):  # warm-up, and numba compilation
        scan(i)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = [scan(i) for i in range(len(queries))]
        best = min(best, (time.perf_counter() - t0) / len(queries))
    return best, np.stack(out)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=5000, help="database layouts")
    ap.add_argument("--queries", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--measures", default=",".join(MEASURES))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the rows as JSON")
    a = ap.parse_args(argv)

    layouts = generate_synthetic(SynthConfig(count=a.size + a.queries, seed=a.seed))
    packed = pack_layouts([l.canonical() for l in layouts])
    queries = packed.take(np.arange(a.queries))
    db = PointSeqDB.from_packed(packed.take(np.arange(a.queries, len(packed))))
    rows = []
    with threadpool_limits(1):
        for m in a.measures.split(","):
            t_nb, d_nb = time_scan(db, m, queries, True, a.repeat)
            t_np, d_np = time_scan(db, m, queries, False, a.repeat)
            rows.append({"measure": m, "db_size": a.size, "numba_ms": t_nb * 1e3, "numpy_ms": t_np * 1e3,
                         "speedup": t_np / t_nb, "max_abs_diff": float(np.abs(d_nb - d_np).max())})
    print(format_table(rows))
    if a.json:
        with open(a.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
