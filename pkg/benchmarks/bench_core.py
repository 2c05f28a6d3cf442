"""Compiled vs pure-Python kernels: radius search and sequential-graph batching.

    python benchmarks/bench_core.py [--pois 38000] [--batch 128] [--repeat 3]

Both implementations get identical inputs and their outputs are compared
before timing is reported.
"""

import argparse
import time

import numpy as np

from kbgnn import _pycore
from kbgnn.graphs import grid_cells

try:
    from kbgnn import _core
except ImportError:  # extension not built
    _core = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def city(n, seed=0):
    # NYC-sized bounding box with clustered venues
    rng = np.random.default_rng(seed)
    centers = np.c_[rng.uniform(40.55, 40.90, 60), rng.uniform(-74.05, -73.75, 60)]
    pick = rng.integers(0, len(centers), n)
    return centers[pick, 0] + 0.01 * rng.standard_normal(n), centers[pick, 1] + 0.012 * rng.standard_normal(n)


def histories(batch, length, num_pois, seed=0):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, length + 1, batch)
    offsets = np.r_[0, np.cumsum(lengths)].astype(np.int64)
    # revisit-heavy sequences over a small personal vocabulary
    flat = np.concatenate([rng.choice(rng.integers(0, num_pois, 30), k) for k in lengths]).astype(np.int64)
    return flat, offsets


def same_pairs(a, b):
    ka = np.lexsort((np.asarray(a[1]), np.asarray(a[0])))
    kb = np.lexsort((np.asarray(b[1]), np.asarray(b[0])))
    return all(np.allclose(np.asarray(x)[ka], np.asarray(y)[kb], rtol=1e-12) for x, y in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pois", type=int, default=38000)
    ap.add_argument("--delta", type=float, default=0.5)
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--length", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _core is None:
        raise SystemExit("compiled core not built; run `pip install -e . --no-build-isolation` first")

    lat, lon = city(args.pois)
    cells = grid_cells(lat, lon, args.delta)
    flat, offsets = histories(args.batch, args.length, args.pois)

    rows = []
    t_c, out_c = best_of(lambda: _core.radius_pairs(*cells, True, args.delta), args.repeat)
    t_p, out_p = best_of(lambda: _pycore.radius_pairs(*cells, True, args.delta), args.repeat)
    assert same_pairs(out_c, out_p), "radius_pairs outputs differ"
    rows.append((f"radius_pairs ({args.pois} POIs, {len(out_c[0])} pairs)", t_c, t_p))

    t_c, out_c = best_of(lambda: _core.seq_graph_batch(flat, offsets, args.pois), args.repeat)
    t_p, out_p = best_of(lambda: _pycore.seq_graph_batch(flat, offsets, args.pois), args.repeat)
    assert all(np.array_equal(x, y) for x, y in zip(out_c, out_p)), "seq_graph_batch outputs differ"
    rows.append((f"seq_graph_batch (B={args.batch}, T<={args.length})", t_c, t_p))

    print(f"{'kernel':<48}{'cython s':>10}{'python s':>10}{'speedup':>9}")
    for name, c, p in rows:
        print(f"{name:<48}{c:>10.4f}{p:>10.4f}{p / c:>8.1f}x")


if __name__ == "__main__":
    main()
