"""Time the compiled and pure-Python kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--iterations 2000] [--repeat 3]

Both backends consume the same random stream, so the script also checks that
their traces agree exactly.
"""

import argparse
import time

import numpy as np

from degeo import kernels
from degeo.model import Hyperparams
from degeo.sampler import _Chain, build_candidate_table
from degeo.lineage import candidate_set
from degeo.synth import default_topology, gen_model_trees


def _best_of(fn, repeat):
    best, out = np.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_gibbs(mod, tree, n_iter, repeat):
    ctab = build_candidate_table(tree, candidate_set(tree))
    hyper = Hyperparams.from_scores(tree.score_array())

    def run():
        chain = _Chain(ctab, hyper, 7, 200)
        return mod.run_gibbs(chain.rng, ctab.table, ctab.totals, chain.hyper_vec,
                             chain.state, n_iter, 200, True)

    return _best_of(run, repeat), len(ctab.names)


def bench_windows(mod, n, repeat):
    rng = np.random.default_rng(3)
    extreme = (rng.random(n) < 0.9).astype(np.int64)
    return _best_of(lambda: mod.farthest_ends(extreme, 10, 39, 40), repeat)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--points", type=int, default=2000, help="path length for the window search")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    tree, _ = gen_model_trees(default_topology(), 3, seed=1)[2]
    mods = kernels.backends()
    if "compiled" not in mods:
        print("compiled extension not built; timing the Python kernels only")

    results = {}
    for name, mod in mods.items():
        (t_g, trace), n_cand = bench_gibbs(mod, tree, args.iterations, args.repeat)
        t_w, far = bench_windows(mod, args.points, args.repeat)
        results[name] = (t_g, t_w, trace, far)
        print(f"{name:9s} gibbs {args.iterations} scans over {n_cand} candidates: "
              f"{t_g * 1e3:9.1f} ms   window search on {args.points} points: {t_w * 1e3:8.2f} ms")

    if len(results) == 2:
        py, cc = results["python"], results["compiled"]
        same = (np.array_equal(py[2][0], cc[2][0]) and np.array_equal(py[2][1], cc[2][1])
                and np.array_equal(py[3], cc[3]))
        print(f"speedup   gibbs {py[0] / cc[0]:.1f}x   window search {py[1] / cc[1]:.1f}x   "
              f"identical output: {same}")


if __name__ == "__main__":
    main()
