"""Time the compiled and numpy LDL' kernels on random sparse SPD matrices.

    python3 benchmarks/bench_ldl.py [--sizes 100,200,400] [--repeat 5] [--jets 4]

Each size is factorised with plain values and with dual values carrying a
``jets x jets`` block of derivative coefficients.
"""

import argparse
import time

import numpy as np
import scipy.sparse as sp

from galamm.autodiff import Dual
from galamm.sparse import analyze, factorize, get_backend


def random_spd(n, density, rng):
    A = sp.random(n, n, density=density, random_state=rng, format="csc")
    A = A + A.T
    return (A + sp.identity(n) * (abs(A).sum(axis=1).max() + 1.0)).tocsc()


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="100,200,400")
    ap.add_argument("--density", type=float, default=0.01)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--jets", type=int, default=4)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    backends = ["python"]
    try:
        get_backend("cython")
        backends.insert(0, "cython")
    except ImportError:
        print("compiled backend not built; timing the numpy fallback only")

    rng = np.random.default_rng(args.seed)
    print(f"{'n':>6} {'nnz(L)':>8} {'kind':>6} " + " ".join(f"{b:>12}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for n in (int(s) for s in args.sizes.split(",")):
        A = random_spd(n, args.density, rng)
        s = analyze(A)
        plain = s.permuted_upper(A)
        J = args.jets
        jets = np.zeros((plain.size, J, J))
        jets[:, 0, 0] = plain
        jets[:, 1:, 1:] = rng.normal(size=(plain.size, J - 1, J - 1)) * 1e-3
        b = rng.normal(size=n)
        for kind, vals in (("plain", plain), ("dual", Dual(jets))):
            row = []
            for name in backends:
                def run(name=name, vals=vals):
                    factorize(s, vals, backend=name).solve(b)

                row.append(best_of(run, args.repeat))
            line = f"{n:>6} {s.nnz_L:>8} {kind:>6} " + " ".join(f"{t * 1e3:>10.2f}ms" for t in row)
            if len(row) == 2:
                line += f" {row[1] / row[0]:>8.1f}x"
            print(line)


if __name__ == "__main__":
    main()
