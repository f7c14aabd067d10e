"""Time the compiled kernels against their pure-numpy fallbacks.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``.  Each kernel is
called once before timing so numba compilation is excluded.  The last column
is the speed-up of the compiled path.
"""

import argparse
import timeit

import numpy as np
import scipy.sparse as sp

from volparam import _kernels as K
from volparam.bspline import uniform_knots


def _cases(rng):
    kv = uniform_knots(3, 20)
    u = rng.uniform(0, 1, 20_000)
    spans = kv.find_span(u)
    yield "basis_ders", (kv.knots, 3, spans, u, 2)

    ctrl = rng.normal(size=(12, 12, 12, 3))
    n = 20_000
    su, sv, sw = rng.integers(0, 9, n), rng.integers(0, 9, n), rng.integers(0, 9, n)
    bu, bv, bw = rng.random((n, 4)), rng.random((n, 4)), rng.random((n, 4))
    yield "tensor_contract", (ctrl, su, sv, sw, bu, bv, bw)

    yield "casteljau_split", (rng.normal(size=(512, 9, 81)), 0.5)
    yield "bern_product", (rng.normal(size=(64, 4, 4, 4)), rng.normal(size=(64, 3, 4, 4)))
    yield "scatter_add", (2000, rng.integers(0, 2000, (5000, 64)), rng.normal(size=(5000, 64, 3)))

    m = 3000
    M = sp.random(m, m, density=0.002, random_state=3)
    L = sp.tril((M @ M.T + 5 * sp.identity(m)).tocsr(), format="csr")
    L.sort_indices()
    yield "ic0", (m, L.indptr, L.indices, L.data.copy())
    yield "lower_solve", (m, L.indptr, L.indices, L.data, rng.normal(size=m))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'numpy [ms]':>11} {'numba [ms]':>11} {'speed-up':>9}")
    for name, a in _cases(rng):
        fns = getattr(K, name + "_numpy"), getattr(K, name + "_numba")
        times = []
        for fn in fns:
            # ic0 factors in place, so every call gets a fresh copy
            call = (lambda fn=fn: fn(*a[:3], a[3].copy())) if name == "ic0" else (lambda fn=fn: fn(*a))
            call()
            times.append(min(timeit.repeat(call, number=1, repeat=args.repeat)) * 1e3)
        print(f"{name:<16} {times[0]:11.3f} {times[1]:11.3f} {times[0] / times[1]:9.1f}x")


if __name__ == "__main__":
    main()
