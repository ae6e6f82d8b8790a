"""Time the numba kernels against their numpy twins on representative sizes.

    python benchmarks/bench_kernels.py [--repeat 3] [--batch 256]

Each kernel is called once untimed to trigger compilation, then timed as
the best of ``--repeat`` runs. The numpy path is what
``LATENTUAD_DISABLE_JIT=1`` selects.
"""
import argparse
import time

import numpy as np

from latentuad import mmst
from latentuad._conv import correlate, correlate_adjoint, correlate_wgrad
from latentuad.ocsvm import default_gamma, kernel_matrix, solve_dual


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(batch, rng):
    # first encoder layer of the reference model: 3 -> 3 filters, 5x5 on a 15x15 patch
    x = rng.normal(size=(3, 15, 15, batch))
    W = rng.normal(size=(3, 3, 5, 5))
    y = correlate(x, W, (1, 1), False)
    d = rng.normal(size=y.shape)
    # strided layer: 4 -> 12 filters, 3x3 stride 3 on 9x9
    x3 = rng.normal(size=(4, 9, 9, batch))
    W3 = rng.normal(size=(12, 4, 3, 3))
    d3 = rng.normal(size=correlate(x3, W3, (3, 3), False).shape)

    z = rng.normal(size=(500, 16))
    Q = kernel_matrix(z, z, default_gamma(z))

    stream = rng.standard_t(4, size=(6000, 16))
    P0 = mmst.init_params(stream[:2000], 9, seed=0)
    st0 = mmst.expected_stats(P0, stream[:2000])

    def em(use):
        s = mmst.EmState.start(P0, st0)
        mmst.run_chunk(s, stream[2000:], 0.6, 100.0, 500, use_numba=use)

    return {
        f"correlate 5x5 (batch {batch})": lambda use: correlate(x, W, (1, 1), use),
        f"adjoint 5x5 (batch {batch})": lambda use: correlate_adjoint(d, W, (15, 15), (1, 1), use),
        f"wgrad 5x5 (batch {batch})": lambda use: correlate_wgrad(x, d, (5, 5), (1, 1), use),
        f"wgrad 3x3/s3 (batch {batch})": lambda use: correlate_wgrad(x3, d3, (3, 3), (3, 3), use),
        "SMO n=500 nu=0.03": lambda use: solve_dual(Q, 0.03, use_numba=use),
        "online EM K=9 M=16, 4000 steps": em,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--batch", type=int, default=256)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s}")
    for name, fn in cases(args.batch, rng).items():
        t_nb = best_of(lambda: fn(True), args.repeat)
        t_np = best_of(lambda: fn(False), args.repeat)
        print(f"{name:34s} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
