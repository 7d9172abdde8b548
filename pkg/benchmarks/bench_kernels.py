"""Time the compiled and numpy quadrature kernels on the same problems.

    python benchmarks/bench_kernels.py [--repeat 20]

Reports the best-of-``repeat`` wall time of one full-dataset marginal
log-likelihood evaluation per backend, the speed-up, and the largest
difference between the two results.
"""
import argparse
import timeit

import numpy as np

from glmmr2 import _backend
from glmmr2.estimation import FitOptions, ModelSpec, fit_glmm
from glmmr2.family import BERNOULLI, Link
from glmmr2.likelihood import QuadratureSpec, subject_logliks
from glmmr2.simulate import SimConfig, simulate_glmm

CASES = [
    ("N=300 p=5 m=1 Q=1", ModelSpec(BERNOULLI, Link.LOGIT, ("x",)), [[1.0]], 300, 5, 1),
    ("N=300 p=5 m=1 Q=15", ModelSpec(BERNOULLI, Link.LOGIT, ("x",)), [[1.0]], 300, 5, 15),
    ("N=2000 p=5 m=1 Q=15", ModelSpec(BERNOULLI, Link.LOGIT, ("x",)), [[1.0]], 2000, 5, 15),
    ("N=300 p=6 m=2 Q=9", ModelSpec(BERNOULLI, Link.LOGIT, ("x",), random_slopes=("x",)),
     [[1.0, 0.2], [0.2, 0.5]], 300, 6, 9),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    names = sorted(_backend.KERNELS)
    print(f"backends available: {', '.join(names)} (default: {_backend.BACKEND})")
    print(f"{'case':<22}" + "".join(f"{n + ' [ms]':>14}" for n in names) + f"{'speed-up':>10}{'max |diff|':>12}")
    for label, spec, sigma, N, p, Q in CASES:
        data = simulate_glmm(SimConfig(spec, (-0.5, 1.0), sigma, N, p, seed=1))
        y, X, Z, w, starts = data.packed()
        beta, quad = np.array([-0.5, 1.0]), QuadratureSpec(Q)
        times, values = {}, {}
        for name in names:
            call = lambda: subject_logliks(y, X, Z, w, starts, beta, sigma, spec.family, quad, name)
            values[name] = call()
            times[name] = min(timeit.repeat(call, number=1, repeat=args.repeat)) * 1e3
        row = f"{label:<22}" + "".join(f"{times[n]:>14.3f}" for n in names)
        if len(names) > 1:
            diff = np.max(np.abs(values["cython"] - values["python"]))
            row += f"{times['python'] / times['cython']:>9.1f}x{diff:>12.1e}"
        print(row)

    spec = CASES[0][1]
    data = simulate_glmm(SimConfig(spec, (-0.5, 1.0), [[1.0]], 300, 5, seed=42))
    print("\nfull fit, N=300 p=5 (default quadrature):")
    for name in names:
        t = min(timeit.repeat(lambda: fit_glmm(data, spec, options=FitOptions(backend=name)), number=1, repeat=3))
        print(f"  {name:<8} {t:.3f} s")


if __name__ == "__main__":
    main()
