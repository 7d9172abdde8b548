import os
import subprocess
import sys

import numpy as np
import pytest

from glmmr2 import _backend
from glmmr2.estimation import ModelSpec
from glmmr2.family import BERNOULLI, POISSON, Link
from glmmr2.likelihood import QuadratureSpec, subject_logliks
from glmmr2.simulate import SimConfig, simulate_glmm

needs_compiled = pytest.mark.skipif("cython" not in _backend.KERNELS, reason="extension not built")

CASES = {
    "bernoulli-m1": (ModelSpec(BERNOULLI, Link.LOGIT, ("x",)), (-0.5, 1.0), [[1.0]]),
    "poisson-m1": (ModelSpec(POISSON, Link.LOG, ("x",)), (0.2, 0.5), [[0.5]]),
    "bernoulli-m2": (
        ModelSpec(BERNOULLI, Link.LOGIT, ("x",), random_slopes=("x",)),
        (0.1, 0.7),
        [[1.0, 0.2], [0.2, 0.5]],
    ),
}


def _packed(case, seed=3):
    spec, beta, sigma = CASES[case]
    data = simulate_glmm(SimConfig(spec, beta, sigma, 40, 5, seed=seed))
    return data.packed(), np.array(beta), np.array(sigma), spec.family


class TestSelection:
    def test_python_always_available(self):
        assert "python" in _backend.KERNELS
        assert _backend.BACKEND in _backend.KERNELS

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            _backend.get_kernel("fortran")

    def test_environment_forces_fallback(self):
        env = dict(os.environ, GLMMR2_BACKEND="python")
        out = subprocess.run(
            [sys.executable, "-c", "from glmmr2 import _backend; print(_backend.BACKEND)"],
            env=env, capture_output=True, text=True, check=True,
        )
        assert out.stdout.strip() == "python"

    @needs_compiled
    def test_compiled_is_default(self):
        env = {k: v for k, v in os.environ.items() if k != "GLMMR2_BACKEND"}
        out = subprocess.run(
            [sys.executable, "-c", "from glmmr2 import _backend; print(_backend.BACKEND)"],
            env=env, capture_output=True, text=True, check=True,
        )
        assert out.stdout.strip() == "cython"


@needs_compiled
@pytest.mark.parametrize("case", sorted(CASES))
@pytest.mark.parametrize("Q", [1, 5, 15])
def test_backends_agree(case, Q):
    (y, X, Z, w, starts), beta, sigma, family = _packed(case)
    res = {
        name: subject_logliks(y, X, Z, w, starts, beta, sigma, family, QuadratureSpec(Q), name, return_modes=True)
        for name in ("python", "cython")
    }
    for a, b in zip(res["python"], res["cython"]):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-11)


@needs_compiled
def test_backends_agree_near_boundary():
    (y, X, Z, w, starts), beta, _, family = _packed("bernoulli-m1")
    for var in (1e-12, 1e-6, 25.0):
        a = subject_logliks(y, X, Z, w, starts, beta, [[var]], family, QuadratureSpec(), "python")
        b = subject_logliks(y, X, Z, w, starts, beta, [[var]], family, QuadratureSpec(), "cython")
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-11)
