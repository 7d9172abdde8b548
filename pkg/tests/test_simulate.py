import io
import math

import numpy as np
import pytest

from glmmr2.errors import DimensionError, NotPositiveDefiniteError
from glmmr2.estimation import FitOptions, ModelSpec
from glmmr2.family import BERNOULLI, POISSON, Link
from glmmr2.simulate import (
    GENERATOR,
    SimConfig,
    added_predictor_experiment,
    draw_random_effects,
    lrt_rejection_rate,
    make_rng,
    simulate_glmm,
)

LOGIT = ModelSpec(BERNOULLI, Link.LOGIT, ("x",))


def csv_bytes(data):
    buf = io.StringIO()
    data.to_csv(buf)
    return buf.getvalue().encode()


class TestSimulateGlmm:
    def test_same_seed_same_bytes(self):
        cfg = SimConfig(LOGIT, (-0.5, 1.0), [[1.0]], 30, 4, seed=42)
        a, b = simulate_glmm(cfg), simulate_glmm(cfg)
        assert csv_bytes(a) == csv_bytes(b)
        assert a.fingerprint() == b.fingerprint()

    def test_different_seed_differs(self):
        a = simulate_glmm(SimConfig(LOGIT, (-0.5, 1.0), [[1.0]], 30, 4, seed=1))
        b = simulate_glmm(SimConfig(LOGIT, (-0.5, 1.0), [[1.0]], 30, 4, seed=2))
        assert a.fingerprint() != b.fingerprint()

    def test_balanced_mean(self):
        spec = ModelSpec(BERNOULLI, Link.LOGIT)
        data = simulate_glmm(SimConfig(spec, (0.0,), [[1e-12]], 2000, 1, seed=0))
        assert abs(data.packed()[0].mean() - 0.5) <= 0.03

    def test_shape(self):
        data = simulate_glmm(SimConfig(LOGIT, (0.0, 1.0), [[1.0]], 10, 4, seed=0))
        assert data.N == 10 and data.n == 40
        assert data.x_names == ("(Intercept)", "x")

    def test_unbalanced_sizes(self):
        data = simulate_glmm(SimConfig(LOGIT, (0.0, 1.0), [[1.0]], 3, (1, 2, 5), seed=0))
        assert [b.p for b in data.blocks] == [1, 2, 5]

    def test_outcome_domains(self):
        y = simulate_glmm(SimConfig(LOGIT, (0.0, 1.0), [[2.0]], 200, 5, seed=3)).packed()[0]
        assert set(np.unique(y)) <= {0.0, 1.0}
        spec = ModelSpec(POISSON, Link.LOG, ("x",))
        y = simulate_glmm(SimConfig(spec, (1.0, 0.5), [[0.5]], 200, 5, seed=3)).packed()[0]
        assert np.all(y >= 0) and np.all(y == np.floor(y))

    def test_fixed_design(self):
        design = np.arange(12.0).reshape(12, 1)
        data = simulate_glmm(SimConfig(LOGIT, (0.0, 0.1), [[1.0]], 3, 4, design=design, seed=0))
        np.testing.assert_array_equal(data.packed()[1][:, 1], design[:, 0])

    def test_random_slope_design(self):
        spec = ModelSpec(BERNOULLI, Link.LOGIT, ("x",), random_slopes=("x",))
        data = simulate_glmm(SimConfig(spec, (0.0, 1.0), np.eye(2), 5, 3, seed=0))
        for b in data.blocks:
            np.testing.assert_array_equal(b.Z, b.X)

    def test_config_validation(self):
        with pytest.raises(DimensionError):
            SimConfig(LOGIT, (0.0,), [[1.0]], 5, 2)
        with pytest.raises(NotPositiveDefiniteError):
            SimConfig(LOGIT, (0.0, 1.0), [[-1.0]], 5, 2)
        with pytest.raises(DimensionError):
            SimConfig(LOGIT, (0.0, 1.0), [[1.0]], 2, (1, 2, 3))
        with pytest.raises(DimensionError):
            SimConfig(ModelSpec(BERNOULLI, Link.LOGIT, random_slopes=("t",)), (0.0,), np.eye(2), 2, 2)


def test_random_effect_covariance():
    sigma = np.array([[1.0, 0.4], [0.4, 0.5]])
    u = draw_random_effects(sigma, 100_000, make_rng(7))
    emp = np.cov(u, rowvar=False, bias=True)
    n = u.shape[0]
    # Var of the sample covariance of a normal pair: (s_ij^2 + s_ii s_jj) / n
    se = np.sqrt((sigma ** 2 + np.outer(np.diag(sigma), np.diag(sigma))) / n)
    assert np.all(np.abs(emp - sigma) <= 5 * se)


def test_generator_is_named():
    assert "PCG64" in GENERATOR and "SeedSequence" in GENERATOR


class TestAddedPredictor:
    BASE = SimConfig(LOGIT, (-0.5, 0.8), [[1.0]], 60, 4)

    def test_zero_noise_no_change(self):
        report = added_predictor_experiment(self.BASE, 1, seed=3, noise="zero", options=FitOptions(allow_aliased=True))
        row = report.rows[0]
        assert not row.failed
        assert abs(row.delta) <= 1e-6
        assert report.decrease_count == 0

    def test_deterministic(self):
        a = added_predictor_experiment(self.BASE, 3, seed=11)
        b = added_predictor_experiment(self.BASE, 3, seed=11)
        assert a == b
        assert a.summary() == b.summary()

    def test_report_contents(self):
        report = added_predictor_experiment(self.BASE, 4, seed=5)
        s = report.summary()
        assert s["replicates"] == 4 and s["failed"] == 0
        assert 0.0 <= s["decrease_frequency"] <= 1.0
        assert s["generator"] == GENERATOR
        for row in report.rows:
            assert row.loglik_augmented >= row.loglik_base - 1e-6 >= row.loglik_null - 2e-6
            assert row.r2_base == pytest.approx(-math.expm1(-row.lrt_base / 240), abs=1e-15)

    def test_replicates_use_independent_streams(self):
        a = added_predictor_experiment(self.BASE, 2, seed=11)
        b = added_predictor_experiment(self.BASE, 1, seed=11)
        assert a.rows[0] == b.rows[0]
        assert a.rows[1].r2_base != a.rows[0].r2_base

    def test_invalid(self):
        with pytest.raises(ValueError):
            added_predictor_experiment(self.BASE, 0, seed=1)
        with pytest.raises(ValueError):
            added_predictor_experiment(self.BASE, 1, seed=1, noise="uniform")


def test_rejection_rate_small():
    cfg = SimConfig(LOGIT, (-0.5, 0.0), [[1.0]], 50, 4)
    rate, pvals, failures = lrt_rejection_rate(cfg, 10, seed=1)
    assert failures == 0 and pvals.size == 10
    assert 0.0 <= rate <= 1.0
    assert np.all((pvals >= 0) & (pvals <= 1))
