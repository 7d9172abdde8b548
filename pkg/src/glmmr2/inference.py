"""Likelihood ratio and Wald tests for the fixed effects, and the LRT-based R^2.

``R^2_L = 1 - exp(-LRT / d)`` where the denominator ``d`` is either the
number of independent units ``N`` (the classical GLM statistic) or the total
number of observations ``n = sum p_i`` (the GLMM statistic). Which one was
used is recorded on the result.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import (
    DomainError,
    GlmmError,
    IncomparableModelsError,
    OptimizationInconsistencyError,
    PreconditionError,
    SingularCovarianceError,
)

#: Largest negative raw LRT treated as optimiser noise and clamped to zero.
NEGATIVE_LRT_TOLERANCE = 1e-6

_TINY = 1e-300
_EPS = 1e-16
_BELOW_ONE = math.nextafter(1.0, 0.0)


class DenominatorKind(str, enum.Enum):
    UNITS = "units"
    OBSERVATIONS = "observations"


@dataclass(frozen=True)
class LrtResult:
    statistic: float
    df: int
    p_value: float
    clamped: bool = False
    raw_statistic: float = 0.0


@dataclass(frozen=True)
class R2Result:
    value: float
    denominator: int
    denominator_kind: DenominatorKind
    lrt_statistic: float


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float


# ----------------------------------------------------------------------
# chi-square upper tail via the regularised incomplete gamma function
# ----------------------------------------------------------------------


def _gamma_p_series(a, x):
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a, x):
    # modified Lentz evaluation of the Legendre continued fraction
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularised upper incomplete gamma ``Q(a, x)``."""
    if a <= 0:
        raise DomainError("shape must be positive")
    if x < 0 or math.isnan(x):
        raise DomainError("argument must be nonnegative")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _gamma_p_series(a, x))
    return min(1.0, _gamma_q_contfrac(a, x))


def chisq_sf(x: float, df: int) -> float:
    """Upper-tail probability of the chi-square distribution with ``df`` degrees of freedom."""
    if not x >= 0:
        raise DomainError(f"chi-square statistic must be nonnegative, got {x!r}")
    if df < 1:
        raise DomainError("degrees of freedom must be positive")
    return gamma_q(0.5 * df, 0.5 * x)


# ----------------------------------------------------------------------
# R^2
# ----------------------------------------------------------------------


def r2_from_lrt(statistic: float, denominator: int, kind=DenominatorKind.OBSERVATIONS) -> R2Result:
    if not statistic >= 0:
        raise DomainError("LRT statistic must be nonnegative")
    if denominator < 1:
        raise DomainError("denominator must be at least 1")
    # Past statistic/denominator ~ 37 the exact value rounds to 1.0; round down
    # instead so the result stays strictly below one.
    value = min(-math.expm1(-statistic / denominator), _BELOW_ONE)
    return R2Result(value, int(denominator), DenominatorKind(kind), float(statistic))


def _compare(full, null):
    fs, ns = full.spec, null.spec
    checks = [
        (fs.family == ns.family, "family"),
        (fs.link == ns.link, "link"),
        (fs.covariance == ns.covariance, "covariance structure"),
        (fs.z_names == ns.z_names, "random-effect design"),
        (full.quad == null.quad, "quadrature"),
        (full.data_fingerprint == null.data_fingerprint, "dataset"),
    ]
    for ok, what in checks:
        if not ok:
            raise IncomparableModelsError(f"full and null fits differ in {what}")
    if not set(ns.fixed_columns) <= set(fs.fixed_columns):
        raise IncomparableModelsError("null mean model is not nested in the full mean model")


def _clamp(raw):
    if raw < -NEGATIVE_LRT_TOLERANCE:
        raise OptimizationInconsistencyError(
            f"null model fits better than the full model (raw LRT {raw:.3g}); refit"
        )
    return (0.0, True) if raw < 0 else (raw, False)


def lrt(full, null) -> LrtResult:
    """Likelihood ratio test of the null mean model against the full one.

    Both fits must share family, link, random-effects structure, quadrature
    and data. ``df`` counts estimated (non-aliased) fixed effects; when the two
    mean models coincide it is 0 and the p-value is 1.
    """
    _compare(full, null)
    raw = -2.0 * (null.loglik - full.loglik)
    stat, clamped = _clamp(raw)
    df = full.rank - null.rank
    if df < 0:
        raise IncomparableModelsError("null model has more fixed effects than the full model")
    p = 1.0 if df == 0 else chisq_sf(stat, df)
    return LrtResult(stat, df, p, clamped, raw)


def r2_glmm(full, null, dataset) -> R2Result:
    """GLMM R^2 with denominator ``n``, the total number of observations."""
    if dataset.fingerprint() != full.data_fingerprint:
        raise IncomparableModelsError("dataset is not the one the models were fitted to")
    test = lrt(full, null)
    return r2_from_lrt(test.statistic, dataset.total_observations(), DenominatorKind.OBSERVATIONS)


def r2_glmm_units(full, null, dataset) -> R2Result:
    """Same LRT with the number of units ``N`` as denominator."""
    if dataset.fingerprint() != full.data_fingerprint:
        raise IncomparableModelsError("dataset is not the one the models were fitted to")
    test = lrt(full, null)
    return r2_from_lrt(test.statistic, dataset.N, DenominatorKind.UNITS)


def lrt_glm(full, null, df: int) -> LrtResult:
    raw = 2.0 * (full.loglik - null.loglik)
    stat, clamped = _clamp(raw)
    p = 1.0 if df == 0 else chisq_sf(stat, df)
    return LrtResult(stat, df, p, clamped, raw)


def r2_glm(full, null, N: int) -> R2Result:
    """Classical R^2_L for two nested GLM fits on ``N`` independent units."""
    stat, _ = _clamp(2.0 * (full.loglik - null.loglik))
    return r2_from_lrt(stat, N, DenominatorKind.UNITS)


# ----------------------------------------------------------------------
# Wald
# ----------------------------------------------------------------------


def default_contrast(fit) -> np.ndarray:
    """``[0 | I]`` over the estimated non-intercept coefficients."""
    q = fit.spec.q
    keep = [k for k in range(1, q) if fit.aliased is None or not fit.aliased[k]]
    C = np.zeros((len(keep), q))
    C[np.arange(len(keep)), keep] = 1.0
    return C


def wald_test(fit, C=None) -> WaldResult:
    """Wald test of ``C beta = 0`` using the inverse finite-difference Hessian."""
    if not fit.converged:
        raise PreconditionError("Wald test needs a converged fit")
    C = default_contrast(fit) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[1] != fit.spec.q:
        raise DomainError(f"contrast needs {fit.spec.q} columns")
    df = int(np.linalg.matrix_rank(C))
    if df < C.shape[0] or df == 0:
        raise DomainError("contrast matrix must have full row rank")
    try:
        V = fit.beta_covariance()
    except GlmmError as exc:
        raise SingularCovarianceError(str(exc)) from None
    cb = C @ fit.beta_hat
    M = C @ V @ C.T
    try:
        c = linalg.cho_factor(M)
    except linalg.LinAlgError:
        raise SingularCovarianceError("C V C' is singular") from None
    stat = float(cb @ linalg.cho_solve(c, cb))
    stat = max(stat, 0.0)
    return WaldResult(stat, df, chisq_sf(stat, df))
