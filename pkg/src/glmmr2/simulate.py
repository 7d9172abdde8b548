"""Forward simulation of GLMM datasets and the added-predictor experiment.

Random numbers come from numpy's PCG64 bit generator seeded through
``SeedSequence``. For one dataset the draw order per unit is: random effects
(``L @ standard_normal(m)``), then covariates (``standard_normal((p_i, q-1))``
row-major), then outcomes (``random(p_i) < mu`` for Bernoulli,
``poisson(mu)`` for Poisson). Replicate ``r`` of an experiment with seed
``s`` uses ``SeedSequence([s, r])`` and draws its noise covariate after the
dataset.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .covariance import is_spd
from .data import INTERCEPT, Dataset, SubjectBlock
from .errors import DimensionError, GlmmError, NotPositiveDefiniteError
from .estimation import FitOptions, ModelSpec, fit_glmm, fit_null
from .family import FamilyKind, link_inverse
from .inference import NEGATIVE_LRT_TOLERANCE, lrt, r2_glmm
from .likelihood import QuadratureSpec

GENERATOR = f"numpy.random.PCG64 via SeedSequence (numpy {np.__version__})"


def make_rng(*keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(keys))))


@dataclass(frozen=True)
class SimConfig:
    """Generative parameters.

    ``design``, when given, is an ``(n, q-1)`` array of fixed covariates in
    long order and replaces the standard-normal draws. Random slopes must
    name fixed covariates.
    """

    spec: ModelSpec
    beta_true: tuple
    sigma_true: np.ndarray
    n_units: int
    per_unit: int | tuple = 4
    design: np.ndarray | None = field(default=None, repr=False)
    seed: int = 0

    def __post_init__(self):
        beta = np.asarray(self.beta_true, dtype=float).reshape(-1)
        sigma = np.atleast_2d(np.asarray(self.sigma_true, dtype=float))
        object.__setattr__(self, "beta_true", tuple(beta))
        object.__setattr__(self, "sigma_true", sigma)
        if beta.size != self.spec.q:
            raise DimensionError(f"beta_true needs {self.spec.q} entries")
        if sigma.shape != (self.spec.m, self.spec.m):
            raise DimensionError(f"sigma_true must be {self.spec.m}x{self.spec.m}")
        if not is_spd(sigma):
            raise NotPositiveDefiniteError("sigma_true must be positive definite")
        if self.n_units < 1:
            raise DimensionError("need at least one unit")
        sizes = self.sizes
        if len(sizes) != self.n_units or min(sizes) < 1:
            raise DimensionError("per_unit must be a positive count or one count per unit")
        for name in self.spec.random_slopes:
            if name not in self.spec.fixed_columns:
                raise DimensionError(f"random slope {name!r} must be a fixed covariate")
        if self.design is not None:
            d = np.asarray(self.design, dtype=float)
            if d.shape != (sum(sizes), self.spec.q - 1):
                raise DimensionError("design must be (n, q-1)")

    @property
    def sizes(self) -> tuple:
        if isinstance(self.per_unit, (int, np.integer)):
            return (int(self.per_unit),) * self.n_units
        return tuple(int(p) for p in self.per_unit)


def draw_random_effects(sigma, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` draws from ``N(0, sigma)`` as rows."""
    L = np.linalg.cholesky(np.atleast_2d(sigma))
    return rng.standard_normal((count, L.shape[0])) @ L.T


def _simulate(config: SimConfig, rng: np.random.Generator) -> Dataset:
    spec = config.spec
    beta = np.asarray(config.beta_true)
    L = np.linalg.cholesky(config.sigma_true)
    slope_idx = [1 + spec.fixed_columns.index(c) for c in spec.random_slopes]
    design = None if config.design is None else np.asarray(config.design, dtype=float)
    blocks = []
    row = 0
    for i, p in enumerate(config.sizes):
        u = L @ rng.standard_normal(spec.m)
        if design is None:
            cov = rng.standard_normal((p, spec.q - 1))
        else:
            cov = design[row:row + p]
        row += p
        X = np.hstack([np.ones((p, 1)), cov])
        cols = ([np.ones(p)] if spec.random_intercept else []) + [X[:, k] for k in slope_idx]
        Z = np.column_stack(cols)
        mu = np.asarray(link_inverse(spec.link, X @ beta + Z @ u)).reshape(-1)
        if spec.family.kind is FamilyKind.BERNOULLI:
            y = (rng.random(p) < mu).astype(float)
        else:
            y = rng.poisson(mu).astype(float)
        blocks.append(SubjectBlock(i + 1, y, X, Z))
    return Dataset(tuple(blocks), spec.x_names, spec.z_names)


def simulate_glmm(config: SimConfig) -> Dataset:
    """Draw one dataset; identical seeds give identical datasets."""
    return _simulate(config, make_rng(config.seed))


@dataclass(frozen=True)
class ReplicateResult:
    replicate: int
    r2_base: float = math.nan
    r2_augmented: float = math.nan
    lrt_base: float = math.nan
    lrt_augmented: float = math.nan
    loglik_null: float = math.nan
    loglik_base: float = math.nan
    loglik_augmented: float = math.nan
    converged: bool = False
    error: str = ""

    @property
    def delta(self) -> float:
        return self.r2_augmented - self.r2_base

    @property
    def failed(self) -> bool:
        return bool(self.error)

    @property
    def decreased(self) -> bool:
        """Augmented LRT lower than the base LRT by more than optimiser noise."""
        if self.failed:
            return False
        return self.lrt_augmented < self.lrt_base - 2.0 * NEGATIVE_LRT_TOLERANCE


@dataclass(frozen=True)
class ExperimentReport:
    rows: tuple
    seed: int
    generator: str = GENERATOR

    @property
    def n_failed(self) -> int:
        return sum(r.failed for r in self.rows)

    @property
    def n_ok(self) -> int:
        return len(self.rows) - self.n_failed

    @property
    def decrease_count(self) -> int:
        return sum(r.decreased for r in self.rows)

    @property
    def decrease_frequency(self) -> float:
        return self.decrease_count / self.n_ok if self.n_ok else math.nan

    @property
    def raw_decrease_count(self) -> int:
        """Replicates with any strictly lower augmented R^2, noise included."""
        return sum((not r.failed) and r.r2_augmented < r.r2_base for r in self.rows)

    @property
    def min_delta(self) -> float:
        deltas = [r.delta for r in self.rows if not r.failed]
        return min(deltas) if deltas else math.nan

    def summary(self) -> dict:
        return {
            "replicates": len(self.rows),
            "failed": self.n_failed,
            "decreases": self.decrease_count,
            "decrease_frequency": self.decrease_frequency,
            "raw_decreases": self.raw_decrease_count,
            "min_delta_r2": self.min_delta,
            "decrease_rule": "augmented LRT < base LRT - 2e-06",
            "seed": self.seed,
            "generator": self.generator,
        }


def run_replicate(base_config: SimConfig, replicate: int, seed: int, noise: str = "normal",
                  quad: QuadratureSpec | None = None, options: FitOptions | None = None) -> ReplicateResult:
    rng = make_rng(seed, replicate)
    data = _simulate(base_config, rng)
    spec = base_config.spec
    name = "noise"
    while name in data.x_names:
        name = "_" + name
    if noise == "zero":
        extra = np.zeros(data.n)
    else:
        extra = rng.standard_normal(data.n)
    aug_data = data.with_fixed_column(name, extra)
    aug_spec = ModelSpec(spec.family, spec.link, spec.fixed_columns + (name,),
                         spec.random_intercept, spec.random_slopes, spec.structure)
    try:
        null = fit_null(aug_data, spec, quad, options)
        base = fit_glmm(aug_data, spec, quad, options)
        aug = fit_glmm(aug_data, aug_spec, quad, options)
        r2b = r2_glmm(base, null, aug_data)
        r2a = r2_glmm(aug, null, aug_data)
    except GlmmError as exc:
        return ReplicateResult(replicate, error=f"{type(exc).__name__}: {exc}")
    return ReplicateResult(
        replicate,
        r2_base=r2b.value,
        r2_augmented=r2a.value,
        lrt_base=r2b.lrt_statistic,
        lrt_augmented=r2a.lrt_statistic,
        loglik_null=null.loglik,
        loglik_base=base.loglik,
        loglik_augmented=aug.loglik,
        converged=null.converged and base.converged and aug.converged,
    )


def added_predictor_experiment(base_config: SimConfig, replicates: int, seed: int,
                               noise: str = "normal", quad: QuadratureSpec | None = None,
                               options: FitOptions | None = None) -> ExperimentReport:
    """R^2 of the base model against the base model plus one noise covariate.

    Each replicate draws a fresh dataset from ``base_config`` and a fresh
    standard-normal noise covariate (``noise="zero"`` uses a column of zeros,
    which requires ``options.allow_aliased``). Both full models are compared
    against the same intercept-only null. Fit failures are recorded, not raised.
    """
    if replicates < 1:
        raise ValueError("need at least one replicate")
    if noise not in ("normal", "zero"):
        raise ValueError("noise must be 'normal' or 'zero'")
    rows = tuple(
        run_replicate(base_config, r, seed, noise, quad, options) for r in range(replicates)
    )
    return ExperimentReport(rows, seed)


def lrt_rejection_rate(config: SimConfig, replicates: int, seed: int, level: float = 0.05,
                       quad: QuadratureSpec | None = None, options: FitOptions | None = None):
    """Fraction of replicates whose LRT p-value falls below ``level``.

    Returns ``(rate, p_values, failures)``.
    """
    pvals = []
    failures = 0
    for r in range(replicates):
        data = _simulate(config, make_rng(seed, r))
        try:
            full = fit_glmm(data, config.spec, quad, options)
            null = fit_null(data, config.spec, quad, options)
            pvals.append(lrt(full, null).p_value)
        except GlmmError:
            failures += 1
    pvals = np.asarray(pvals)
    rate = float(np.mean(pvals < level)) if pvals.size else math.nan
    return rate, pvals, failures
