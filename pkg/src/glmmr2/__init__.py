"""Maximum-likelihood GLMMs for clustered discrete outcomes and the LRT-based R^2 for fixed effects."""
from ._backend import BACKEND
from .covariance import CovarianceKind, CovarianceStructure, build_sigma, log_normal_density
from .data import CsvSchema, Dataset, ObservationRow, SubjectBlock, dichotomize_bp, load_long_csv
from .estimation import FitOptions, FittedModel, GlmFit, ModelSpec, fit_glm_irls, fit_glmm, fit_null
from .family import BERNOULLI, POISSON, Family, FamilyKind, Link
from .inference import (
    DenominatorKind,
    LrtResult,
    R2Result,
    WaldResult,
    chisq_sf,
    lrt,
    r2_from_lrt,
    r2_glm,
    r2_glmm,
    wald_test,
)
from .likelihood import QuadratureSpec, marginal_loglik
from .simulate import SimConfig, added_predictor_experiment, simulate_glmm

__version__ = "0.1.0"
