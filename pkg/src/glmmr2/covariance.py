"""Random-effects covariance structures and the normal mixing density.

The unconstrained vector ``alpha`` maps to ``Sigma = L @ L.T`` with ``L``
lower triangular. Diagonal entries of ``L`` are ``exp(alpha_k)``; for the
unstructured case the lower triangle is stored row by row,

    alpha = [log L00, L10, log L11, L20, L21, log L22, ...]

so the diagonal positions are the triangular numbers ``i*(i+3)/2``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import DimensionError, DomainError, NotPositiveDefiniteError

LN2PI = math.log(2.0 * math.pi)

#: Lower box limit on the log-diagonal parameters during optimisation.
ALPHA_DIAG_MIN = -15.0


class CovarianceKind(str, enum.Enum):
    SCALAR = "scalar"
    DIAGONAL = "diagonal"
    UNSTRUCTURED = "unstructured"


@dataclass(frozen=True)
class CovarianceStructure:
    kind: CovarianceKind
    m: int

    def __post_init__(self):
        object.__setattr__(self, "kind", CovarianceKind(self.kind))
        if self.m < 1:
            raise DimensionError("random-effect dimension must be at least 1")
        if self.kind is CovarianceKind.SCALAR and self.m != 1:
            raise DimensionError("scalar covariance requires m == 1")

    @property
    def n_params(self) -> int:
        if self.kind is CovarianceKind.UNSTRUCTURED:
            return self.m * (self.m + 1) // 2
        if self.kind is CovarianceKind.DIAGONAL:
            return self.m
        return 1

    @property
    def diag_index(self) -> np.ndarray:
        """Positions in ``alpha`` that hold log-diagonal entries of ``L``."""
        if self.kind is CovarianceKind.UNSTRUCTURED:
            i = np.arange(self.m)
            return i * (i + 3) // 2
        return np.arange(self.n_params)


def _check_alpha(structure, alpha):
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    if alpha.size != structure.n_params:
        raise DimensionError(
            f"{structure.kind.value} covariance with m={structure.m} takes "
            f"{structure.n_params} parameters, got {alpha.size}"
        )
    if not np.all(np.isfinite(alpha)):
        raise DomainError("covariance parameters must be finite")
    return alpha


def cholesky_factor(structure: CovarianceStructure, alpha) -> np.ndarray:
    """Lower-triangular ``L`` with ``Sigma = L @ L.T``."""
    alpha = _check_alpha(structure, alpha)
    m = structure.m
    if structure.kind is not CovarianceKind.UNSTRUCTURED:
        return np.diag(np.exp(alpha)) if m > 1 else np.exp(alpha).reshape(1, 1)
    L = np.zeros((m, m))
    L[np.tril_indices(m)] = alpha
    d = np.arange(m)
    L[d, d] = np.exp(L[d, d])
    return L


def build_sigma(structure: CovarianceStructure, alpha) -> np.ndarray:
    L = cholesky_factor(structure, alpha)
    return L @ L.T


def alpha_from_sigma(structure: CovarianceStructure, sigma) -> np.ndarray:
    """Inverse of :func:`build_sigma`."""
    sigma = np.asarray(sigma, dtype=float)
    m = structure.m
    if sigma.shape != (m, m):
        raise DimensionError(f"expected a {m}x{m} matrix, got shape {sigma.shape}")
    if structure.kind is not CovarianceKind.UNSTRUCTURED:
        off = sigma - np.diag(np.diag(sigma))
        if np.any(off != 0.0):
            raise DomainError(f"{structure.kind.value} covariance must be diagonal")
        d = np.diag(sigma)
        if np.any(d <= 0.0):
            raise NotPositiveDefiniteError("variances must be positive")
        return 0.5 * np.log(d)
    try:
        L = linalg.cholesky(sigma, lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefiniteError("covariance matrix is not positive definite") from None
    d = np.arange(m)
    L[d, d] = np.log(L[d, d])
    return L[np.tril_indices(m)]


def default_alpha(structure: CovarianceStructure, variance=0.25) -> np.ndarray:
    """Encoding of ``variance * I``."""
    return alpha_from_sigma(structure, variance * np.eye(structure.m))


def is_spd(sigma) -> bool:
    try:
        linalg.cholesky(np.asarray(sigma, dtype=float), lower=True)
    except linalg.LinAlgError:
        return False
    return True


def log_normal_density(u, sigma) -> float:
    """``log N(u; 0, sigma)`` via a Cholesky factor, no explicit inverse."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.shape != (u.size, u.size):
        raise DimensionError("u and sigma dimensions disagree")
    try:
        L = linalg.cholesky(sigma, lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefiniteError("covariance matrix is not positive definite") from None
    z = linalg.solve_triangular(L, u, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (u.size * LN2PI + logdet + z @ z))


def precision_terms(sigma):
    """``(Sigma^{-1}, log det Sigma)`` for the likelihood kernels."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    try:
        c = linalg.cho_factor(sigma, lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefiniteError("covariance matrix is not positive definite") from None
    inv = linalg.cho_solve(c, np.eye(sigma.shape[0]))
    inv = 0.5 * (inv + inv.T)
    return inv, 2.0 * float(np.sum(np.log(np.diag(c[0]))))
