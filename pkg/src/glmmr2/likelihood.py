"""Marginal log-likelihood of a GLMM by adaptive Gauss-Hermite quadrature.

For one subject the integrand ``prod_j f(y_j | u) * N(u; 0, Sigma)`` is
centred at its mode ``u_hat`` and rescaled by the Cholesky factor ``L`` of
the negative Hessian there::

    log int = m/2 log 2 - log|L| + logsumexp_k(log w_k + |t_k|^2 + g(u_hat + sqrt(2) L^{-T} t_k))

With one node per dimension this is the Laplace approximation. The
trapezoid-rule oracle below shares none of this machinery.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import gammaln

from . import _backend, _kernels_py
from .covariance import CovarianceStructure, build_sigma, precision_terms
from .errors import DimensionError, ModeFailureError, UnsupportedDimensionError
from .family import Family, FamilyKind, Link, check_outcomes, check_pair, link_inverse, log_density

LN2PI = math.log(2.0 * math.pi)
DEFAULT_NODES = {1: 15, 2: 9}


@dataclass(frozen=True)
class QuadratureSpec:
    """Nodes per random-effect dimension and whether to centre on the mode.

    ``nodes_per_dim=None`` resolves to 15 for ``m == 1`` and 9 for ``m == 2``.
    """

    nodes_per_dim: int | None = None
    adaptive: bool = True

    def __post_init__(self):
        if self.nodes_per_dim is not None and self.nodes_per_dim < 1:
            raise ValueError("need at least one quadrature node")

    def resolve(self, m: int) -> "QuadratureSpec":
        Q = self.nodes_per_dim
        if Q is None:
            Q = DEFAULT_NODES.get(m, 1)
        if Q > 1 and m > 2:
            raise UnsupportedDimensionError(
                "tensor-product quadrature is limited to m <= 2; use nodes_per_dim=1 (Laplace)"
            )
        return QuadratureSpec(Q, self.adaptive)

    @property
    def is_laplace(self) -> bool:
        return self.adaptive and self.nodes_per_dim == 1


@dataclass(frozen=True)
class ModeResult:
    u_hat: np.ndarray
    neg_hessian: np.ndarray
    iterations: int


@lru_cache(maxsize=None)
def hermite_grid(Q: int, m: int):
    """Tensor Hermite nodes ``(K, m)`` and their log weights ``(K,)``."""
    t, wt = hermgauss(Q)
    grids = np.meshgrid(*([t] * m), indexing="ij")
    nodes = np.ascontiguousarray(np.stack([g.ravel() for g in grids], axis=1))
    lw = np.meshgrid(*([np.log(wt)] * m), indexing="ij")
    log_w = np.sum([g.ravel() for g in lw], axis=0)
    for a in (nodes, log_w):
        a.setflags(write=False)
    return nodes, log_w


def fixed_sum(values) -> float:
    """Order-independent, correctly rounded sum of per-subject terms."""
    return math.fsum(values)


def _family_code(family: Family) -> int:
    return 0 if family.kind is FamilyKind.BERNOULLI else 1


def log_factorials(family: Family, y) -> np.ndarray:
    if family.kind is FamilyKind.POISSON:
        return gammaln(np.asarray(y, dtype=float) + 1.0)
    return np.zeros(np.shape(y))


def subject_logliks(y, X, Z, w, starts, beta, sigma, family: Family, quad: QuadratureSpec,
                    backend=None, cy=None, return_modes=False):
    """Per-subject marginal log-likelihoods for packed arrays.

    Raises :class:`ModeFailureError` naming the first failing subject.
    """
    m = Z.shape[1]
    quad = quad.resolve(m)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    eta0 = np.ascontiguousarray(X @ np.asarray(beta, dtype=float))
    if cy is None:
        cy = log_factorials(family, y)
    fam = _family_code(family)
    nodes, log_w = hermite_grid(quad.nodes_per_dim, m)
    if not quad.adaptive:
        L = np.linalg.cholesky(sigma)
        return _kernels_py.gh_logliks(eta0, Z, y, w, cy, starts, L, nodes, log_w, fam)
    sinv, logdet = precision_terms(sigma)
    logw = np.ascontiguousarray(log_w + np.sum(nodes ** 2, axis=1))
    kernel = _backend.get_kernel(backend)
    out, modes, hess, iters, status = kernel(
        eta0, np.ascontiguousarray(Z, dtype=float), np.ascontiguousarray(y, dtype=float),
        np.ascontiguousarray(w, dtype=float), np.ascontiguousarray(cy, dtype=float),
        np.ascontiguousarray(starts, dtype=np.intp), np.ascontiguousarray(sinv),
        float(logdet), nodes, logw, fam,
    )
    bad = np.flatnonzero(np.asarray(status) != 0)
    if bad.size:
        i = int(bad[0])
        raise ModeFailureError(i, np.asarray(modes[i]))
    if return_modes:
        return out, modes, hess, iters
    return out


def _block_arrays(block, m=None):
    Z = block.Z
    if m is not None and Z.shape[1] != m:
        raise DimensionError("random-effect design does not match sigma")
    starts = np.array([0, block.p], dtype=np.intp)
    return block.y, block.X, Z, block.w, starts


def _prepare(block, beta, sigma, family, link):
    family_ = family
    check_pair(family_, Link(link))
    check_outcomes(family_, block.y)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.size != block.X.shape[1]:
        raise DimensionError(f"beta has {beta.size} entries, design has {block.X.shape[1]} columns")
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.shape != (block.Z.shape[1],) * 2:
        raise DimensionError("sigma does not match the random-effect design")
    return beta, sigma


def conditional_loglik_subject(block, beta, u, family: Family, link: Link) -> float:
    """Sum over the rows of ``log f(y_ij | h(x_ij'beta + z_ij'u))``."""
    check_pair(family, Link(link))
    beta = np.asarray(beta, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if beta.size != block.X.shape[1] or u.size != block.Z.shape[1]:
        raise DimensionError("beta or u does not match the block design")
    mu = link_inverse(link, block.X @ beta + block.Z @ u)
    return float(np.sum(log_density(family, block.y, mu, block.w)))


def find_conditional_mode(block, beta, sigma, family: Family, link: Link, backend=None) -> ModeResult:
    """Damped Newton maximisation of the joint log-density from ``u = 0``."""
    beta, sigma = _prepare(block, beta, sigma, family, link)
    y, X, Z, w, starts = _block_arrays(block)
    _, modes, hess, iters = subject_logliks(
        y, X, Z, w, starts, beta, sigma, family, QuadratureSpec(1), backend, return_modes=True
    )
    return ModeResult(np.array(modes[0]), np.array(hess[0]), int(iters[0]))


def marginal_loglik_subject(block, beta, sigma, family: Family, link: Link,
                            quad: QuadratureSpec = QuadratureSpec(), backend=None) -> float:
    beta, sigma = _prepare(block, beta, sigma, family, link)
    y, X, Z, w, starts = _block_arrays(block)
    return float(subject_logliks(y, X, Z, w, starts, beta, sigma, family, quad, backend)[0])


def oracle_marginal_loglik_subject(block, beta, sigma, family: Family, link: Link,
                                   points: int = 20001, width: float = 10.0) -> float:
    """Trapezoid-rule marginal log-likelihood over ``u in [-10 sd, 10 sd]`` (m = 1 only)."""
    if block.Z.shape[1] != 1:
        raise UnsupportedDimensionError("the trapezoid oracle handles one random effect only")
    beta, sigma = _prepare(block, beta, sigma, family, link)
    sd = math.sqrt(float(sigma[0, 0]))
    u = np.linspace(-width * sd, width * sd, points)
    eta = (block.X @ beta)[:, None] + block.Z[:, 0][:, None] * u[None, :]
    mu = link_inverse(link, eta)
    cond = np.sum(log_density(family, block.y[:, None], mu, block.w[:, None]), axis=0)
    prior = -0.5 * (LN2PI + 2.0 * math.log(sd)) - 0.5 * (u / sd) ** 2
    vals = cond + prior
    top = vals.max()
    e = np.exp(vals - top)
    h = u[1] - u[0]
    return float(top + math.log(h * (e.sum() - 0.5 * (e[0] + e[-1]))))


def marginal_loglik(dataset, beta, alpha, structure: CovarianceStructure, family: Family,
                    link: Link, quad: QuadratureSpec = QuadratureSpec(), backend=None) -> float:
    """Sum of subject marginal log-likelihoods; independent of subject order."""
    check_pair(family, Link(link))
    if structure.m != dataset.m:
        raise DimensionError("covariance structure does not match the random-effect design")
    y, X, Z, w, starts = dataset.packed()
    check_outcomes(family, y)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.size != dataset.q:
        raise DimensionError(f"beta has {beta.size} entries, dataset has q={dataset.q}")
    sigma = build_sigma(structure, alpha)
    return fixed_sum(subject_logliks(y, X, Z, w, starts, beta, sigma, family, quad, backend))
