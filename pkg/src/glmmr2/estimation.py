"""Maximum-likelihood fitting of the full and intercept-only GLMMs, plus IRLS for GLMs.

The GLMM objective is the negative marginal log-likelihood over
``theta = (beta, alpha)``. It is minimised by a projected BFGS with central
finite-difference gradients (the log-diagonal entries of ``alpha`` are boxed
below at ``ALPHA_DIAG_MIN``), followed by a few Newton steps on a
finite-difference Hessian.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .covariance import (
    ALPHA_DIAG_MIN,
    CovarianceKind,
    CovarianceStructure,
    build_sigma,
    default_alpha,
)
from .data import INTERCEPT, Dataset
from .errors import DimensionError, GlmmError, ModeFailureError, OutcomeError, SingularDesignError
from .family import (
    EPS,
    Family,
    FamilyKind,
    Link,
    check_outcomes,
    check_pair,
    get_family,
    get_link,
    log_density,
    link_inverse,
    mean_eta,
)
from .likelihood import QuadratureSpec, fixed_sum, log_factorials, subject_logliks

GRAD_STEP = 1e-6
HESS_STEP = 1e-4


@dataclass(frozen=True)
class ModelSpec:
    """Mean and random-effects structure of a GLMM.

    ``fixed_columns`` never includes the intercept, which is always present.
    """

    family: Family
    link: Link
    fixed_columns: tuple = ()
    random_intercept: bool = True
    random_slopes: tuple = ()
    structure: CovarianceKind | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", get_family(self.family))
        object.__setattr__(self, "link", get_link(self.link))
        object.__setattr__(self, "fixed_columns", tuple(self.fixed_columns))
        object.__setattr__(self, "random_slopes", tuple(self.random_slopes))
        check_pair(self.family, self.link)
        if INTERCEPT in self.fixed_columns:
            raise DimensionError("the intercept is implicit; do not list it")
        if len(set(self.fixed_columns)) != len(self.fixed_columns):
            raise DimensionError("duplicate fixed-effect columns")
        if self.m < 1:
            raise DimensionError("need a random intercept or at least one random slope")
        kind = self.structure
        if kind is None:
            kind = CovarianceKind.SCALAR if self.m == 1 else CovarianceKind.UNSTRUCTURED
        object.__setattr__(self, "structure", CovarianceKind(kind))
        self.covariance  # validates kind against m

    @property
    def q(self) -> int:
        return 1 + len(self.fixed_columns)

    @property
    def m(self) -> int:
        return int(self.random_intercept) + len(self.random_slopes)

    @property
    def x_names(self) -> tuple:
        return (INTERCEPT,) + self.fixed_columns

    @property
    def z_names(self) -> tuple:
        return ((INTERCEPT,) if self.random_intercept else ()) + self.random_slopes

    @property
    def covariance(self) -> CovarianceStructure:
        return CovarianceStructure(self.structure, self.m)

    def null(self) -> "ModelSpec":
        """Intercept-only mean model with the identical random-effects structure."""
        return replace(self, fixed_columns=())


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 500
    rel_tol: float = 1e-9
    grad_tol: float = 1e-5
    #: hold the variance components at this ``alpha`` instead of estimating them
    fixed_alpha: tuple | None = None
    #: fix coefficients of linearly dependent columns at zero instead of raising
    allow_aliased: bool = False
    start_variance: float = 0.25
    backend: str | None = None


@dataclass(frozen=True)
class GlmFit:
    beta_hat: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    max_score: float = float("nan")


@dataclass(frozen=True)
class FittedModel:
    spec: ModelSpec
    beta_hat: np.ndarray
    alpha_hat: np.ndarray
    sigma_hat: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    quad: QuadratureSpec
    gradient_norm: float
    boundary: bool = False
    variance_fixed: bool = False
    #: finite-difference Hessian of the negative log-likelihood over ``theta``
    hessian: np.ndarray | None = field(default=None, repr=False)
    #: which entries of ``theta = (beta, alpha)`` were optimised
    free: np.ndarray | None = field(default=None, repr=False)
    aliased: np.ndarray | None = field(default=None, repr=False)
    data_fingerprint: str = ""
    n_units: int = 0
    n_obs: int = 0
    evaluations: int = 0

    @property
    def q(self) -> int:
        return self.spec.q

    @property
    def rank(self) -> int:
        """Number of estimated (non-aliased) fixed effects."""
        if self.aliased is None:
            return self.spec.q
        return int(self.spec.q - np.sum(self.aliased))

    def beta_covariance(self) -> np.ndarray:
        """Covariance of ``beta_hat`` from the inverse Hessian over the free parameters.

        Aliased coefficients get zero rows and columns.
        """
        if self.hessian is None:
            raise GlmmError("fit carries no Hessian")
        free = np.asarray(self.free, dtype=bool)
        Hf = self.hessian[np.ix_(free, free)]
        try:
            c = linalg.cho_factor(Hf)
        except linalg.LinAlgError:
            raise GlmmError("Hessian is not positive definite at the optimum") from None
        V = linalg.cho_solve(c, np.eye(Hf.shape[0]))
        full = np.zeros((free.size, free.size))
        full[np.ix_(free, free)] = V
        q = self.spec.q
        return full[:q, :q]

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.beta_covariance()))


# ----------------------------------------------------------------------
# design helpers
# ----------------------------------------------------------------------


def _check_spec(dataset: Dataset, spec: ModelSpec):
    if spec.z_names != dataset.z_names:
        raise DimensionError(
            f"random-effect design {spec.z_names} does not match the dataset's {dataset.z_names}"
        )
    y = dataset.packed()[0]
    try:
        check_outcomes(spec.family, y)
    except OutcomeError:
        raise
    except Exception as exc:
        raise OutcomeError(str(exc)) from None


def _canonical(dataset: Dataset) -> Dataset:
    """Blocks sorted by content, so that fits do not depend on subject order."""
    def key(b):
        h = hashlib.sha256()
        for a in (b.y, b.X, b.Z, b.w):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.digest()
    order = sorted(range(dataset.N), key=lambda i: key(dataset.blocks[i]))
    return dataset.subset(order)


def _design(dataset: Dataset, spec: ModelSpec):
    y, X, Z, w, starts = dataset.packed()
    X = np.ascontiguousarray(X[:, dataset.column_index(spec.x_names)])
    return y, X, Z, w, starts


def _aliased_columns(X) -> np.ndarray:
    """Mask of columns that are linear combinations of earlier ones."""
    q = X.shape[1]
    aliased = np.zeros(q, dtype=bool)
    keep = []
    scale = np.linalg.norm(X, axis=0)
    for k in range(q):
        cols = keep + [k]
        Xs = X[:, cols] / np.where(scale[cols] > 0, scale[cols], 1.0)
        if scale[k] == 0 or np.linalg.matrix_rank(Xs) < len(cols):
            aliased[k] = True
        else:
            keep.append(k)
    return aliased


def _glm_loglik(family, link, y, X, w, beta, cy=None):
    mu = link_inverse(link, X @ beta)
    return float(np.sum(log_density(family, y, mu, w)))


def _irls(family, link, y, X, w, max_iter=200):
    q = X.shape[1]
    if np.linalg.matrix_rank(X) < q:
        raise SingularDesignError("design matrix is not of full column rank")
    if family.kind is FamilyKind.BERNOULLI:
        mu = (w * y + 0.5) / (w + 1.0)
        eta = np.log(mu / (1.0 - mu))
    else:
        mu = y + 0.1
        eta = np.log(mu)
    beta = np.zeros(q)
    ll_old = -np.inf
    converged = False
    max_score = float("inf")
    it = 0
    for it in range(1, max_iter + 1):
        var = mu * (1.0 - mu) if family.kind is FamilyKind.BERNOULLI else mu
        var = np.maximum(var, EPS)
        W = w * var
        zt = eta + (y - mu) / var
        sw = np.sqrt(W)
        new, *_ = np.linalg.lstsq(X * sw[:, None], zt * sw, rcond=None)
        ll = _glm_loglik(family, link, y, X, w, new)
        # step-halving guards against overshooting
        for _ in range(30):
            if ll >= ll_old - 1e-10 * abs(ll_old) or not np.isfinite(ll_old):
                break
            new = 0.5 * (new + beta)
            ll = _glm_loglik(family, link, y, X, w, new)
        beta = new
        eta = X @ beta
        mu = mean_eta(family, eta)
        score = float(np.max(np.abs(X.T @ (w * (y - mu)))))
        ll_old = ll
        stalled = converged and score >= max_score
        max_score = score
        if stalled:
            break
        # one step past the threshold: Newton is quadratic, so this lands at round-off
        converged = converged or score < 1e-8
    if family.kind is FamilyKind.BERNOULLI and np.max(np.abs(X @ beta)) > -math.log(EPS):
        # fitted probabilities at the clamp: separation, estimates are not finite
        converged = False
    return beta, ll_old, it, converged, max_score


def fit_glm_irls(dataset: Dataset, spec: ModelSpec, max_iter: int = 200) -> GlmFit:
    """Ordinary GLM fit of ``spec``'s mean model, ignoring the random effects.

    Raises
    ------
    SingularDesignError
        If the fixed-effect design is rank deficient.
    """
    y, X, _, w, _ = _design(dataset, spec)
    check_outcomes(spec.family, y)
    beta, ll, it, conv, score = _irls(spec.family, spec.link, y, X, w, max_iter)
    return GlmFit(beta, ll, it, conv, score)


# ----------------------------------------------------------------------
# GLMM objective and optimiser
# ----------------------------------------------------------------------


class _Objective:
    """Negative marginal log-likelihood over the free parameters."""

    def __init__(self, dataset, spec, quad, options, aliased):
        self.y, self.X, self.Z, self.w, self.starts = _design(dataset, spec)
        self.cy = log_factorials(spec.family, self.y)
        self.spec = spec
        self.structure = spec.covariance
        self.quad = quad
        self.backend = options.backend
        self.aliased = aliased
        self.fixed_alpha = None if options.fixed_alpha is None else np.asarray(
            options.fixed_alpha, dtype=float
        )
        self.n_beta = int(np.sum(~aliased))
        self.r = self.structure.n_params
        self.n_free = self.n_beta + (0 if self.fixed_alpha is not None else self.r)
        lower = np.full(self.n_free, -np.inf)
        if self.fixed_alpha is None:
            lower[self.n_beta + self.structure.diag_index] = ALPHA_DIAG_MIN
        self.lower = lower
        self.evaluations = 0

    def unpack(self, theta):
        beta = np.zeros(self.spec.q)
        beta[~self.aliased] = theta[: self.n_beta]
        alpha = self.fixed_alpha if self.fixed_alpha is not None else theta[self.n_beta:]
        return beta, np.asarray(alpha, dtype=float)

    def loglik(self, beta, alpha):
        sigma = build_sigma(self.structure, alpha)
        vals = subject_logliks(
            self.y, self.X, self.Z, self.w, self.starts, beta, sigma,
            self.spec.family, self.quad, self.backend, cy=self.cy,
        )
        return fixed_sum(vals)

    def __call__(self, theta):
        self.evaluations += 1
        beta, alpha = self.unpack(np.asarray(theta, dtype=float))
        try:
            val = -self.loglik(beta, alpha)
        except ModeFailureError:
            return math.inf
        return val if math.isfinite(val) else math.inf

    def gradient(self, theta, f0=None):
        g = np.empty(theta.size)
        for k in range(theta.size):
            h = GRAD_STEP * max(1.0, abs(theta[k]))
            tp, tm = theta.copy(), theta.copy()
            tp[k] += h
            tm[k] -= h
            fp, fm = self(tp), self(tm)
            if not (math.isfinite(fp) and math.isfinite(fm)):
                # one-sided fallback when a probe falls outside the usable region
                f0 = self(theta) if f0 is None else f0
                if math.isfinite(fp):
                    g[k] = (fp - f0) / h
                elif math.isfinite(fm):
                    g[k] = (f0 - fm) / h
                else:
                    g[k] = 0.0
                continue
            g[k] = (fp - fm) / (2.0 * h)
        return g

    def hessian(self, theta, f0):
        p = theta.size
        h = HESS_STEP * np.maximum(1.0, np.abs(theta))
        H = np.empty((p, p))
        fp = np.empty(p)
        fm = np.empty(p)
        for k in range(p):
            e = np.zeros(p)
            e[k] = h[k]
            fp[k] = self(theta + e)
            fm[k] = self(theta - e)
            H[k, k] = (fp[k] - 2.0 * f0 + fm[k]) / h[k] ** 2
        for k in range(p):
            for l in range(k):
                ek = np.zeros(p)
                el = np.zeros(p)
                ek[k] = h[k]
                el[l] = h[l]
                fpp = self(theta + ek + el)
                fpm = self(theta + ek - el)
                fmp = self(theta - ek + el)
                fmm = self(theta - ek - el)
                H[k, l] = H[l, k] = (fpp - fpm - fmp + fmm) / (4.0 * h[k] * h[l])
        return H

    def projected(self, theta, g):
        """Gradient with components pushing through an active lower bound removed."""
        at_bound = theta <= self.lower + 1e-12
        return np.where(at_bound & (g > 0), 0.0, g)


def _bfgs(obj: _Objective, theta, options: FitOptions):
    """Projected BFGS; returns ``(theta, f, g, iterations, converged)``."""
    lower = obj.lower
    theta = np.maximum(theta, lower)
    f = obj(theta)
    if not math.isfinite(f):
        raise ModeFailureError(-1, theta, "objective is not finite at the starting values")
    g = obj.gradient(theta, f)
    p = theta.size
    Hinv = np.eye(p)
    first = True
    converged = False
    it = 0
    while it < options.max_iterations:
        it += 1
        pg = obj.projected(theta, g)
        active = (theta <= lower + 1e-12) & (g > 0)
        d = -Hinv @ pg
        d[active] = 0.0
        slope = float(g @ d)
        if slope >= 0 or not np.all(np.isfinite(d)):
            Hinv = np.eye(p)
            d = -pg
            slope = float(g @ d)
        if first:
            # keep the very first trial step inside a unit box
            d = d / max(1.0, float(np.max(np.abs(d))))
        t = 1.0
        accepted = False
        for _ in range(40):
            trial = np.maximum(theta + t * d, lower)
            ft = obj(trial)
            if math.isfinite(ft) and ft <= f + 1e-4 * float(g @ (trial - theta)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        gt = obj.gradient(trial, ft)
        s = trial - theta
        yv = gt - g
        sy = float(s @ yv)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            if first:
                Hinv = np.eye(p) * (sy / float(yv @ yv))
            rho = 1.0 / sy
            V = np.eye(p) - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
            first = False
        rel = abs(f - ft) / max(1.0, abs(ft))
        theta, f, g = trial, ft, gt
        if rel < options.rel_tol and np.linalg.norm(obj.projected(theta, g)) < options.grad_tol:
            converged = True
            break
    return theta, f, g, it, converged


def _newton_polish(obj: _Objective, theta, f, g, options: FitOptions, steps=8):
    """Chord-Newton refinement on the free, off-bound coordinates."""
    at_bound = theta <= obj.lower + 1e-12
    idx = np.flatnonzero(~at_bound)
    if idx.size == 0:
        return theta, f, g
    H = obj.hessian(theta, f)[np.ix_(idx, idx)]
    try:
        c = linalg.cho_factor(H)
    except linalg.LinAlgError:
        return theta, f, g
    for _ in range(steps):
        if np.linalg.norm(obj.projected(theta, g)) < 0.1 * options.grad_tol:
            break
        d = np.zeros_like(theta)
        d[idx] = -linalg.cho_solve(c, g[idx])
        t = 1.0
        for _ in range(20):
            trial = np.maximum(theta + t * d, obj.lower)
            ft = obj(trial)
            if math.isfinite(ft) and ft <= f:
                break
            t *= 0.5
        else:
            break
        gt = obj.gradient(trial, ft)
        if np.linalg.norm(obj.projected(trial, gt)) > np.linalg.norm(obj.projected(theta, g)) and ft >= f:
            break
        theta, f, g = trial, ft, gt
    return theta, f, g


#: log-sd below which a shrinking variance component is tried at the box limit
SNAP_BELOW = -5.0


def _snap_to_boundary(obj: _Objective, theta, f, g):
    """Move vanishing log-diagonal entries onto the lower box when that does not hurt.

    Near zero variance the objective is flat in ``alpha`` (its slope decays
    like ``exp(2 alpha)``), so the quasi-Newton iteration stalls somewhere
    below ``SNAP_BELOW`` instead of reaching the box limit.
    """
    for k in np.flatnonzero(np.isfinite(obj.lower)):
        if obj.lower[k] < theta[k] < SNAP_BELOW and g[k] >= 0.0:
            trial = theta.copy()
            trial[k] = obj.lower[k]
            ft = obj(trial)
            if ft <= f:
                theta, f = trial, ft
                g = obj.gradient(theta, f)
    return theta, f, g


def fit_glmm(dataset: Dataset, spec: ModelSpec, quad: QuadratureSpec | None = None,
             options: FitOptions | None = None) -> FittedModel:
    """Maximum-likelihood fit of ``spec`` by adaptive Gauss-Hermite quadrature.

    Starting values: ``beta`` from :func:`fit_glm_irls`, ``Sigma = 0.25 I``.
    Convergence requires a relative log-likelihood change below
    ``options.rel_tol`` and a projected gradient norm below ``options.grad_tol``;
    a fit whose log-diagonal covariance parameter sits on the lower box is
    flagged ``boundary`` and may still be converged.
    """
    options = options or FitOptions()
    quad = (quad or QuadratureSpec()).resolve(spec.m)
    _check_spec(dataset, spec)
    fingerprint = dataset.fingerprint()
    dataset = _canonical(dataset)
    y, X, _, w, _ = _design(dataset, spec)
    structure = spec.covariance
    n_params = spec.q + (0 if options.fixed_alpha is not None else structure.n_params)
    if n_params >= dataset.n:
        raise DimensionError(f"{n_params} parameters for {dataset.n} observations")

    aliased = _aliased_columns(X)
    if aliased.any() and not options.allow_aliased:
        names = [spec.x_names[k] for k in np.flatnonzero(aliased)]
        raise SingularDesignError(f"design matrix is not of full column rank (aliased: {names})")
    beta0, *_ = _irls(spec.family, spec.link, y, X[:, ~aliased], w)
    if not np.all(np.isfinite(beta0)) or np.max(np.abs(beta0)) > 50:
        beta0 = np.zeros(int(np.sum(~aliased)))

    obj = _Objective(dataset, spec, quad, options, aliased)
    if options.fixed_alpha is not None:
        alpha_fixed = np.asarray(options.fixed_alpha, dtype=float)
        if alpha_fixed.size != structure.n_params:
            raise DimensionError("fixed_alpha has the wrong length for the covariance structure")
        theta0 = np.asarray(beta0, dtype=float)
    else:
        theta0 = np.concatenate([beta0, default_alpha(structure, options.start_variance)])

    theta, f, g, it, _ = _bfgs(obj, theta0, options)
    theta, f, g = _newton_polish(obj, theta, f, g, options)
    theta, f, g = _snap_to_boundary(obj, theta, f, g)
    gnorm = float(np.linalg.norm(obj.projected(theta, g)))
    hit_cap = it >= options.max_iterations
    converged = (not hit_cap) and gnorm < options.grad_tol
    boundary = bool(np.any(theta <= obj.lower + 1e-12))

    beta, alpha = obj.unpack(theta)
    loglik = obj.loglik(beta, alpha)
    H = obj.hessian(theta, -loglik)
    free_theta = np.ones(theta.size, dtype=bool)
    free_theta[theta <= obj.lower + 1e-12] = False
    # map onto the full (beta, alpha) layout
    q, r = spec.q, structure.n_params
    full_H = np.zeros((q + r, q + r))
    pos = np.concatenate([np.flatnonzero(~aliased),
                          q + np.arange(r) if options.fixed_alpha is None else np.array([], int)])
    full_H[np.ix_(pos, pos)] = H
    free = np.zeros(q + r, dtype=bool)
    free[pos[free_theta]] = True

    return FittedModel(
        spec=spec,
        beta_hat=beta,
        alpha_hat=alpha.copy(),
        sigma_hat=build_sigma(structure, alpha),
        loglik=loglik,
        converged=bool(converged),
        iterations=it,
        quad=quad,
        gradient_norm=gnorm,
        boundary=boundary,
        variance_fixed=options.fixed_alpha is not None,
        hessian=full_H,
        free=free,
        aliased=aliased,
        data_fingerprint=fingerprint,
        n_units=dataset.N,
        n_obs=dataset.n,
        evaluations=obj.evaluations,
    )


def fit_null(dataset: Dataset, spec: ModelSpec, quad: QuadratureSpec | None = None,
             options: FitOptions | None = None) -> FittedModel:
    """Fit the intercept-only mean model with ``spec``'s random-effects structure.

    The variance components are re-estimated unless ``options.fixed_alpha``
    is given (e.g. the full model's ``alpha_hat`` for a sensitivity check).
    """
    return fit_glmm(dataset, spec.null(), quad, options)
