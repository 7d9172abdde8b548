"""Pure-numpy adaptive Gauss-Hermite kernel, vectorised across subjects.

Same contract as the compiled ``_agq`` extension; selected when the
extension is unavailable or ``GLMMR2_BACKEND=python`` is set.

Arguments shared by both backends
---------------------------------
eta0 : (n,) fixed part of the linear predictor ``X @ beta``
Z : (n, m) random-effect design
y, w, cy : (n,) outcomes, prior weights and ``log y!`` (zero for Bernoulli)
starts : (N+1,) row offsets of the subjects
sinv, logdet : precision matrix and log-determinant of Sigma
nodes : (K, m) tensor Hermite nodes; logw : (K,) log weights plus ``|t|^2``
fam : 0 Bernoulli/logit, 1 Poisson/log
"""
import math

import numpy as np

LOG_EPS = math.log(1e-12)
LN2 = math.log(2.0)
LN2PI = math.log(2.0 * math.pi)

MAX_ITER = 100
MAX_HALVINGS = 30
STEP_TOL = 1e-10

OK, MAX_ITER_REACHED, HALVING_FAILED, NOT_FINITE = 0, 1, 2, 3


def _loglik_terms(fam, y, w, cy, eta):
    if fam == 0:
        log_mu = np.maximum(-np.logaddexp(0.0, -eta), LOG_EPS)
        log_1m = np.maximum(-np.logaddexp(0.0, eta), LOG_EPS)
        return w * (y * log_mu + (1.0 - y) * log_1m)
    return w * (y * eta - np.exp(eta)) - cy


def _mean_var(fam, eta):
    if fam == 0:
        e = np.exp(-np.abs(eta))
        mu = np.where(eta >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return mu, mu * (1.0 - mu)
    mu = np.exp(eta)
    return mu, mu


class _Subjects:
    def __init__(self, eta0, Z, y, w, cy, starts, sinv, fam):
        self.eta0, self.Z, self.y, self.w, self.cy = eta0, Z, y, w, cy
        self.sinv, self.fam = sinv, fam
        self.N = starts.size - 1
        self.m = Z.shape[1]
        self.seg = np.repeat(np.arange(self.N), np.diff(starts))

    def _sum(self, v):
        return np.bincount(self.seg, v, minlength=self.N)

    def joint(self, u):
        """Conditional log-likelihood plus the prior kernel ``-u'S^{-1}u/2``."""
        eta = self.eta0 + np.einsum("ij,ij->i", self.Z, u[self.seg])
        ll = self._sum(_loglik_terms(self.fam, self.y, self.w, self.cy, eta))
        return ll - 0.5 * np.einsum("ni,ij,nj->n", u, self.sinv, u)

    def grad_hess(self, u):
        eta = self.eta0 + np.einsum("ij,ij->i", self.Z, u[self.seg])
        mu, var = _mean_var(self.fam, eta)
        r = self.w * (self.y - mu)
        v = self.w * var
        m = self.m
        g = np.empty((self.N, m))
        H = np.empty((self.N, m, m))
        for k in range(m):
            g[:, k] = self._sum(r * self.Z[:, k])
            for l in range(k + 1):
                H[:, k, l] = H[:, l, k] = self._sum(v * self.Z[:, k] * self.Z[:, l])
        g -= u @ self.sinv
        H += self.sinv
        return g, H


def find_modes(subj):
    N, m = subj.N, subj.m
    u = np.zeros((N, m))
    iters = np.zeros(N, dtype=np.intc)
    status = np.full(N, MAX_ITER_REACHED, dtype=np.intc)
    active = np.ones(N, dtype=bool)
    f = subj.joint(u)
    for it in range(MAX_ITER):
        if not active.any():
            break
        g, H = subj.grad_hess(u)
        bad = active & ~(np.all(np.isfinite(g), axis=1) & np.all(np.isfinite(H), axis=(1, 2)))
        status[bad] = NOT_FINITE
        active &= ~bad
        delta = np.zeros((N, m))
        if active.any():
            delta[active] = np.linalg.solve(H[active], g[active][..., None])[..., 0]
        step = np.where(active, 1.0, 0.0)
        pending = active.copy()
        cand = u.copy()
        fc = f.copy()
        for _ in range(MAX_HALVINGS + 1):
            if not pending.any():
                break
            trial = u + step[:, None] * delta
            ft = subj.joint(trial)
            ok = pending & (ft >= f - 1e-12 * (1.0 + np.abs(f)))
            cand[ok] = trial[ok]
            fc[ok] = ft[ok]
            pending &= ~ok
            step[pending] *= 0.5
        status[pending] = HALVING_FAILED
        active &= ~pending
        moved = np.max(np.abs(cand - u), axis=1)
        u = np.where(active[:, None], cand, u)
        f = np.where(active, fc, f)
        iters[active] = it + 1
        done = active & (moved < STEP_TOL)
        status[done] = OK
        active &= ~done
    return u, iters, status


def agq_logliks(eta0, Z, y, w, cy, starts, sinv, logdet, nodes, logw, fam):
    """Per-subject adaptive Gauss-Hermite marginal log-likelihoods.

    Returns ``(loglik, modes, neg_hessian, iterations, status)``.
    """
    subj = _Subjects(eta0, Z, y, w, cy, starts, sinv, fam)
    N, m = subj.N, subj.m
    u, iters, status = find_modes(subj)
    _, H = subj.grad_hess(u)
    out = np.full(N, np.nan)
    good = status == OK
    if not good.any():
        return out, u, H, iters, status
    L = np.linalg.cholesky(H[good])
    # rows of (L^T)^{-1} map standard nodes onto the curvature scale
    B = np.linalg.inv(np.swapaxes(L, 1, 2))
    K = nodes.shape[0]
    U = np.repeat(u, K, axis=0).reshape(N, K, m)
    U[good] += math.sqrt(2.0) * np.einsum("nij,kj->nki", B, nodes)
    vals = np.empty((N, K))
    for k in range(K):
        vals[:, k] = subj.joint(U[:, k, :])
    vals = vals[good] + logw[None, :]
    top = vals.max(axis=1)
    lse = top + np.log(np.exp(vals - top[:, None]).sum(axis=1))
    logdet_L = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    out[good] = 0.5 * m * LN2 - logdet_L + lse - 0.5 * (m * LN2PI + logdet)
    return out, u, H, iters, status


def gh_logliks(eta0, Z, y, w, cy, starts, chol_sigma, nodes, log_weights, fam):
    """Non-adaptive Gauss-Hermite: nodes ``sqrt(2) * L_Sigma t`` around zero.

    ``log_weights`` are the plain Hermite log weights (no ``|t|^2`` term).
    """
    seg = np.repeat(np.arange(starts.size - 1), np.diff(starts))
    N, m = starts.size - 1, Z.shape[1]
    U = math.sqrt(2.0) * nodes @ chol_sigma.T
    vals = np.empty((N, nodes.shape[0]))
    for k in range(nodes.shape[0]):
        eta = eta0 + Z @ U[k]
        ll = _loglik_terms(fam, y, w, cy, eta)
        vals[:, k] = np.bincount(seg, ll, minlength=N) + log_weights[k]
    top = vals.max(axis=1)
    return top + np.log(np.exp(vals - top[:, None]).sum(axis=1)) - 0.5 * m * math.log(math.pi)
