# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled adaptive Gauss-Hermite kernel.

Contract identical to ``glmmr2._kernels_py.agq_logliks``; one subject at a
time, damped Newton for the conditional mode, then the tensor node sum with
an online log-sum-exp.
"""
import numpy as np

from libc.math cimport exp, log, log1p, fabs, sqrt, INFINITY, isfinite

cdef enum:
    MAXM = 8
    MAX_ITER = 100
    MAX_HALVINGS = 30

cdef double STEP_TOL = 1e-10
cdef double LOG_EPS = log(1e-12)
cdef double LN2 = log(2.0)
cdef double LN2PI = log(2.0 * 3.141592653589793)
cdef double SQRT2 = sqrt(2.0)


cdef inline double softplus(double x) noexcept nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double loglik_term(int fam, double y, double w, double cy, double eta) noexcept nogil:
    cdef double lm, l1
    if fam == 0:
        lm = -softplus(-eta)
        l1 = -softplus(eta)
        if lm < LOG_EPS:
            lm = LOG_EPS
        if l1 < LOG_EPS:
            l1 = LOG_EPS
        return w * (y * lm + (1.0 - y) * l1)
    return w * (y * eta - exp(eta)) - cy


cdef inline double joint(int fam, const double[::1] eta0, const double[:, ::1] Z,
                         const double[::1] y, const double[::1] w, const double[::1] cy,
                         Py_ssize_t a, Py_ssize_t b, int m, const double[:, ::1] sinv,
                         double* u) noexcept nogil:
    cdef Py_ssize_t j
    cdef int k, l
    cdef double eta, s = 0.0, quad = 0.0, t
    for j in range(a, b):
        eta = eta0[j]
        for k in range(m):
            eta = eta + Z[j, k] * u[k]
        s += loglik_term(fam, y[j], w[j], cy[j], eta)
    for k in range(m):
        t = 0.0
        for l in range(m):
            t = t + sinv[k, l] * u[l]
        quad += u[k] * t
    return s - 0.5 * quad


cdef inline void grad_hess(int fam, const double[::1] eta0, const double[:, ::1] Z,
                           const double[::1] y, const double[::1] w,
                           Py_ssize_t a, Py_ssize_t b, int m, const double[:, ::1] sinv,
                           double* u, double* g, double* H) noexcept nogil:
    cdef Py_ssize_t j
    cdef int k, l
    cdef double eta, mu, e, r, v
    for k in range(m):
        g[k] = 0.0
        for l in range(m):
            H[k * m + l] = 0.0
    for j in range(a, b):
        eta = eta0[j]
        for k in range(m):
            eta = eta + Z[j, k] * u[k]
        if fam == 0:
            e = exp(-fabs(eta))
            if eta >= 0:
                mu = 1.0 / (1.0 + e)
            else:
                mu = e / (1.0 + e)
            v = w[j] * mu * (1.0 - mu)
        else:
            mu = exp(eta)
            v = w[j] * mu
        r = w[j] * (y[j] - mu)
        for k in range(m):
            g[k] += r * Z[j, k]
            for l in range(k + 1):
                H[k * m + l] += v * Z[j, k] * Z[j, l]
    for k in range(m):
        for l in range(m):
            g[k] -= sinv[k, l] * u[l]
        for l in range(k + 1):
            H[k * m + l] += sinv[k, l]
            H[l * m + k] = H[k * m + l]


cdef inline int cholesky(double* A, double* L, int m) noexcept nogil:
    """Lower factor of the m x m matrix A (row-major); 0 on success."""
    cdef int i, j, k
    cdef double s
    for i in range(m):
        for j in range(i + 1):
            s = A[i * m + j]
            for k in range(j):
                s -= L[i * m + k] * L[j * m + k]
            if i == j:
                if not (s > 0.0):
                    return -1
                L[i * m + i] = sqrt(s)
            else:
                L[i * m + j] = s / L[j * m + j]
        for j in range(i + 1, m):
            L[i * m + j] = 0.0
    return 0


cdef inline void chol_solve(double* L, double* b, double* x, int m) noexcept nogil:
    cdef int i, k
    cdef double s
    for i in range(m):
        s = b[i]
        for k in range(i):
            s -= L[i * m + k] * x[k]
        x[i] = s / L[i * m + i]
    for i in range(m - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, m):
            s -= L[k * m + i] * x[k]
        x[i] = s / L[i * m + i]


cdef inline void upper_solve(double* L, const double* t, double* x, int m) noexcept nogil:
    """Solve L^T x = t."""
    cdef int i, k
    cdef double s
    for i in range(m - 1, -1, -1):
        s = t[i]
        for k in range(i + 1, m):
            s -= L[k * m + i] * x[k]
        x[i] = s / L[i * m + i]


cdef inline int all_finite(double* a, int n) noexcept nogil:
    cdef int i
    for i in range(n):
        if not isfinite(a[i]):
            return 0
    return 1


def agq_logliks(const double[::1] eta0, const double[:, ::1] Z, const double[::1] y,
                const double[::1] w, const double[::1] cy, const Py_ssize_t[::1] starts,
                const double[:, ::1] sinv, double logdet, const double[:, ::1] nodes,
                const double[::1] logw, int fam):
    """Per-subject adaptive Gauss-Hermite marginal log-likelihoods.

    Returns ``(loglik, modes, neg_hessian, iterations, status)``.
    """
    cdef Py_ssize_t N = starts.shape[0] - 1
    cdef int m = Z.shape[1]
    cdef Py_ssize_t K = nodes.shape[0]
    if m > MAXM:
        raise ValueError(f"random-effect dimension {m} exceeds {MAXM}")

    out_np = np.full(N, np.nan)
    modes_np = np.zeros((N, m))
    hess_np = np.zeros((N, m, m))
    iters_np = np.zeros(N, dtype=np.intc)
    status_np = np.zeros(N, dtype=np.intc)
    cdef double[::1] out = out_np
    cdef double[:, ::1] modes = modes_np
    cdef double[:, :, ::1] hess = hess_np
    cdef int[::1] iters = iters_np
    cdef int[::1] status = status_np

    cdef double u[MAXM]
    cdef double cand[MAXM]
    cdef double g[MAXM]
    cdef double delta[MAXM]
    cdef double v[MAXM]
    cdef double H[MAXM * MAXM]
    cdef double L[MAXM * MAXM]
    cdef double f, fc, step, moved, val, top, acc, logdet_L
    cdef double const_term = -0.5 * (m * LN2PI + logdet) + 0.5 * m * LN2
    cdef Py_ssize_t s, a, b, kk
    cdef int it, h, k, st, accepted

    with nogil:
        for s in range(N):
            a = starts[s]
            b = starts[s + 1]
            for k in range(m):
                u[k] = 0.0
            f = joint(fam, eta0, Z, y, w, cy, a, b, m, sinv, u)
            st = 1
            it = 0
            while it < MAX_ITER:
                grad_hess(fam, eta0, Z, y, w, a, b, m, sinv, u, g, H)
                if not (all_finite(g, m) and all_finite(H, m * m)):
                    st = 3
                    break
                if cholesky(H, L, m) != 0:
                    st = 3
                    break
                chol_solve(L, g, delta, m)
                step = 1.0
                accepted = 0
                for h in range(MAX_HALVINGS + 1):
                    for k in range(m):
                        cand[k] = u[k] + step * delta[k]
                    fc = joint(fam, eta0, Z, y, w, cy, a, b, m, sinv, cand)
                    if fc >= f - 1e-12 * (1.0 + fabs(f)):
                        accepted = 1
                        break
                    step *= 0.5
                if not accepted:
                    st = 2
                    break
                moved = 0.0
                for k in range(m):
                    if fabs(cand[k] - u[k]) > moved:
                        moved = fabs(cand[k] - u[k])
                    u[k] = cand[k]
                f = fc
                it += 1
                if moved < STEP_TOL:
                    st = 0
                    break
            iters[s] = it
            status[s] = st
            for k in range(m):
                modes[s, k] = u[k]
            grad_hess(fam, eta0, Z, y, w, a, b, m, sinv, u, g, H)
            for k in range(m * m):
                hess[s, k // m, k % m] = H[k]
            if st != 0:
                continue
            if cholesky(H, L, m) != 0:
                status[s] = 3
                continue
            logdet_L = 0.0
            for k in range(m):
                logdet_L += log(L[k * m + k])
            top = -INFINITY
            acc = 0.0
            for kk in range(K):
                upper_solve(L, &nodes[kk, 0], v, m)
                for k in range(m):
                    cand[k] = u[k] + SQRT2 * v[k]
                val = logw[kk] + joint(fam, eta0, Z, y, w, cy, a, b, m, sinv, cand)
                if val > top:
                    acc = acc * exp(top - val) + 1.0
                    top = val
                else:
                    acc += exp(val - top)
            out[s] = const_term - logdet_L + top + log(acc)

    return out_np, modes_np, hess_np, iters_np, status_np
