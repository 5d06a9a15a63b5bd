"""JIT-compiled inner loops for the EM driver.

One fused forward/backward pass returns exactly what the E-step needs
(log-likelihood, smoothed moments, lag-one covariances); the reference
implementation in :mod:`fieldcal.kalman` remains the contract and the
two are pinned against each other in the test suite.  Import of this
module is optional; callers fall back to the numpy path without numba.
"""

from __future__ import annotations

import numpy as np
from numba import njit

LOG_2PI = np.log(2.0 * np.pi)


@njit(cache=True)
def _cholesky(A):
    """Lower Cholesky factor via plain loops; raises on non-PD input."""
    m = A.shape[0]
    L = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1):
            acc = A[i, j]
            for r in range(j):
                acc -= L[i, r] * L[j, r]
            if i == j:
                if acc <= 0.0:
                    raise np.linalg.LinAlgError("matrix is not positive definite")
                L[i, i] = np.sqrt(acc)
            else:
                L[i, j] = acc / L[j, j]
    return L


@njit(cache=True)
def _forward_sub(L, B):
    """Solve L X = B for lower-triangular L; B is (m, p)."""
    m, p = B.shape
    X = B.copy()
    for j in range(p):
        for i in range(m):
            acc = X[i, j]
            for r in range(i):
                acc -= L[i, r] * X[r, j]
            X[i, j] = acc / L[i, i]
    return X


@njit(cache=True)
def _backward_sub_t(L, B):
    """Solve L' X = B for lower-triangular L; B is (m, p)."""
    m, p = B.shape
    X = B.copy()
    for j in range(p):
        for i in range(m - 1, -1, -1):
            acc = X[i, j]
            for r in range(i + 1, m):
                acc -= L[r, i] * X[r, j]
            X[i, j] = acc / L[i, i]
    return X


@njit(cache=True)
def _chol_solve(L, B):
    return _backward_sub_t(L, _forward_sub(L, B))


@njit(cache=True)
def em_pass(y, obs, xb, alpha, g, sigma2, mu0, Sigma0, sigma_eta):
    """Filter + smoother + lag-one pass.

    Parameters are plain arrays: y/obs/xb are (n, T) with xb holding the
    fixed-effect fit X_t beta.  Returns (loglik, z_smooth, P_smooth,
    P_lag) with the same layout as the reference smoother.
    """
    n, T = y.shape

    z_filt = np.empty((T + 1, n))
    P_filt = np.empty((T + 1, n, n))
    z_pred = np.empty((T, n))
    P_pred = np.empty((T, n, n))
    z_filt[0] = mu0
    P_filt[0] = 0.5 * (Sigma0 + Sigma0.T)

    loglik = 0.0
    K_last = np.zeros((n, n))
    idx_last = np.empty(n, np.int64)
    m_last = 0

    for t in range(T):
        zp = g * z_filt[t]
        Pp = (g * g) * P_filt[t] + sigma_eta
        Pp = 0.5 * (Pp + Pp.T)
        z_pred[t] = zp
        P_pred[t] = Pp

        idx = np.empty(n, np.int64)
        m = 0
        for s in range(n):
            if obs[s, t]:
                idx[m] = s
                m += 1
        if m == 0:
            z_filt[t + 1] = zp
            P_filt[t + 1] = Pp
            if t == T - 1:
                m_last = 0
            continue

        a = np.empty(m)
        resid = np.empty((m, 1))
        for r in range(m):
            s = idx[r]
            a[r] = alpha[s]
            resid[r, 0] = y[s, t] - xb[s, t] - a[r] * zp[s]

        S = np.empty((m, m))
        for r in range(m):
            for c in range(m):
                S[r, c] = a[r] * Pp[idx[r], idx[c]] * a[c]
            S[r, r] += sigma2
        L = _cholesky(S)

        logdet = 0.0
        for r in range(m):
            logdet += np.log(L[r, r])
        logdet *= 2.0
        u = _forward_sub(L, resid)
        quad = 0.0
        for r in range(m):
            quad += u[r, 0] * u[r, 0]
        loglik += -0.5 * (logdet + quad + m * LOG_2PI)

        HPt = np.empty((m, n))          # H P_pred  (m, n)
        for r in range(m):
            for j in range(n):
                HPt[r, j] = a[r] * Pp[idx[r], j]
        Kt = _chol_solve(L, HPt)        # K' = S^{-1} H P_pred  (m, n)

        zn = zp.copy()
        for j in range(n):
            acc = 0.0
            for r in range(m):
                acc += Kt[r, j] * resid[r, 0]
            zn[j] += acc
        Pn = Pp - Kt.T @ HPt
        z_filt[t + 1] = zn
        P_filt[t + 1] = 0.5 * (Pn + Pn.T)

        if t == T - 1:
            m_last = m
            for r in range(m):
                idx_last[r] = idx[r]
                for j in range(n):
                    K_last[j, r] = Kt[r, j]

    # backward pass
    z_s = np.empty((T + 1, n))
    P_s = np.empty((T + 1, n, n))
    J = np.empty((T, n, n))
    z_s[T] = z_filt[T]
    P_s[T] = P_filt[T]
    for t in range(T, 0, -1):
        Lp = _cholesky(P_pred[t - 1])
        Jt = g * _chol_solve(Lp, P_filt[t - 1]).T
        J[t - 1] = Jt
        z_s[t - 1] = z_filt[t - 1] + Jt @ (z_s[t] - z_pred[t - 1])
        Ps = P_filt[t - 1] + Jt @ ((P_s[t] - P_pred[t - 1]) @ Jt.T)
        P_s[t - 1] = 0.5 * (Ps + Ps.T)

    # lag-one covariances
    P_lag = np.empty((T, n, n))
    IKH = np.eye(n)
    for r in range(m_last):
        j = idx_last[r]
        for i in range(n):
            IKH[i, j] -= K_last[i, r] * alpha[j]
    P_lag[T - 1] = IKH @ (g * P_filt[T - 1])
    for t in range(T, 1, -1):
        P_lag[t - 2] = (P_filt[t - 1] @ J[t - 2].T
                        + J[t - 1] @ ((P_lag[t - 1] - g * P_filt[t - 1])
                                      @ J[t - 2].T))

    return loglik, z_s, P_s, P_lag


@njit(cache=True)
def theta_objective_value(dist, M, T, theta):
    """T log|Sigma_eta(theta)| + tr(Sigma_eta(theta)^{-1} M)."""
    C = np.exp(-dist / theta)
    L = _cholesky(C)
    logdet = 0.0
    for r in range(L.shape[0]):
        logdet += np.log(L[r, r])
    X = _chol_solve(L, M)
    tr = 0.0
    for r in range(X.shape[0]):
        tr += X[r, r]
    return T * 2.0 * logdet + tr


@njit(cache=True)
def _theta_obj_bounded(dist, M, T, x, lo, hi):
    if x < lo or x > hi:
        return np.inf
    return theta_objective_value(dist, M, T, np.exp(x))


@njit(cache=True)
def theta_search(dist, M, T, x0, step, lo, hi, max_evals, tol):
    """1-d Nelder-Mead on the log-range objective.

    Standard coefficients (reflect 1, expand 2, contract 0.5, shrink
    0.5) and the usual stopping rule: simplex spread below ``tol`` in
    both x and f.  Returns (best_x, best_f, n_evals).
    """
    x = np.empty(2)
    f = np.empty(2)
    x[0] = x0
    x[1] = min(x0 + step, hi)
    f[0] = _theta_obj_bounded(dist, M, T, x[0], lo, hi)
    f[1] = _theta_obj_bounded(dist, M, T, x[1], lo, hi)
    evals = 2

    while evals < max_evals:
        if f[1] < f[0]:
            x[0], x[1] = x[1], x[0]
            f[0], f[1] = f[1], f[0]
        if abs(x[1] - x[0]) <= tol and abs(f[1] - f[0]) <= tol:
            break

        xr = 2.0 * x[0] - x[1]
        fr = _theta_obj_bounded(dist, M, T, xr, lo, hi)
        evals += 1
        if fr < f[0]:
            xe = 3.0 * x[0] - 2.0 * x[1]
            fe = _theta_obj_bounded(dist, M, T, xe, lo, hi)
            evals += 1
            if fe < fr:
                x[1], f[1] = xe, fe
            else:
                x[1], f[1] = xr, fr
        elif fr < f[1]:
            xc = 1.5 * x[0] - 0.5 * x[1]   # outside contraction
            fc = _theta_obj_bounded(dist, M, T, xc, lo, hi)
            evals += 1
            if fc <= fr:
                x[1], f[1] = xc, fc
            else:
                x[1] = 0.5 * (x[0] + x[1])  # shrink
                f[1] = _theta_obj_bounded(dist, M, T, x[1], lo, hi)
                evals += 1
        else:
            xc = 0.5 * (x[0] + x[1])       # inside contraction
            fc = _theta_obj_bounded(dist, M, T, xc, lo, hi)
            evals += 1
            if fc < f[1]:
                x[1], f[1] = xc, fc
            else:
                x[1] = 0.5 * (x[0] + x[1])  # shrink
                f[1] = _theta_obj_bounded(dist, M, T, x[1], lo, hi)
                evals += 1

    if f[1] < f[0]:
        return x[1], f[1], evals
    return x[0], f[0], evals
