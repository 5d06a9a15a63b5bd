"""Exact filtering, smoothing and marginal log-likelihood.

State-space form, per time step t = 1..T:

    y_t = X_t beta + A z_t + eps_t,   eps_t ~ N(0, sigma2 I)
    z_t = g z_{t-1} + eta_t,          eta_t ~ N(0, Sigma_eta)
    z_0 ~ N(mu0, Sigma0)

with A = diag(alpha) and Sigma_eta the unit-diagonal exponential spatial
correlation.  Missing observations are handled by deleting the affected
rows of the observation equation at each step, which keeps the
likelihood exact without imputation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .core import Dataset, ModelParams, NumericalError, _frozen_array
from .spatial import pairwise_distances, _expcov

__all__ = ["FilterOutput", "SmootherOutput", "run_filter", "run_smoother"]

LOG_2PI = np.log(2.0 * np.pi)
CHOL_JITTER = 1e-10


@dataclass(frozen=True)
class FilterOutput:
    """Forward-pass quantities.

    Filtered arrays carry T+1 slots: index 0 holds the initial prior
    (mu0, Sigma0) and index t the moments given y_{1:t}.  Predicted
    arrays carry T slots: index t-1 holds the one-step-ahead moments for
    time t.  Per-step gain, innovation and innovation covariance have
    the reduced shape m_t of the observed rows at that step.
    """

    z_pred: np.ndarray            # (T, n)
    P_pred: np.ndarray            # (T, n, n)
    z_filt: np.ndarray            # (T+1, n)
    P_filt: np.ndarray            # (T+1, n, n)
    gains: tuple[np.ndarray, ...]        # each (n, m_t)
    innovations: tuple[np.ndarray, ...]  # each (m_t,)
    innovation_covs: tuple[np.ndarray, ...]  # each (m_t, m_t)
    obs_indices: tuple[np.ndarray, ...]      # each (m_t,)
    loglik: float


@dataclass(frozen=True)
class SmootherOutput:
    """Backward-pass moments given the full sample y_{1:T}.

    ``P_lag[t-1]`` holds Cov(z_t, z_{t-1} | y_{1:T}).
    """

    z_smooth: np.ndarray   # (T+1, n)
    P_smooth: np.ndarray   # (T+1, n, n)
    P_lag: np.ndarray      # (T, n, n)


def _chol(mat: np.ndarray, what: str):
    """Cholesky with a single jitter retry; raises NumericalError after."""
    try:
        return cho_factor(mat, lower=True, check_finite=False)
    except LinAlgError:
        pass
    try:
        return cho_factor(mat + CHOL_JITTER * np.eye(mat.shape[0]),
                          lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc


def sigma_eta_for(d: Dataset, theta: float) -> np.ndarray:
    """Innovation correlation implied by the dataset's station geometry."""
    return _expcov(pairwise_distances(d.stations).values, theta)


def run_filter(d: Dataset, p: ModelParams, sigma_eta: np.ndarray | None = None) -> FilterOutput:
    """Forward Kalman recursion with row-deleted missing observations.

    The log-likelihood accumulates the full Gaussian density including
    the m_t log(2 pi) constant, so it is directly comparable with a
    joint multivariate-normal evaluation.  A fully missing step
    contributes nothing and simply propagates the prediction.
    """
    n, T, k = d.n, d.T, d.k
    if sigma_eta is None:
        sigma_eta = sigma_eta_for(d, p.theta)
    alpha, beta, g, s2 = p.alpha, p.beta, p.g, p.sigma2
    y = d.y
    X = d.X
    obs = d.obs_indices

    z_pred = np.empty((T, n))
    P_pred = np.empty((T, n, n))
    z_filt = np.empty((T + 1, n))
    P_filt = np.empty((T + 1, n, n))
    gains: list[np.ndarray] = []
    innovations: list[np.ndarray] = []
    innovation_covs: list[np.ndarray] = []

    z_filt[0] = p.mu0
    P_filt[0] = 0.5 * (p.Sigma0 + p.Sigma0.T)
    z = z_filt[0]
    P = P_filt[0]
    loglik = 0.0

    for t in range(T):
        zp = g * z
        Pp = (g * g) * P + sigma_eta
        Pp = 0.5 * (Pp + Pp.T)
        z_pred[t] = zp
        P_pred[t] = Pp

        idx = obs[t]
        m = idx.size
        if m == 0:
            z, P = zp, Pp
            z_filt[t + 1] = z
            P_filt[t + 1] = P
            gains.append(np.zeros((n, 0)))
            innovations.append(np.zeros(0))
            innovation_covs.append(np.zeros((0, 0)))
            continue

        a = alpha[idx]
        PH = Pp[:, idx] * a                       # P_pred H'  (n, m)
        S = a[:, None] * Pp[np.ix_(idx, idx)] * a[None, :]
        S[np.diag_indices(m)] += s2
        S = 0.5 * (S + S.T)
        try:
            cf = _chol(S, "innovation covariance")
        except NumericalError as exc:
            raise NumericalError(
                f"innovation covariance not positive definite at t={t + 1}"
            ) from exc

        resid = y[idx, t] - a * zp[idx]
        if k:
            resid = resid - X[t][idx] @ beta
        # one factorization serves the gain, the quadratic form and logdet
        K = cho_solve(cf, PH.T, check_finite=False).T   # (n, m)
        z = zp + K @ resid
        P = Pp - K @ (a[:, None] * Pp[idx, :])
        P = 0.5 * (P + P.T)

        logdet = 2.0 * np.log(np.diag(cf[0])).sum()
        quad = resid @ cho_solve(cf, resid, check_finite=False)
        loglik -= 0.5 * (logdet + quad + m * LOG_2PI)

        z_filt[t + 1] = z
        P_filt[t + 1] = P
        gains.append(K)
        innovations.append(resid)
        innovation_covs.append(S)

    if not np.isfinite(loglik):
        raise NumericalError("log-likelihood is not finite")

    return FilterOutput(
        z_pred=_frozen_array(z_pred),
        P_pred=_frozen_array(P_pred),
        z_filt=_frozen_array(z_filt),
        P_filt=_frozen_array(P_filt),
        gains=tuple(_frozen_array(K) for K in gains),
        innovations=tuple(_frozen_array(v) for v in innovations),
        innovation_covs=tuple(_frozen_array(S) for S in innovation_covs),
        obs_indices=obs,
        loglik=float(loglik),
    )


def run_smoother(d: Dataset, p: ModelParams, f: FilterOutput) -> SmootherOutput:
    """Backward recursion for smoothed and lag-one moments.

    For t = T..1, with J_{t-1} = g P_{t-1|t-1} (P_{t|t-1})^{-1}:

        z_{t-1|T} = z_{t-1|t-1} + J_{t-1} (z_{t|T} - z_{t|t-1})
        P_{t-1|T} = P_{t-1|t-1} + J_{t-1} (P_{t|T} - P_{t|t-1}) J_{t-1}'

    The lag-one covariances start at
    P_{T,T-1|T} = (I - K_T H_T) g P_{T-1|T-1} and step backwards through

        P_{t-1,t-2|T} = P_{t-1|t-1} J_{t-2}'
                        + J_{t-1} (P_{t,t-1|T} - g P_{t-1|t-1}) J_{t-2}'

    where H_T is the calibration matrix reduced to the rows observed at
    time T.
    """
    n, T = d.n, d.T
    g = p.g

    z_s = np.empty((T + 1, n))
    P_s = np.empty((T + 1, n, n))
    J = np.empty((T, n, n))  # J[t-1] is the gain used stepping t -> t-1

    z_s[T] = f.z_filt[T]
    P_s[T] = f.P_filt[T]

    for t in range(T, 0, -1):
        Pp = f.P_pred[t - 1]
        try:
            cf = cho_factor(Pp, lower=True, check_finite=False)
        except LinAlgError as exc:  # cannot happen with PD Sigma_eta
            raise NumericalError(
                f"singular one-step covariance at t={t}"
            ) from exc
        Jt = g * cho_solve(cf, f.P_filt[t - 1], check_finite=False).T
        J[t - 1] = Jt
        z_s[t - 1] = f.z_filt[t - 1] + Jt @ (z_s[t] - f.z_pred[t - 1])
        Ps = f.P_filt[t - 1] + Jt @ (P_s[t] - Pp) @ Jt.T
        P_s[t - 1] = 0.5 * (Ps + Ps.T)

    P_lag = np.empty((T, n, n))
    idx = f.obs_indices[T - 1]
    KH = np.zeros((n, n))
    if idx.size:
        KH[:, idx] = f.gains[T - 1] * p.alpha[idx]
    P_lag[T - 1] = (np.eye(n) - KH) @ (g * f.P_filt[T - 1])
    for t in range(T, 1, -1):
        P_lag[t - 2] = (
            f.P_filt[t - 1] @ J[t - 2].T
            + J[t - 1] @ (P_lag[t - 1] - g * f.P_filt[t - 1]) @ J[t - 2].T
        )

    return SmootherOutput(
        z_smooth=_frozen_array(z_s),
        P_smooth=_frozen_array(P_s),
        P_lag=_frozen_array(P_lag),
    )
