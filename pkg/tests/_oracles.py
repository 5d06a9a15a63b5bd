"""Brute-force reference computations, independent of the recursive code.

Everything here works on the stacked joint Gaussian of
(z_0..z_T, y_1..y_T): covariance blocks are built directly from the
model definition and conditioning is done with dense linear algebra.
Slow by construction; only usable for small n and T.
"""

from __future__ import annotations

import numpy as np

from fieldcal import Dataset, ModelParams, StationSet
from fieldcal.spatial import pairwise_distances, exponential_covariance


def sigma_eta(d: Dataset, theta: float) -> np.ndarray:
    return exponential_covariance(pairwise_distances(d.stations), theta).matrix


def joint_moments(d: Dataset, p: ModelParams):
    """Mean and covariance of (Z, Y) with Y restricted to observed cells.

    Returns (mz, Czz, my_obs, Cyy_obs, Czy_obs, cells) where cells lists
    the (t, s) pairs, time-major, that index the observed-y vector.
    """
    n, T = d.n, d.T
    Seta = sigma_eta(d, p.theta)
    g = p.g

    # Var(z_t) forward recursion and Cov(z_t, z_s) = V_min(t,s) g^{|t-s|}
    V = np.empty((T + 1, n, n))
    V[0] = p.Sigma0
    for t in range(1, T + 1):
        V[t] = g * g * V[t - 1] + Seta

    mz = np.empty((T + 1) * n)
    for t in range(T + 1):
        mz[t * n:(t + 1) * n] = (g ** t) * p.mu0

    Czz = np.empty(((T + 1) * n, (T + 1) * n))
    for t in range(T + 1):
        for s in range(T + 1):
            lo, hi = min(t, s), max(t, s)
            block = V[lo] * (g ** (hi - lo))
            Czz[t * n:(t + 1) * n, s * n:(s + 1) * n] = block if s >= t else block.T

    cells = [(t, s) for t in range(T) for s in range(n) if d.observed[s, t]]
    N = len(cells)
    my = np.empty(N)
    for r, (t, s) in enumerate(cells):
        my[r] = d.X[t][s] @ p.beta + p.alpha[s] * mz[(t + 1) * n + s]

    Cyy = np.empty((N, N))
    for r, (t, s) in enumerate(cells):
        for c, (u, v) in enumerate(cells):
            val = p.alpha[s] * Czz[(t + 1) * n + s, (u + 1) * n + v] * p.alpha[v]
            if r == c:
                val += p.sigma2
            Cyy[r, c] = val

    Czy = np.empty(((T + 1) * n, N))
    for c, (u, v) in enumerate(cells):
        Czy[:, c] = Czz[:, (u + 1) * n + v] * p.alpha[v]

    return mz, Czz, my, Cyy, Czy, cells


def joint_loglik(d: Dataset, p: ModelParams) -> float:
    """Gaussian log-density of the observed y under the model."""
    _, _, my, Cyy, _, cells = joint_moments(d, p)
    if not cells:
        return 0.0
    yv = np.array([d.y[s, t] for (t, s) in cells])
    sign, logdet = np.linalg.slogdet(Cyy)
    assert sign > 0
    r = yv - my
    return float(-0.5 * (logdet + r @ np.linalg.solve(Cyy, r)
                         + len(cells) * np.log(2 * np.pi)))


def joint_smoothed(d: Dataset, p: ModelParams):
    """Posterior of Z given the observed y: means, covariances, lag-one.

    Returns (z_hat (T+1, n), P_hat (T+1, n, n), P_lag (T, n, n)) with
    P_lag[t-1] = Cov(z_t, z_{t-1} | y).
    """
    n, T = d.n, d.T
    mz, Czz, my, Cyy, Czy, cells = joint_moments(d, p)
    if cells:
        yv = np.array([d.y[s, t] for (t, s) in cells])
        sol = np.linalg.solve(Cyy, np.column_stack([yv - my, Czy.T]))
        zpost = mz + Czy @ sol[:, 0]
        Cpost = Czz - Czy @ sol[:, 1:]
    else:
        zpost, Cpost = mz, Czz

    z_hat = zpost.reshape(T + 1, n)
    P_hat = np.empty((T + 1, n, n))
    P_lag = np.empty((T, n, n))
    for t in range(T + 1):
        P_hat[t] = Cpost[t * n:(t + 1) * n, t * n:(t + 1) * n]
    for t in range(1, T + 1):
        P_lag[t - 1] = Cpost[t * n:(t + 1) * n, (t - 1) * n:t * n]
    return z_hat, P_hat, P_lag


def q_deviance(stats, d: Dataset, p: ModelParams) -> float:
    """Expected complete-data deviance (-2 log lik) at parameters ``p``
    under E-step moments ``stats``, rebuilt from the raw smoothed
    moments rather than the packaged accumulators.

    The constant initial-state term is included so the value is the full
    expected deviance.
    """
    n, T = d.n, d.T
    Z = stats.z_smooth
    P = stats.P_smooth
    Seta = sigma_eta(d, p.theta)

    sign, logdet0 = np.linalg.slogdet(p.Sigma0)
    dz0 = Z[0] - p.mu0
    total = logdet0 + dz0 @ np.linalg.solve(p.Sigma0, dz0) + np.trace(
        np.linalg.solve(p.Sigma0, P[0]))

    for t in range(T):
        idx = np.flatnonzero(d.observed[:, t])
        m = idx.size
        if m == 0:
            continue
        resid = (d.y[idx, t] - d.X[t][idx] @ p.beta
                 - p.alpha[idx] * Z[t + 1][idx])
        quad = resid @ resid + np.sum(
            p.alpha[idx] ** 2 * np.diag(P[t + 1])[idx])
        total += m * np.log(p.sigma2) + quad / p.sigma2

    S00 = Z[:T].T @ Z[:T] + P[:T].sum(axis=0)
    S11 = Z[1:].T @ Z[1:] + P[1:].sum(axis=0)
    S10 = Z[1:].T @ Z[:T] + stats.P_lag.sum(axis=0)
    M = S11 - p.g * (S10 + S10.T) + p.g ** 2 * S00
    sign, logdet_eta = np.linalg.slogdet(Seta)
    total += T * logdet_eta + np.trace(np.linalg.solve(Seta, M))
    return float(total)


def random_instance(rng: np.random.Generator, n: int = 3, T: int = 10,
                    k: int = 0, missing: float = 0.0,
                    crs: str = "planar"):
    """A small random dataset + valid parameter point for oracle tests.

    Station coordinates, parameters and data are all drawn at healthy
    scales (distances O(1), theta comparable) so nothing is degenerate.
    Every station keeps at least 3 observed cells.
    """
    coords = rng.uniform(0.0, 3.0, size=(n, 2))
    stations = StationSet(ids=tuple(f"st{i}" for i in range(n)),
                          coords=coords, crs=crs)
    theta = rng.uniform(0.6, 2.5)
    g = rng.uniform(-0.8, 0.85)
    sigma2 = rng.uniform(0.05, 0.6)
    alpha = rng.uniform(0.4, 1.3, size=n)
    beta = rng.normal(size=k)
    mu0 = np.zeros(n)
    D = np.sqrt(((coords[:, None] - coords[None, :]) ** 2).sum(-1))
    Sigma0 = np.exp(-D / theta) / (1 - g * g)

    X = rng.normal(size=(T, n, k))
    z = np.linalg.cholesky(Sigma0) @ rng.normal(size=n)
    L = np.linalg.cholesky(np.exp(-D / theta))
    y = np.empty((n, T))
    for t in range(T):
        z = g * z + L @ rng.normal(size=n)
        y[:, t] = X[t] @ beta + alpha * z + np.sqrt(sigma2) * rng.normal(size=n)

    observed = np.ones((n, T), dtype=bool)
    if missing > 0:
        observed = rng.random((n, T)) >= missing
        for s in range(n):
            obs = np.flatnonzero(observed[s])
            if obs.size < 3:
                fill = rng.choice(T, size=3, replace=False)
                observed[s, fill] = True

    d = Dataset.from_arrays(stations, y, observed=observed,
                            X=X if k else None)
    p = ModelParams(beta=beta, alpha=alpha, sigma2=sigma2, g=g,
                    theta=theta, mu0=mu0, Sigma0=Sigma0)
    return d, p
