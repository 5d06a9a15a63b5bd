"""Maximum-likelihood estimation via EM.

The E-step turns a filter + smoother pass into sufficient statistics;
the M-step updates alpha, beta, sigma2 and g in closed form and searches
theta with Nelder-Mead on the expected state-equation deviance

    T log|Sigma_eta(theta)| + tr[Sigma_eta(theta)^{-1} M(g)],
    M(g) = S11 - g (S10 + S10') + g^2 S00.

The sweep is a single-pass ECM: updates run in the order
alpha -> beta -> sigma2 -> g -> theta, each conditioning on the freshest
values of the other parameters but on the same E-step moments, which
keeps the marginal log-likelihood nondecreasing.  The initial-state
prior (mu0, Sigma0) is held fixed throughout a fit; estimating it is out
of scope and freezing it preserves exact EM monotonicity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.optimize import minimize

from .core import Dataset, DataError, ModelParams, NumericalError, _frozen_array
from .kalman import SmootherOutput, run_filter, run_smoother, sigma_eta_for
from .spatial import pairwise_distances, _expcov

try:
    from . import _fastpath
except ImportError:  # numba unavailable: the numpy path covers everything
    _fastpath = None

__all__ = [
    "SufficientStats",
    "ThetaSearch",
    "FitConfig",
    "FitResult",
    "init_params",
    "stationary_prior",
    "e_step",
    "update_alpha",
    "update_beta",
    "update_sigma2",
    "update_g",
    "update_theta",
    "fit",
]

SIGMA2_FLOOR = 1e-12


def _freeze_inplace(a: np.ndarray) -> np.ndarray:
    # fresh arrays owned by the caller: mark read-only without copying
    if a.flags.owndata or a.base is None:
        a.flags.writeable = False
    return a

# standard starting values for the scalar parameters
INIT_ALPHA = 0.5
INIT_SIGMA2 = 0.1
INIT_G = 0.2
INIT_THETA = 100.0


@dataclass(frozen=True)
class SufficientStats:
    """E-step moments and the accumulators feeding the M-step.

    State-equation statistics (sums over t = 1..T of smoothed moments):

        S00 = sum z_{t-1|T} z_{t-1|T}' + P_{t-1|T}
        S10 = sum z_{t|T} z_{t-1|T}' + P_{t,t-1|T}
        S11 = sum z_{t|T} z_{t|T}' + P_{t|T}

    Observation-side accumulators are restricted to observed cells;
    per station s (with z denoting the smoothed mean at that cell):

        zy[s]  = sum_t z y              W[s, :] = sum_t z X_t[s, :]
        den[s] = sum_t z^2 + P_{t|T}[s, s]

    together with the pooled Gram pieces XtX, Xty, yy and the observed
    cell count m_total.  ``omega_sum`` is sum_t Omega_t evaluated at the
    E-step parameters (observed rows scattered into full n x n shape).
    The raw smoothed moments are kept so independent checks can rebuild
    everything from first principles.
    """

    S00: np.ndarray
    S10: np.ndarray
    S11: np.ndarray
    omega_sum: np.ndarray
    zy: np.ndarray
    den: np.ndarray
    W: np.ndarray
    XtX: np.ndarray
    Xty: np.ndarray
    yy: float
    m_total: int
    obs_count: np.ndarray
    z_smooth: np.ndarray
    P_smooth: np.ndarray
    P_lag: np.ndarray
    dist: np.ndarray
    n_steps: int


@dataclass(frozen=True)
class ThetaSearch:
    """Nelder-Mead settings for the spatial-range update (log-space)."""

    lo: float = 1e-2
    hi: float = 1e4
    simplex_scale: float = 0.25
    max_evals: int = 200
    tol: float = 1e-6


@dataclass(frozen=True)
class FitConfig:
    """EM driver settings.

    ``loglik_tol = None`` uses the adaptive default 1e-6 * max(1, |ll|).
    ``alpha_sign_policy`` is "enforce-positive" (flip all alpha when
    their fitted mean is negative; likelihood-invariant) or "free".
    """

    max_iter: int = 500
    param_tol: float = 1e-4
    loglik_tol: float | None = None
    theta_search: ThetaSearch = field(default_factory=ThetaSearch)
    alpha_sign_policy: str = "enforce-positive"

    def __post_init__(self):
        if self.max_iter < 1:
            raise DataError("max_iter must be positive")
        if not self.param_tol > 0:
            raise DataError("param_tol must be > 0")
        if self.loglik_tol is not None and not self.loglik_tol > 0:
            raise DataError("loglik_tol must be > 0")
        if self.alpha_sign_policy not in ("enforce-positive", "free"):
            raise DataError(f"unknown alpha_sign_policy {self.alpha_sign_policy!r}")


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    loglik_trace: tuple[float, ...]
    iterations: int
    converged: bool
    smoother: SmootherOutput


def stationary_prior(d: Dataset, g: float, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero mean and Sigma_eta(theta) / (1 - g^2), the AR(1) stationary law."""
    if not abs(g) < 1:
        raise DataError(f"stationary prior needs |g| < 1, got g={g}")
    sigma_eta = sigma_eta_for(d, theta)
    return np.zeros(d.n), sigma_eta / (1.0 - g * g)


def init_params(d: Dataset) -> ModelParams:
    """Starting point: pooled-OLS beta, flat alpha, fixed scalar defaults."""
    k = d.k
    if k:
        Xa = d.X_stacked
        mask = d.observed.T  # (T, n)
        rows = Xa[mask]                      # (N_obs, k)
        resp = d.y.T[mask]
        XtX = rows.T @ rows
        evals, evecs = np.linalg.eigh(XtX)
        bad = evals < 1e-10 * max(evals.max(), 1.0)
        if bad.any():
            cols = sorted(int(c) for c in np.flatnonzero(
                np.abs(evecs[:, bad]).max(axis=1) > 1e-8))
            raise DataError(f"design matrix is rank deficient; collinear "
                            f"columns {cols}")
        beta = np.linalg.solve(XtX, rows.T @ resp)
    else:
        beta = np.zeros(0)

    mu0, Sigma0 = stationary_prior(d, INIT_G, INIT_THETA)
    return ModelParams(
        beta=beta,
        alpha=np.full(d.n, INIT_ALPHA),
        sigma2=INIT_SIGMA2,
        g=INIT_G,
        theta=INIT_THETA,
        mu0=mu0,
        Sigma0=Sigma0,
    )


def _smooth_pass(d: Dataset, p: ModelParams, sigma_eta: np.ndarray):
    """(loglik, z_smooth, P_smooth, P_lag) via the JIT kernel when
    available, else the reference filter + smoother."""
    if _fastpath is not None:
        if d.k:
            xb = np.einsum("tnk,k->nt", d.X_stacked, p.beta)
        else:
            xb = np.zeros_like(d.y)
        try:
            loglik, z_s, P_s, P_lag = _fastpath.em_pass(
                d.y, d.observed, xb, p.alpha, p.g, p.sigma2,
                p.mu0, np.asarray(p.Sigma0), sigma_eta)
            if np.isfinite(loglik):
                return float(loglik), z_s, P_s, P_lag
        except Exception:
            pass  # retry below with the jitter-aware reference path
    f = run_filter(d, p, sigma_eta=sigma_eta)
    s = run_smoother(d, p, f)
    return f.loglik, s.z_smooth, s.P_smooth, s.P_lag


def e_step(d: Dataset, p: ModelParams) -> tuple[SufficientStats, float]:
    """Filter + smoother pass, assembled into sufficient statistics."""
    dist = pairwise_distances(d.stations).values
    loglik, Z, P, P_lag = _smooth_pass(d, p, _expcov(dist, p.theta))

    n, T, k = d.n, d.T, d.k

    P_sum1 = P[1:].sum(axis=0)
    S00 = Z[:T].T @ Z[:T] + P[:T].sum(axis=0)
    S11 = Z[1:].T @ Z[1:] + P_sum1
    S10 = Z[1:].T @ Z[:T] + P_lag.sum(axis=0)

    dense = bool(d.observed.all())
    mask = d.observed.astype(float)               # (n, T)
    Zt = np.ascontiguousarray(Z[1:].T)            # (n, T) smoothed means
    Pdiag = P[1:, np.arange(n), np.arange(n)].T   # (n, T)
    Zm = Zt if dense else Zt * mask

    zy = (Zm * d.y).sum(axis=1)
    den = ((Zt * Zt + Pdiag) * mask).sum(axis=1)
    yy = float((d.y * d.y).sum())                 # masked cells hold 0
    obs_count = d.observed.sum(axis=1)
    m_total = int(obs_count.sum())

    if k:
        Xa = d.X_stacked                          # (T, n, k)
        Xm = Xa if dense else Xa * mask.T[:, :, None]
        W = np.einsum("tnk,nt->nk", Xm, Zt)
        XtX = np.einsum("tnk,tnl->kl", Xm, Xa)
        Xty = np.einsum("tnk,nt->k", Xm, d.y)
        fitted = np.einsum("tnk,k->nt", Xa, p.beta)
    else:
        W = np.zeros((n, 0))
        XtX = np.zeros((0, 0))
        Xty = np.zeros(0)
        fitted = 0.0

    # Omega_t at the E-step parameters, observed rows only:
    # (y - X beta - A z|T)(...)' + A P_{t|T} A'
    R = (d.y - fitted - p.alpha[:, None] * Zt) * mask
    if dense:
        P_masked = P_sum1
    else:
        P_masked = (P[1:] * (mask.T[:, :, None] * mask.T[:, None, :])).sum(axis=0)
    omega_sum = R @ R.T + np.outer(p.alpha, p.alpha) * P_masked

    stats = SufficientStats(
        S00=_frozen_array(S00), S10=_frozen_array(S10), S11=_frozen_array(S11),
        omega_sum=_frozen_array(omega_sum),
        zy=_frozen_array(zy), den=_frozen_array(den), W=_frozen_array(W),
        XtX=_frozen_array(XtX), Xty=_frozen_array(Xty), yy=yy,
        m_total=m_total, obs_count=_frozen_array(obs_count, dtype=int),
        z_smooth=_freeze_inplace(Z), P_smooth=_freeze_inplace(P),
        P_lag=_freeze_inplace(P_lag),
        dist=_freeze_inplace(dist), n_steps=T,
    )
    return stats, loglik


def update_alpha(stats: SufficientStats, d: Dataset, p: ModelParams) -> np.ndarray:
    """Per-station ratio of smoothed cross moments to smoothed second moments.

    alpha_s = sum_t z (y - X beta) / sum_t (z^2 + P[s, s]), observed
    cells only, with the current beta in the numerator.
    """
    num = stats.zy - stats.W @ p.beta if d.k else stats.zy.copy()
    bad = ~(stats.den > 0)
    if bad.any():
        s = int(np.flatnonzero(bad)[0])
        raise NumericalError(
            f"alpha update has zero denominator at station "
            f"{d.stations.ids[s]!r} (never informative)"
        )
    return num / stats.den


def update_beta(stats: SufficientStats, d: Dataset, p: ModelParams) -> np.ndarray:
    """GLS solve for beta given the current alpha.

    With Sigma_eps = sigma2 I the weighting cancels and this is the OLS
    of (y - A z|T) on X over the observed cells.
    """
    if d.k == 0:
        return np.zeros(0)
    rhs = stats.Xty - stats.W.T @ p.alpha
    try:
        cf = cho_factor(stats.XtX, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NumericalError("beta update: X'X is rank deficient") from exc
    return cho_solve(cf, rhs, check_finite=False)


def update_sigma2(stats: SufficientStats, d: Dataset, p: ModelParams) -> float:
    """Expected residual mean square over the observed cells.

    Expands sum_t tr(Omega_t) at the current (alpha, beta) from the
    beta- and alpha-free accumulators; the divisor is the observed cell
    count, not n*T, so missing data do not dilute the estimate.
    """
    a, b = p.alpha, p.beta
    total = stats.yy + a * a @ stats.den - 2.0 * (a @ stats.zy)
    if d.k:
        total += b @ stats.XtX @ b - 2.0 * (b @ stats.Xty)
        total += 2.0 * (a @ (stats.W @ b))
    s2 = total / stats.m_total
    if s2 < SIGMA2_FLOOR:
        warnings.warn("sigma2 update hit the degeneracy floor", RuntimeWarning)
        s2 = SIGMA2_FLOOR
    return float(s2)


def update_g(stats: SufficientStats, p: ModelParams) -> float:
    """tr(Sigma_eta^{-1} S10) / tr(Sigma_eta^{-1} S00) at the current theta."""
    sigma_eta = _expcov(stats.dist, p.theta)
    cf = cho_factor(sigma_eta, lower=True, check_finite=False)
    denom = np.trace(cho_solve(cf, stats.S00, check_finite=False))
    if not denom > 0:
        raise NumericalError(f"g update: nonpositive denominator {denom}")
    num = np.trace(cho_solve(cf, stats.S10, check_finite=False))
    return float(num / denom)


def update_theta(stats: SufficientStats, p: ModelParams,
                 search: ThetaSearch | None = None) -> float:
    """Nelder-Mead search in log(theta) on the expected state deviance.

    Keeps the incumbent unless the search strictly improves the
    objective, so the EM step never moves uphill.
    """
    if search is None:
        search = ThetaSearch()
    g = p.g
    M = stats.S11 - g * (stats.S10 + stats.S10.T) + g * g * stats.S00
    T = stats.n_steps
    lo, hi = np.log(search.lo), np.log(search.hi)
    x0 = float(np.clip(np.log(p.theta), lo, hi))

    if _fastpath is not None:
        f0 = _fastpath.theta_objective_value(stats.dist, M, T, np.exp(x0))
        best_x, best_f, _ = _fastpath.theta_search(
            stats.dist, M, T, x0, search.simplex_scale, lo, hi,
            search.max_evals, search.tol)
        if not (np.isfinite(f0) or np.isfinite(best_f)):
            raise NumericalError("theta objective is non-finite everywhere searched")
        if np.isfinite(best_f) and best_f < f0:
            return float(np.exp(best_x))
        return float(p.theta)

    def objective(x: np.ndarray) -> float:
        lt = x[0]
        if not (lo <= lt <= hi):
            return np.inf
        sigma_eta = _expcov(stats.dist, np.exp(lt))
        try:
            cf = cho_factor(sigma_eta, lower=True, check_finite=False)
        except LinAlgError:
            return np.inf
        logdet = 2.0 * np.log(np.diag(cf[0])).sum()
        return T * logdet + np.trace(cho_solve(cf, M, check_finite=False))

    f0 = objective(np.array([x0]))
    res = minimize(
        objective, np.array([x0]), method="Nelder-Mead",
        options=dict(
            initial_simplex=np.array([[x0], [min(x0 + search.simplex_scale, hi)]]),
            maxfev=search.max_evals, xatol=search.tol, fatol=search.tol,
            disp=False,
        ),
    )
    if not (np.isfinite(f0) or np.isfinite(res.fun)):
        raise NumericalError("theta objective is non-finite everywhere searched")
    if np.isfinite(res.fun) and res.fun < f0:
        return float(np.exp(res.x[0]))
    return float(p.theta)


def fit(d: Dataset, cfg: FitConfig | None = None,
        init: ModelParams | None = None) -> FitResult:
    """Run the ECM loop until both parameter and log-likelihood movement
    fall below tolerance, or max_iter sweeps.

    The trace holds the marginal log-likelihood of the parameters
    entering each sweep; it must be nondecreasing and a decrease beyond
    1e-8 * max(1, |ll|) raises :class:`NumericalError`.
    """
    if cfg is None:
        cfg = FitConfig()
    params = init if init is not None else init_params(d)

    trace: list[float] = []
    prev_vec: np.ndarray | None = None
    prev_ll: float | None = None
    converged = False
    iterations = 0
    stats, ll = e_step(d, params)

    for it in range(1, cfg.max_iter + 1):
        trace.append(ll)
        if prev_ll is not None:
            mono_tol = 1e-8 * max(1.0, abs(ll))
            if ll < prev_ll - mono_tol:
                raise NumericalError(
                    f"log-likelihood decreased at iteration {it} "
                    f"({prev_ll} -> {ll})"
                )
            ll_tol = cfg.loglik_tol if cfg.loglik_tol is not None else \
                1e-6 * max(1.0, abs(ll))
            vec = params.as_vector()
            if (np.linalg.norm(vec - prev_vec) < cfg.param_tol
                    and abs(ll - prev_ll) < ll_tol):
                converged = True
                break
        prev_vec = params.as_vector()
        prev_ll = ll
        iterations = it

        alpha = update_alpha(stats, d, params)
        params = replace(params, alpha=alpha)
        beta = update_beta(stats, d, params)
        params = replace(params, beta=beta)
        sigma2 = update_sigma2(stats, d, params)
        params = replace(params, sigma2=sigma2)
        g = update_g(stats, params)
        params = replace(params, g=g)
        theta = update_theta(stats, params, cfg.theta_search)
        params = replace(params, theta=theta)

        stats, ll = e_step(d, params)

    if not converged:
        trace.append(ll)

    if cfg.alpha_sign_policy == "enforce-positive" and params.alpha.mean() < 0:
        # global sign flip of (alpha, z) leaves the likelihood unchanged
        params = replace(params, alpha=-params.alpha)
        stats, ll = e_step(d, params)

    smoother = SmootherOutput(z_smooth=stats.z_smooth,
                              P_smooth=stats.P_smooth,
                              P_lag=stats.P_lag)
    return FitResult(
        params=params,
        loglik_trace=tuple(trace),
        iterations=iterations,
        converged=converged,
        smoother=smoother,
    )
