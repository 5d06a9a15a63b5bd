"""Information matrix of the marginal likelihood via innovation-form
derivative recursions.

For each scalar parameter the one-step prediction error and its
covariance are differentiated through the filter in predictor form
(gain Kp_t = g Kf_t, so z_{t+1|t} = G z_{t|t-1} + Kp_t eps_t):

    d eps_t = -X_t d beta - (dA) z_{t|t-1} - A d z_{t|t-1}
    d S_t   = (dA) P A' + A (dP) A' + A P (dA)' + d Sigma_eps
    d Kp_t  = [(dG) P A' + G (dP) A' + G P (dA)' - Kp dS_t] S_t^{-1}
    d z_{t+1|t} = (dG) z + G dz + (dKp) eps + Kp (d eps)
    d P_{t+1|t} = (dG) P G' + G (dP) G' + G P (dG)' + d Sigma_eta
                  - (dKp) S Kp' - Kp (dS) Kp' - Kp S (dKp)'

with everything restricted to the observed rows at each step.  The
curvature estimate is assembled as

    J_ij = sum_t (d_i eps)' S^{-1} (d_j eps)
           + 1/2 tr(S^{-1} d_i S S^{-1} d_j S)
           + 1/4 tr(S^{-1} d_i S) tr(S^{-1} d_j S)

and inverted for the variance-covariance matrix and standard errors.
The initial prior (mu0, Sigma0) is treated as a fixed constant, so the
derivative states start from d z_{1|0} = (dG) mu0 and
d P_{1|0} = (dG) Sigma0 G' + G Sigma0 (dG)' + d Sigma_eta.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import Dataset, DataError, ModelParams, _frozen_array
from .kalman import FilterOutput, run_filter
from .spatial import pairwise_distances, _expcov

__all__ = ["ParamIndexMap", "InfoMatrixResult", "information_matrix",
           "derivative_check"]

SINGULAR_REL_TOL = 1e-10


@dataclass(frozen=True)
class ParamIndexMap:
    """Fixed ordering of the scalar parameters: beta, alpha, sigma2, g, theta."""

    names: tuple[str, ...]
    k: int
    n: int

    @classmethod
    def for_dataset(cls, d: Dataset) -> "ParamIndexMap":
        names = tuple(
            [f"beta[{j}]" for j in range(d.k)]
            + [f"alpha[{sid}]" for sid in d.stations.ids]
            + ["sigma2", "g", "theta"]
        )
        return cls(names=names, k=d.k, n=d.n)

    @property
    def size(self) -> int:
        return self.k + self.n + 3

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_vector(self, p: ModelParams) -> np.ndarray:
        return p.as_vector()

    def with_value(self, p: ModelParams, i: int, value: float) -> ModelParams:
        """Copy of ``p`` with scalar parameter i replaced."""
        if i < self.k:
            beta = p.beta.copy()
            beta[i] = value
            return replace(p, beta=beta)
        i -= self.k
        if i < self.n:
            alpha = p.alpha.copy()
            alpha[i] = value
            return replace(p, alpha=alpha)
        i -= self.n
        if i == 0:
            return replace(p, sigma2=value)
        if i == 1:
            return replace(p, g=value)
        if i == 2:
            return replace(p, theta=value)
        raise DataError(f"parameter index out of range")


@dataclass(frozen=True)
class InfoMatrixResult:
    """Curvature matrix, its inverse and the implied standard errors.

    When J is (numerically) singular, ``V`` and ``se`` are None and
    ``unidentified`` names the parameters carrying the null space.
    """

    param_map: ParamIndexMap
    J: np.ndarray
    V: np.ndarray | None
    se: np.ndarray | None
    unidentified: tuple[str, ...] = ()

    def se_for(self, name: str) -> float:
        if self.se is None:
            raise DataError("information matrix is singular; no standard errors")
        return float(self.se[self.param_map.index(name)])


def _derivative_steps(d: Dataset, p: ModelParams, f: FilterOutput,
                      indices: list[int]):
    """Yield per step t: (obs idx, eps, S, deps (q, m), dS (q, m, m)).

    Propagates the derivative recursions for the requested parameter
    indices only; q = len(indices).
    """
    n, k, T = d.n, d.k, d.T
    pm = ParamIndexMap.for_dataset(d)
    alpha, g = p.alpha, p.g
    dist = pairwise_distances(d.stations).values
    sigma_eta = _expcov(dist, p.theta)
    dsigma_eta = (dist / p.theta**2) * sigma_eta  # chain rule on exp(-d/theta)

    q = len(indices)
    # classify each requested parameter once
    beta_col = np.full(q, -1)   # design column for beta parameters
    alpha_idx = np.full(q, -1)  # station index for alpha parameters
    is_s2 = np.zeros(q, bool)
    is_g = np.zeros(q, bool)
    is_theta = np.zeros(q, bool)
    for slot, i in enumerate(indices):
        if i < pm.k:
            beta_col[slot] = i
        elif i < pm.k + pm.n:
            alpha_idx[slot] = i - pm.k
        elif i == pm.k + pm.n:
            is_s2[slot] = True
        elif i == pm.k + pm.n + 1:
            is_g[slot] = True
        elif i == pm.k + pm.n + 2:
            is_theta[slot] = True
        else:
            raise DataError(f"parameter index {i} out of range")

    # derivative state of the current predicted moments (t = 1 | 0)
    dz = np.zeros((q, n))
    dP = np.zeros((q, n, n))
    for slot in range(q):
        if is_g[slot]:
            dz[slot] = p.mu0
            dP[slot] = 2.0 * g * p.Sigma0
        elif is_theta[slot]:
            dP[slot] = dsigma_eta

    for t in range(T):
        idx = f.obs_indices[t]
        m = idx.size
        zp = f.z_pred[t]
        Pp = f.P_pred[t]
        eps = f.innovations[t]
        S = f.innovation_covs[t]
        Kp = g * f.gains[t]              # predictor gain (n, m)

        deps = np.zeros((q, m))
        dS = np.zeros((q, m, m))
        dz_next = np.zeros((q, n))
        dP_next = np.zeros((q, n, n))

        if m:
            a = alpha[idx]
            cf = cho_factor(S, lower=True, check_finite=False)
            PH = Pp[:, idx] * a          # P A' reduced  (n, m)
            Xr = d.X[t][idx] if k else None

        for slot in range(q):
            if m:
                deps[slot] = -a * dz[slot][idx]
                dS[slot] = a[:, None] * dP[slot][np.ix_(idx, idx)] * a[None, :]
                dKp_lhs = g * (dP[slot][:, idx] * a)   # G dP A'
                j = alpha_idx[slot]
                if beta_col[slot] >= 0:
                    deps[slot] -= Xr[:, beta_col[slot]]
                elif j >= 0:
                    pos = np.flatnonzero(idx == j)
                    if pos.size:
                        r = pos[0]
                        deps[slot][r] -= zp[j]
                        dS[slot][r, :] += Pp[j, idx] * a
                        dS[slot][:, r] += a * Pp[idx, j]
                        dKp_lhs[:, r] += g * Pp[:, j]  # G P dA'
                elif is_s2[slot]:
                    dS[slot][np.diag_indices(m)] += 1.0
                if is_g[slot]:
                    dKp_lhs += PH                      # dG P A'
                dKp_lhs -= Kp @ dS[slot]
                dKp = cho_solve(cf, dKp_lhs.T, check_finite=False).T

                dz_next[slot] = g * dz[slot] + dKp @ eps + Kp @ deps[slot]
                dPn = (g * g) * dP[slot] \
                    - dKp @ (S @ Kp.T) - Kp @ dS[slot] @ Kp.T \
                    - (Kp @ S) @ dKp.T
                if is_g[slot]:
                    dz_next[slot] += zp
                    dPn = dPn + 2.0 * g * Pp
                if is_theta[slot]:
                    dPn = dPn + dsigma_eta
            else:
                dz_next[slot] = g * dz[slot]
                dPn = (g * g) * dP[slot]
                if is_g[slot]:
                    dz_next[slot] += zp
                    dPn = dPn + 2.0 * g * Pp
                if is_theta[slot]:
                    dPn = dPn + dsigma_eta
            dP_next[slot] = 0.5 * (dPn + dPn.T)

        yield idx, eps, S, deps, dS
        dz, dP = dz_next, dP_next


def information_matrix(d: Dataset, p: ModelParams) -> InfoMatrixResult:
    """Assemble the curvature matrix of the marginal likelihood at ``p``.

    Intended for a converged fit; any valid parameter point is accepted.
    """
    pm = ParamIndexMap.for_dataset(d)
    nparam = pm.size
    f = run_filter(d, p)

    J = np.zeros((nparam, nparam))
    for idx, eps, S, deps, dS in _derivative_steps(d, p, f, list(range(nparam))):
        m = idx.size
        if m == 0:
            continue
        cf = cho_factor(S, lower=True, check_finite=False)
        J += deps @ cho_solve(cf, deps.T, check_finite=False)
        # S^{-1} dS_i for every i in one solve
        G = cho_solve(cf, dS.transpose(1, 0, 2).reshape(m, nparam * m),
                      check_finite=False).reshape(m, nparam, m).transpose(1, 0, 2)
        J += 0.5 * np.einsum("imn,jnm->ij", G, G, optimize=True)
        tr = np.trace(G, axis1=1, axis2=2)
        J += 0.25 * np.outer(tr, tr)
    J = 0.5 * (J + J.T)

    evals, evecs = np.linalg.eigh(J)
    scale = max(evals.max(), 0.0)
    null = evals <= SINGULAR_REL_TOL * max(scale, 1e-300)
    if null.any() or scale == 0.0:
        weights = np.abs(evecs[:, null]).max(axis=1) if null.any() else \
            np.ones(nparam)
        unidentified = tuple(pm.names[i] for i in np.flatnonzero(weights > 1e-6))
        return InfoMatrixResult(param_map=pm, J=_frozen_array(J), V=None,
                                se=None, unidentified=unidentified)

    cf = cho_factor(J, lower=True, check_finite=False)
    V = cho_solve(cf, np.eye(nparam), check_finite=False)
    V = 0.5 * (V + V.T)
    se = np.sqrt(np.diag(V))
    return InfoMatrixResult(param_map=pm, J=_frozen_array(J),
                            V=_frozen_array(V), se=_frozen_array(se))


def derivative_check(d: Dataset, p: ModelParams, i: int) -> float:
    """Worst-case relative error of the analytic innovation derivatives
    for parameter i against central finite differences over all t."""
    pm = ParamIndexMap.for_dataset(d)
    if not 0 <= i < pm.size:
        raise DataError(f"parameter index {i} out of range for p={pm.size}")
    f = run_filter(d, p)
    an_deps = []
    an_dS = []
    for _, _, _, deps, dS in _derivative_steps(d, p, f, [i]):
        an_deps.append(deps[0])
        an_dS.append(dS[0])

    x = pm.to_vector(p)[i]
    h = 1e-6 * (1.0 + abs(x))
    f_hi = run_filter(d, pm.with_value(p, i, x + h))
    f_lo = run_filter(d, pm.with_value(p, i, x - h))

    def _rel(analytic, hi, lo):
        worst_abs = 0.0
        scale = 1e-12
        for a_t, hi_t, lo_t in zip(analytic, hi, lo):
            fd = (hi_t - lo_t) / (2.0 * h)
            if fd.size == 0:
                continue
            worst_abs = max(worst_abs, np.abs(a_t - fd).max())
            scale = max(scale, np.abs(fd).max())
        return worst_abs / scale

    err_eps = _rel(an_deps, f_hi.innovations, f_lo.innovations)
    err_S = _rel(an_dS, f_hi.innovation_covs, f_lo.innovation_covs)
    return float(max(err_eps, err_S))
