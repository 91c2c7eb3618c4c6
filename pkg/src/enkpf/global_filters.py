"""Global analysis updates: stochastic EnKF, particle-filter weights, and the
ensemble Kalman particle filter (EnKPF) with adaptive gamma.

The EnKPF interpolates between the stochastic EnKF (gamma = 1) and a pure
particle filter (gamma = 0). Stage 1 applies a gamma-dampened Kalman update
producing centers nu_i and a spread matrix Q; stage 2 weights the resulting
Gaussian mixture against the remaining likelihood power, resamples, and adds
perturbations drawn from the analysis covariance without ever forming it.

All observation operators are column selectors with diagonal R, so every
solve is m x m. The helpers at the bottom work on an arbitrary subset of
state rows given the relevant covariance slices; the localized filters reuse
them directly, which is what keeps global/local reduction tests exact.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from enkpf.core import Ensemble, _members_of
from enkpf.errors import FilterError
from enkpf.resampling import (
    MixtureWeights,
    ResampleIndices,
    balanced_resample,
    ess,
)

__all__ = [
    "EnkpfIntermediate",
    "GammaWeightSolver",
    "QFactor",
    "adaptive_gamma",
    "enkf_update",
    "enkpf_perturbations",
    "enkpf_stage1",
    "enkpf_update",
    "enkpf_weights",
    "pf_weights",
]


def _p_slices(P, h_rows):
    """Extract P[:, h_rows] and P[h_rows, h_rows] from a dense or sparse P."""
    try:
        import scipy.sparse as sp

        if sp.issparse(P):
            p_cols = np.asarray(P[:, h_rows].todense())
            return p_cols, p_cols[h_rows, :]
    except ImportError:  # pragma: no cover
        pass
    P = np.asarray(P, dtype=float)
    p_cols = P[:, h_rows]
    return p_cols, p_cols[h_rows, :]


def _chol(mat, what):
    try:
        return sla.cho_factor(mat, lower=True)
    except sla.LinAlgError as exc:
        raise FilterError(f"{what} not positive definite: {exc}") from exc


def enkf_update(ens, obs, P, rng):
    """Stochastic EnKF analysis: x_i + K(P)(y - Hx_i + eps_i), eps_i ~ N(0, R).

    P is supplied by the caller (plain or tapered sample covariance). Each
    member gets its own observation perturbation; one (k, m) standard-normal
    block is drawn from rng, making the update bit-reproducible per seed.
    """
    x = _members_of(ens)
    k, d = x.shape
    obs.check_dim(d)
    if obs.m == 0:
        return Ensemble(x.copy())
    p_cols, s_oo = _p_slices(P, obs.h_rows)
    pert = rng.standard_normal((k, obs.m)) * np.sqrt(obs.r_diag)
    factor = _chol(s_oo + np.diag(obs.r_diag), "innovation covariance")
    gain = sla.cho_solve(factor, p_cols.T).T
    innov = obs.y - obs.project(x) + pert
    return Ensemble(x + innov @ gain.T)


def pf_weights(ens, obs, likelihood_power=1.0):
    """Particle-filter weights alpha_i proportional to l(x_i | y)^power.

    Computed in log space with max-subtraction. power in (0, 1] tempers the
    likelihood; power = 1 is the plain particle filter.
    """
    if not 0.0 < likelihood_power <= 1.0:
        raise ValueError("likelihood_power must lie in (0, 1]")
    x = _members_of(ens)
    obs.check_dim(x.shape[1])
    innov = obs.y - obs.project(x)
    log_w = -0.5 * likelihood_power * np.sum(innov * innov / obs.r_diag, axis=1)
    return MixtureWeights.from_log(log_w)


@dataclass(frozen=True)
class QFactor:
    """Factored spread matrix Q = gamma^{-1} K_gamma R K_gamma'.

    Stored as (k_gamma, r_diag, gamma); supports products Q z and exact draws
    e = gamma^{-1/2} K_gamma (sqrt(r) * eta) with eta standard normal. The
    gamma = 0 limit is Q = 0 (scale stored as 0, no division).
    """

    k_gamma: np.ndarray
    r_diag: np.ndarray
    gamma: float

    @property
    def scale(self):
        return 0.0 if self.gamma == 0.0 else self.gamma**-0.5

    def matvec(self, z):
        if self.gamma == 0.0:
            return np.zeros(self.k_gamma.shape[0])
        w = self.r_diag * (self.k_gamma.T @ z)
        return (self.k_gamma @ w) / self.gamma

    def draw(self, eta_raw):
        """Map (n, m) standard normals to n draws from N(0, Q)."""
        return self.scale * (eta_raw * np.sqrt(self.r_diag)) @ self.k_gamma.T


@dataclass(frozen=True)
class EnkpfIntermediate:
    """First-stage output: centers nu (k, d), factored Q, and gamma."""

    nu: np.ndarray
    q_factor: QFactor
    gamma: float


def enkpf_stage1(ens, obs, P, gamma):
    """Gamma-dampened Kalman stage: nu_i = x_i + K(gamma P)(y - Hx_i).

    Returns the mixture centers and Q = gamma^{-1} K(gamma P) R K(gamma P)'
    in factored form. gamma = 0 is the exact limit nu = x, Q = 0.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    x = _members_of(ens)
    k, d = x.shape
    obs.check_dim(d)
    m = obs.m
    if m == 0 or gamma == 0.0:
        k_gamma = np.zeros((d, m))
        return EnkpfIntermediate(x.copy(), QFactor(k_gamma, obs.r_diag, gamma), gamma)
    p_cols, s_oo = _p_slices(P, obs.h_rows)
    factor = _chol(gamma * s_oo + np.diag(obs.r_diag), "stage-1 innovation covariance")
    k_gamma = gamma * sla.cho_solve(factor, p_cols.T).T
    nu = x + (obs.y - obs.project(x)) @ k_gamma.T
    return EnkpfIntermediate(nu, QFactor(k_gamma, obs.r_diag, gamma), gamma)


def enkpf_weights(inter, obs):
    """Mixture weights alpha_i ~ N(y; H nu_i, HQH' + R/(1-gamma)).

    gamma = 1 returns uniform weights by convention (the 1/(1-gamma) variance
    diverges and the particle stage is skipped).
    """
    k = inter.nu.shape[0]
    if inter.gamma == 1.0:
        return MixtureWeights.uniform(k)
    if obs.m == 0:
        return MixtureWeights.uniform(k)
    a = inter.q_factor.k_gamma[obs.h_rows]
    if inter.gamma == 0.0:
        hqh = np.zeros((obs.m, obs.m))
    else:
        hqh = (a * obs.r_diag) @ a.T / inter.gamma
    sigma_w = hqh + np.diag(obs.r_diag / (1.0 - inter.gamma))
    factor = _chol(sigma_w, "weight covariance")
    resid = obs.y - inter.nu[:, obs.h_rows]
    half = sla.cho_solve(factor, resid.T)
    log_w = -0.5 * np.sum(resid.T * half, axis=0)
    return MixtureWeights.from_log(log_w)


class GammaWeightSolver:
    """EnKPF mixture weights as a function of gamma for one background/obs pair.

    A single eigendecomposition of R^{-1/2} S R^{-1/2} (S = obs-space
    background covariance) reduces every subsequent weight query to one
    O(k m) product:

        log alpha_i(gamma) = -0.5 sum_j z_ij^2 c_j(gamma) + const,
        c_j = 1 / (gamma lam_j^2 + (gamma lam_j + 1)^2 / (1 - gamma)),

    with z_i = U' R^{-1/2} (y - H x_i). Algebraically identical to
    enkpf_weights at the same gamma; this is what makes per-site adaptive
    gamma affordable in the localized filters.
    """

    def __init__(self, s_oo, r_diag, innov0):
        r_diag = np.asarray(r_diag, dtype=float)
        innov0 = np.atleast_2d(np.asarray(innov0, dtype=float))
        self.k = innov0.shape[0]
        m = r_diag.shape[0]
        if m == 0:
            self.lam = np.zeros(0)
            self.z2 = np.zeros((self.k, 0))
            return
        inv_sqrt_r = 1.0 / np.sqrt(r_diag)
        s_white = inv_sqrt_r[:, None] * np.asarray(s_oo, dtype=float) * inv_sqrt_r
        lam, u = sla.eigh(s_white)
        self.lam = np.clip(lam, 0.0, None)
        self.z2 = ((innov0 * inv_sqrt_r) @ u) ** 2

    def log_weights(self, gamma):
        if gamma == 1.0 or self.z2.shape[1] == 0:
            return np.zeros(self.k)
        g_lam = gamma * self.lam
        c = 1.0 / (g_lam * self.lam + (g_lam + 1.0) ** 2 / (1.0 - gamma))
        log_w = -0.5 * (self.z2 @ c)
        return log_w - log_w.max()

    def weights(self, gamma):
        return MixtureWeights.from_log(self.log_weights(gamma))

    def ess(self, gamma):
        return ess(self.weights(gamma))


def search_gamma(solver, lo_frac, k):
    """Smallest gamma with ESS >= lo_frac * k, by 10-step bisection on [0, 1].

    gamma = 0 is the preferred outcome and is checked first. The bisection
    keeps the invariant ESS(hi) >= target (ESS at gamma = 1 is k by the
    uniform-weight convention, so the initial bracket is valid); the returned
    endpoint therefore always satisfies the floor. Deterministic: weight
    evaluation consumes no randomness.
    """
    target = lo_frac * k
    if solver.ess(0.0) >= target:
        return 0.0
    lo_g, hi_g = 0.0, 1.0
    for _ in range(10):
        mid = 0.5 * (lo_g + hi_g)
        if solver.ess(mid) >= target:
            hi_g = mid
        else:
            lo_g = mid
    return hi_g


def _eps_draws(k_ro, a, k2_ro, r_diag, gamma, eta_raw, er_raw):
    """Analysis perturbations (I - K2 H) e_Q + K2 e_R for pre-drawn normals.

    e_Q = gamma^{-1/2} K_gamma (sqrt(r) eta) restricted to the updated rows,
    e_R ~ N(0, R/(1-gamma)). gamma = 0 gives exact zeros.
    """
    if gamma == 0.0:
        return np.zeros((eta_raw.shape[0], k_ro.shape[0]))
    sqrt_r = np.sqrt(r_diag)
    scaled = gamma**-0.5 * (eta_raw * sqrt_r)
    e_q_rows = scaled @ k_ro.T
    he_q = scaled @ a.T
    e_r = er_raw * (sqrt_r / np.sqrt(1.0 - gamma))
    return e_q_rows + (e_r - he_q) @ k2_ro.T


def _enkpf_rows_machinery(obs, p_ro, s_oo, gamma):
    """Gains shared by the mean and perturbation paths, for gamma in [0, 1).

    Returns (k_ro, a, k2_ro): row-restricted stage-1 gain K(gamma P) on the
    requested rows, its obs-space block A = H K(gamma P), and the
    row-restricted second-stage gain K((1-gamma) Q).
    """
    m = obs.m
    p = p_ro.shape[0]
    if gamma == 0.0 or m == 0:
        z = np.zeros((p, m))
        return z, np.zeros((m, m)), z
    r_diag = obs.r_diag
    factor = _chol(gamma * s_oo + np.diag(r_diag), "stage-1 innovation covariance")
    k_ro = gamma * sla.cho_solve(factor, p_ro.T).T
    a = gamma * sla.cho_solve(factor, s_oo).T
    hqh = (a * r_diag) @ a.T / gamma
    qh_ro = (k_ro * r_diag) @ a.T / gamma
    s2 = (1.0 - gamma) * hqh + np.diag(r_diag)
    factor2 = _chol(s2, "stage-2 innovation covariance")
    k2_ro = (1.0 - gamma) * sla.cho_solve(factor2, qh_ro.T).T
    return k_ro, a, k2_ro


def _enkpf_rows_update(x_rows, hx, obs, p_ro, s_oo, gamma, eta_raw, er_raw, indices):
    """Row-restricted EnKPF final update given pre-drawn noise and indices.

    x_rows (k, p): background values of the rows being updated; hx (k, m):
    background observation-space values; p_ro (p, m), s_oo (m, m): covariance
    slices (tapered or plain). Requires gamma < 1 (gamma = 1 delegates to the
    EnKF path at the call sites). Returns the (k, p) analysis rows.
    """
    idx = indices.idx if isinstance(indices, ResampleIndices) else np.asarray(indices)
    if gamma == 0.0 or obs.m == 0:
        return x_rows[idx].copy()
    k_ro, a, k2_ro = _enkpf_rows_machinery(obs, p_ro, s_oo, gamma)
    innov0 = obs.y - hx
    nu_rows = x_rows + innov0 @ k_ro.T
    resid = innov0 - innov0 @ a.T
    mu_rows = nu_rows + resid @ k2_ro.T
    eps = _eps_draws(k_ro, a, k2_ro, obs.r_diag, gamma, eta_raw, er_raw)
    return mu_rows[idx] + eps


def enkpf_perturbations(inter, obs, n_draws, rng):
    """n draws of eps ~ N(0, P^{a,gamma}) without forming the covariance."""
    d = inter.nu.shape[1]
    if inter.gamma == 0.0 or obs.m == 0:
        return np.zeros((n_draws, d))
    if inter.gamma == 1.0:
        raise ValueError("perturbation draws are defined for gamma < 1")
    k_ro = inter.q_factor.k_gamma
    a = k_ro[obs.h_rows]
    r_diag = obs.r_diag
    hqh = (a * r_diag) @ a.T / inter.gamma
    s2 = (1.0 - inter.gamma) * hqh + np.diag(r_diag)
    qh_ro = (k_ro * r_diag) @ a.T / inter.gamma
    factor2 = _chol(s2, "stage-2 innovation covariance")
    k2_ro = (1.0 - inter.gamma) * sla.cho_solve(factor2, qh_ro.T).T
    eta = rng.standard_normal((n_draws, obs.m))
    er = rng.standard_normal((n_draws, obs.m))
    return _eps_draws(k_ro, a, k2_ro, r_diag, inter.gamma, eta, er)


def enkpf_update(ens, obs, P, gamma, rng, identity_resample=False):
    """Full EnKPF analysis for a fixed gamma.

    Returns (analysis Ensemble, MixtureWeights, ResampleIndices). At
    gamma = 1 the particle stage is skipped entirely: the update delegates to
    enkf_update with the same rng (bitwise-equal output), weights are uniform
    and the indices are the identity. identity_resample=True skips the
    resampling draw (diagnostic hook used by the equivalence tests).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    x = _members_of(ens)
    k, d = x.shape
    obs.check_dim(d)
    if gamma == 1.0:
        out = enkf_update(ens, obs, P, rng)
        return out, MixtureWeights.uniform(k), ResampleIndices.identity(k)
    m = obs.m
    eta_raw = rng.standard_normal((k, m))
    er_raw = rng.standard_normal((k, m))
    inter = enkpf_stage1(ens, obs, P, gamma)
    w = enkpf_weights(inter, obs)
    if identity_resample:
        idx = ResampleIndices.identity(k)
    else:
        idx = balanced_resample(w, rng)
    p_ro, s_oo = _p_slices(P, obs.h_rows)
    x_a = _enkpf_rows_update(
        x, obs.project(x), obs, p_ro, s_oo, gamma, eta_raw, er_raw, idx
    )
    return Ensemble(x_a), w, idx


def adaptive_gamma(ens, obs, P, ess_band, rng):
    """Choose gamma by ESS bisection, then run the EnKPF at that gamma.

    ess_band = (lo, hi) fractions of k: gamma is the smallest value (up to
    the 2^-10 bisection resolution) whose mixture ESS reaches lo * k, with
    gamma = 0 preferred when the plain particle weights already qualify.
    Returns (gamma, (Ensemble, MixtureWeights, ResampleIndices)).
    """
    lo, hi = ess_band
    if not 0.0 < lo <= hi <= 1.0:
        raise ValueError("ess_band must satisfy 0 < lo <= hi <= 1")
    x = _members_of(ens)
    obs.check_dim(x.shape[1])
    _, s_oo = _p_slices(P, obs.h_rows)
    solver = GammaWeightSolver(s_oo, obs.r_diag, obs.y - obs.project(x))
    gamma = search_gamma(solver, lo, x.shape[0])
    return gamma, enkpf_update(ens, obs, P, gamma, rng)
