"""Ensemble container, sample moments, and the Kalman gain.

Observation operators throughout the package are column selectors: obs row j
reads state column h_rows[j] with coefficient 1. That keeps every gain
computation an m x m solve (m = number of observations); no d x d system is
ever formed or inverted.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from enkpf.errors import FilterError


@dataclass(frozen=True)
class Ensemble:
    """k state vectors of dimension d, stored as a (k, d) array."""

    members: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.members, dtype=float)
        if m.ndim != 2:
            raise ValueError("members must be a (k, d) array")
        object.__setattr__(self, "members", m)

    @property
    def k(self):
        return self.members.shape[0]

    @property
    def dim(self):
        return self.members.shape[1]

    def mean(self):
        return self.members.mean(axis=0)

    def anomalies(self):
        return self.members - self.members.mean(axis=0)


def _members_of(ens):
    if isinstance(ens, Ensemble):
        return ens.members
    return np.asarray(ens, dtype=float)


def ensemble_moments(ens):
    """Sample mean and covariance with the k-1 divisor.

    Returns (mean (d,), cov (d, d)). Requires k >= 2.
    """
    x = _members_of(ens)
    k = x.shape[0]
    if k < 2:
        raise ValueError("need at least 2 members for a sample covariance")
    mean = x.mean(axis=0)
    a = x - mean
    cov = a.T @ a / (k - 1)
    return mean, cov


def kalman_gain(cov, h_rows, r_diag):
    """Kalman gain K = P H'(H P H' + R)^{-1} for a selector H and diagonal R.

    cov may be dense or sparse (d x d); h_rows[j] is the state column observed
    by obs j; r_diag holds the m observation error variances. Returns a dense
    (d, m) array. Raises FilterError if the innovation covariance is not
    positive definite.
    """
    h_rows = np.asarray(h_rows)
    r_diag = np.asarray(r_diag, dtype=float)
    m = h_rows.shape[0]
    if r_diag.shape != (m,):
        raise FilterError("r_diag length must match number of observations")
    if np.any(r_diag <= 0):
        raise FilterError("observation error variances must be positive")
    if sp.issparse(cov):
        p_cols = np.asarray(cov[:, h_rows].todense())
    else:
        p_cols = np.asarray(cov)[:, h_rows]
    s = p_cols[h_rows, :] + np.diag(r_diag)
    try:
        factor = sla.cho_factor(s, lower=True)
    except sla.LinAlgError as exc:
        raise FilterError(f"innovation covariance not positive definite: {exc}") from exc
    return sla.cho_solve(factor, p_cols.T).T
