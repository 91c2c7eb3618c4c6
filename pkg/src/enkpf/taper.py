"""Gaspari-Cohn covariance tapering on the periodic grid.

The taper is the standard compactly supported 5th-order piecewise rational
correlation function with support radius 2c, applied as a Schur product to
sample covariances. All distances are physical (meters); the same length
scale is used for every field pair, so the taper weight between two state
columns depends only on the circular distance between their grid points.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


def gaspari_cohn(dist, c):
    """Gaspari-Cohn correlation at distance(s) dist for length scale c.

    Equals 1 at distance 0, decays to 0 at distance 2c, and is exactly 0
    beyond. c = inf gives all-ones weights (no tapering).
    """
    if c <= 0:
        raise ValueError("length scale c must be positive")
    d = np.abs(np.asarray(dist, dtype=float))
    if np.isinf(c):
        return np.ones_like(d)
    z = d / c
    out = np.zeros_like(z)

    near = z <= 1.0
    zn = z[near]
    out[near] = -0.25 * zn**5 + 0.5 * zn**4 + 0.625 * zn**3 - (5.0 / 3.0) * zn**2 + 1.0

    far = (z > 1.0) & (z < 2.0)
    zf = z[far]
    out[far] = (
        (1.0 / 12.0) * zf**5
        - 0.5 * zf**4
        + 0.625 * zf**3
        + (5.0 / 3.0) * zf**2
        - 5.0 * zf
        + 4.0
        - (2.0 / 3.0) / zf
    )
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class TaperSpec:
    """Taper length scale; support (weights > 0) extends to 2 * length_scale_m."""

    length_scale_m: float

    def __post_init__(self):
        if not self.length_scale_m > 0:
            raise ValueError("length_scale_m must be positive")

    @property
    def support_radius_m(self):
        return 2.0 * self.length_scale_m


def taper_weights(layout, spec, cols_a=None, cols_b=None):
    """Dense block of taper weights between two sets of state columns."""
    if cols_a is None:
        cols_a = np.arange(layout.dim)
    if cols_b is None:
        cols_b = np.arange(layout.dim)
    return gaspari_cohn(layout.col_distance_m(cols_a, cols_b), spec.length_scale_m)


def taper_matrix(layout, spec):
    """Full d x d taper as a sparse CSR matrix (banded on the ring)."""
    n = layout.geometry.n_points
    # Weight depends only on grid offset; build one row of offsets and shift it.
    offsets = np.arange(n)
    w_row = gaspari_cohn(layout.geometry.distance_m(offsets, 0), spec.length_scale_m)
    cols_in_support = offsets[w_row > 0.0]
    rows, cols, vals = [], [], []
    for c_block in range(layout.n_fields):
        for r_block in range(layout.n_fields):
            for off in cols_in_support:
                i = np.arange(n)
                j = (i + off) % n
                rows.append(r_block * n + i)
                cols.append(c_block * n + j)
                vals.append(np.full(n, w_row[off]))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.csr_matrix((vals, (rows, cols)), shape=(layout.dim, layout.dim))


def tapered_covariance(members, layout, spec):
    """Tapered sample covariance (X'X/(k-1) Schur-multiplied by the taper), sparse.

    members: (k, d) ensemble array. Only entries inside the taper support are
    stored; everything else is exactly zero by construction.
    """
    members = np.asarray(members, dtype=float)
    k = members.shape[0]
    if k < 2:
        raise ValueError("need at least 2 members for a sample covariance")
    w = taper_matrix(layout, spec).tocoo()
    anoms = members - members.mean(axis=0)
    # Evaluate the sample covariance only at stored taper entries.
    cov_vals = np.einsum("ki,ki->i", anoms[:, w.row], anoms[:, w.col]) / (k - 1)
    out = sp.csr_matrix((cov_vals * w.data, (w.row, w.col)), shape=w.shape)
    return out


def tapered_cov_block(members, cols_a, cols_b, layout, spec):
    """Dense tapered covariance block between column sets a and b.

    Same quantity as tapered_covariance()[np.ix_(cols_a, cols_b)] but computed
    directly; this is what the localized filters call on small slices.
    """
    members = np.asarray(members, dtype=float)
    k = members.shape[0]
    if k < 2:
        raise ValueError("need at least 2 members for a sample covariance")
    a = members[:, cols_a]
    b = members[:, cols_b]
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    cov = a.T @ b / (k - 1)
    return cov * taper_weights(layout, spec, cols_a, cols_b)
