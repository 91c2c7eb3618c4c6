"""Localized analyses: LEnKF, NAIVE-LEnKPF, and BLOCK-LEnKPF.

LEnKF and NAIVE-LEnKPF run an independent analysis at every grid point using
only observations inside a local window, with tapered covariance slices. All
sites share the same observation perturbations (one global draw) and, for
NAIVE, one global uniform for resampling, so that neighboring analyses stay
as coherent as the weights allow; the remaining index freedom is removed by a
left-to-right reordering sweep.

BLOCK-LEnKPF instead partitions the observations into short segments. Each
segment's block update touches the directly observed columns u with a local
EnKPF and drags the taper-correlated columns v along through the conditional
regression x_v + P_vu P_uu^{-1} (x_u^a - x_u^b); columns w beyond the taper
support are untouched bitwise. Blocks whose (u, v) footprints are disjoint
are grouped and may run in any order (they read and write disjoint columns);
per-block rng sub-streams are spawned up front in block-id order, so serial
and parallel execution produce identical results.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from enkpf.core import Ensemble, _members_of
from enkpf.errors import InvalidBlockError
from enkpf.global_filters import (
    GammaWeightSolver,
    _chol,
    _enkpf_rows_update,
    search_gamma,
)
from enkpf.obs import GaussObs
from enkpf.resampling import (
    ResampleIndices,
    balanced_resample,
    permute_fixed_points,
    reorder_to_match,
    systematic_indices,
)
from enkpf.taper import tapered_cov_block

__all__ = [
    "BlockSchedule",
    "LocalDiagnostics",
    "LocalWindowSpec",
    "ObservationBlock",
    "block_assimilate_one",
    "block_lenkpf_update",
    "compute_uvw",
    "lenkf_update",
    "naive_lenkpf_update",
    "schedule_blocks",
]


@dataclass(frozen=True)
class LocalWindowSpec:
    """Observation-gathering radius per grid point (the localization l)."""

    radius_m: float

    def __post_init__(self):
        if not self.radius_m > 0:
            raise ValueError("radius_m must be positive")

    def window_size(self, geometry):
        """Number of grid points covered (2*radius/dx + 1 at defaults)."""
        return len(geometry.points_within(0, self.radius_m))


@dataclass
class LocalDiagnostics:
    """Per-call diagnostics filled in by the localized updates."""

    gammas: list = field(default_factory=list)
    ess_values: list = field(default_factory=list)
    pinv_fallbacks: int = 0

    def record(self, gamma, ess_value):
        self.gammas.append(float(gamma))
        self.ess_values.append(float(ess_value))


def _check_band(ess_band):
    lo, hi = ess_band
    if not 0.0 < lo <= hi <= 1.0:
        raise ValueError("ess_band must satisfy 0 < lo <= hi <= 1")
    return lo, hi


def _obs_geometry(all_obs, layout, radius_m):
    """Per-site observation selections: list of index arrays into obs rows."""
    n = layout.geometry.n_points
    obs_pts = layout.grid_of_cols(all_obs.h_rows)
    dist = layout.geometry.distance_m(np.arange(n)[:, None], obs_pts[None, :])
    return [np.flatnonzero(dist[g] <= radius_m) for g in range(n)]


def lenkf_update(ens, all_obs, window, taper, layout, rng):
    """Local EnKF: per-gridpoint stochastic EnKF on window observations.

    The perturbed observations are drawn once globally, so every site sees
    the same eps_i; localization enters through the window selection and the
    tapered covariance slices. Sites with no observations in range keep their
    background values bitwise.
    """
    x = _members_of(ens)
    k, d = x.shape
    all_obs.check_dim(d)
    if all_obs.m == 0:
        return Ensemble(x.copy())
    obs_cols = all_obs.h_rows
    p_cross = tapered_cov_block(x, np.arange(d), obs_cols, layout, taper)
    s_full = p_cross[obs_cols, :]
    pert = rng.standard_normal((k, all_obs.m)) * np.sqrt(all_obs.r_diag)
    innov_pert = all_obs.y - x[:, obs_cols] + pert
    selections = _obs_geometry(all_obs, layout, window.radius_m)
    out = x.copy()
    for g, sel in enumerate(selections):
        if sel.size == 0:
            continue
        cols = layout.cols_at(g)
        s_loc = s_full[np.ix_(sel, sel)] + np.diag(all_obs.r_diag[sel])
        factor = _chol(s_loc, f"local innovation covariance at site {g}")
        gain = sla.cho_solve(factor, p_cross[np.ix_(cols, sel)].T).T
        out[:, cols] = x[:, cols] + innov_pert[:, sel] @ gain.T
    return Ensemble(out)


def naive_lenkpf_update(ens, all_obs, window, taper, layout, ess_band, rng, diagnostics=None):
    """Local EnKPF at every grid point with shared randomness.

    Each site runs its own adaptive-gamma EnKPF on the window observations,
    fed by globally shared observation-perturbation draws and one globally
    shared resampling uniform. The per-site resampling indices are then
    reordered left to right to agree with the previous site's indices as much
    as the multisets allow, which suppresses artificial discontinuities at
    site boundaries. Sites without observations (and gamma = 1 sites, which
    do not resample) contribute identity index vectors to the sweep.
    """
    lo, _ = _check_band(ess_band)
    x = _members_of(ens)
    k, d = x.shape
    all_obs.check_dim(d)
    if all_obs.m == 0:
        return Ensemble(x.copy())
    obs_cols = all_obs.h_rows
    p_cross = tapered_cov_block(x, np.arange(d), obs_cols, layout, taper)
    s_full = p_cross[obs_cols, :]
    innov0 = all_obs.y - x[:, obs_cols]
    eta_all = rng.standard_normal((k, all_obs.m))
    er_all = rng.standard_normal((k, all_obs.m))
    u_shared = rng.uniform()
    selections = _obs_geometry(all_obs, layout, window.radius_m)

    out = x.copy()
    prev_idx = np.arange(k, dtype=np.intp)
    for g, sel in enumerate(selections):
        if sel.size == 0:
            prev_idx = np.arange(k, dtype=np.intp)
            continue
        cols = layout.cols_at(g)
        obs_loc = all_obs.subset(sel)
        s_loc = s_full[np.ix_(sel, sel)]
        solver = GammaWeightSolver(s_loc, obs_loc.r_diag, innov0[:, sel])
        gamma = search_gamma(solver, lo, k)
        if diagnostics is not None:
            diagnostics.record(gamma, solver.ess(gamma))
        if gamma == 1.0:
            pert = eta_all[:, sel] * np.sqrt(obs_loc.r_diag)
            factor = _chol(
                s_loc + np.diag(obs_loc.r_diag), f"local innovation covariance at site {g}"
            )
            gain = sla.cho_solve(factor, p_cross[np.ix_(cols, sel)].T).T
            out[:, cols] = x[:, cols] + (innov0[:, sel] + pert) @ gain.T
            prev_idx = np.arange(k, dtype=np.intp)
            continue
        w = solver.weights(gamma)
        raw = systematic_indices(w.alpha, u_shared)
        idx = reorder_to_match(raw, prev_idx)
        out[:, cols] = _enkpf_rows_update(
            x[:, cols],
            x[:, obs_cols[sel]],
            obs_loc,
            p_cross[np.ix_(cols, sel)],
            s_loc,
            gamma,
            eta_all[:, sel],
            er_all[:, sel],
            idx,
        )
        prev_idx = idx.idx
    return Ensemble(out)


@dataclass(frozen=True)
class ObservationBlock:
    """One block of observations with its u/v/w column partition.

    u: state columns read by the block's observations; v: columns with
    nonzero taper weight to some u column (excluding u); w: everything else,
    guaranteed zero taper weight to all of u.
    """

    obs: GaussObs
    segment: int
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray


def compute_uvw(block_obs, taper, layout, segment=0):
    """Partition the state columns into u/v/w for one observation block."""
    if block_obs.m == 0:
        raise InvalidBlockError("observation block is empty")
    block_obs.check_dim(layout.dim)
    u = np.unique(block_obs.h_rows)
    u_pts = np.unique(layout.grid_of_cols(u))
    n = layout.geometry.n_points
    dist = layout.geometry.distance_m(np.arange(n)[:, None], u_pts[None, :]).min(axis=1)
    # taper weight > 0 iff distance < 2l (exactly 0 at the support boundary)
    near_pts = np.flatnonzero(dist < taper.support_radius_m)
    near_cols = (
        np.arange(layout.n_fields)[:, None] * n + near_pts[None, :]
    ).ravel()
    v = np.setdiff1d(near_cols, u)
    w = np.setdiff1d(np.arange(layout.dim), np.concatenate([u, v]))
    return ObservationBlock(block_obs, int(segment), u, v, np.sort(w))


@dataclass(frozen=True)
class BlockSchedule:
    """Ordered groups of block ids; within a group, (u ∪ v) are pairwise disjoint."""

    groups: tuple


def schedule_blocks(blocks):
    """Greedy grouping of blocks with pairwise disjoint (u ∪ v) footprints.

    Repeatedly starts a group with the lowest-id unscheduled block and adds
    every later unscheduled block whose footprint avoids the group so far.
    """
    footprints = [frozenset(np.concatenate([b.u, b.v]).tolist()) for b in blocks]
    remaining = list(range(len(blocks)))
    groups = []
    while remaining:
        seed = remaining.pop(0)
        group = [seed]
        occupied = set(footprints[seed])
        still = []
        for bid in remaining:
            if occupied.isdisjoint(footprints[bid]):
                group.append(bid)
                occupied |= footprints[bid]
            else:
                still.append(bid)
        remaining = still
        groups.append(tuple(group))
    return BlockSchedule(tuple(groups))


def _pinv_regress(p_uu, p_vu, diagnostics=None):
    """M' with M = P_vu P_uu^{-1}, via eigen-truncated generalized inverse."""
    lam, vecs = sla.eigh(p_uu)
    lam_max = lam.max() if lam.size else 0.0
    keep = lam > 1e-10 * max(lam_max, 0.0)
    if not keep.all() and diagnostics is not None:
        diagnostics.pinv_fallbacks += 1
    if not keep.any():
        return np.zeros((p_uu.shape[0], p_vu.shape[0]))
    vk = vecs[:, keep]
    return vk @ ((vk.T @ p_vu.T) / lam[keep][:, None])


def block_assimilate_one(
    ens,
    block,
    taper,
    layout,
    ess_band,
    rng,
    gamma=None,
    identity_resample=False,
    diagnostics=None,
):
    """Assimilate one observation block.

    EnKPF (adaptive gamma unless one is forced) on the observed columns u,
    resampling indices permuted to maximize fixed points; correlated columns
    v follow through the conditional regression against the tapered P_uu;
    columns w are untouched. gamma/identity_resample are diagnostic hooks for
    the equivalence tests.
    """
    lo, _ = _check_band(ess_band)
    x = _members_of(ens)
    k, d = x.shape
    block.obs.check_dim(d)
    obs = block.obs
    m = obs.m
    if m == 0:
        raise InvalidBlockError("observation block is empty")
    obs_cols = obs.h_rows
    s_oo = tapered_cov_block(x, obs_cols, obs_cols, layout, taper)
    p_uo = tapered_cov_block(x, block.u, obs_cols, layout, taper)
    innov0 = obs.y - x[:, obs_cols]
    eta = rng.standard_normal((k, m))
    er = rng.standard_normal((k, m))
    solver = GammaWeightSolver(s_oo, obs.r_diag, innov0)
    g = search_gamma(solver, lo, k) if gamma is None else float(gamma)
    if diagnostics is not None:
        diagnostics.record(g, solver.ess(g))

    if g == 1.0:
        pert = eta * np.sqrt(obs.r_diag)
        factor = _chol(s_oo + np.diag(obs.r_diag), "block innovation covariance")
        gain = sla.cho_solve(factor, p_uo.T).T
        x_u = x[:, block.u] + (innov0 + pert) @ gain.T
    else:
        w = solver.weights(g)
        if identity_resample:
            raw = ResampleIndices.identity(k)
        else:
            raw = balanced_resample(w, rng)
        idx = permute_fixed_points(raw)
        x_u = _enkpf_rows_update(
            x[:, block.u], x[:, obs_cols], obs, p_uo, s_oo, g, eta, er, idx
        )

    out = x.copy()
    out[:, block.u] = x_u
    if block.v.size and block.u.size:
        p_uu = tapered_cov_block(x, block.u, block.u, layout, taper)
        p_vu = tapered_cov_block(x, block.v, block.u, layout, taper)
        m_t = _pinv_regress(p_uu, p_vu, diagnostics)
        out[:, block.v] = x[:, block.v] + (x_u - x[:, block.u]) @ m_t
    return Ensemble(out)


def partition_obs_blocks(all_obs, taper, layout, segment_length_m):
    """Split observations into contiguous-segment blocks with u/v/w sets."""
    if all_obs.m == 0:
        return []
    obs_pts = layout.grid_of_cols(all_obs.h_rows)
    seg = ((obs_pts * layout.geometry.spacing_m) // segment_length_m).astype(int)
    blocks = []
    for s in np.unique(seg):
        rows = np.flatnonzero(seg == s)
        blocks.append(compute_uvw(all_obs.subset(rows), taper, layout, segment=int(s)))
    return blocks


def block_lenkpf_update(
    ens, all_obs, taper, layout, segment_length_m, ess_band, rng, diagnostics=None
):
    """BLOCK-LEnKPF analysis: segment blocks, schedule, assimilate group-wise.

    Blocks inside one schedule group read and write pairwise disjoint
    columns, so their serial execution here equals parallel execution; each
    block consumes its own rng sub-stream, spawned up front in block-id
    order. Across groups the updates are sequential, reusing the same taper.
    """
    _check_band(ess_band)
    x = _members_of(ens)
    all_obs.check_dim(x.shape[1])
    blocks = partition_obs_blocks(all_obs, taper, layout, segment_length_m)
    if not blocks:
        return Ensemble(x.copy())
    schedule = schedule_blocks(blocks)
    streams = rng.spawn(len(blocks))
    current = Ensemble(x.copy())
    for group in schedule.groups:
        for bid in group:
            current = block_assimilate_one(
                current,
                blocks[bid],
                taper,
                layout,
                ess_band,
                streams[bid],
                diagnostics=diagnostics,
            )
    return current
