"""Ensemble Kalman particle filters, localized variants, and a 1D
convective-scale shallow-water testbed for cycled twin experiments."""

from enkpf.grid import GridGeometry, StateLayout
from enkpf.taper import TaperSpec, gaspari_cohn, taper_matrix, tapered_covariance
from enkpf.core import Ensemble, ensemble_moments, kalman_gain
from enkpf.obs import GaussObs
from enkpf.resampling import balanced_resample, ess, permute_fixed_points
from enkpf.global_filters import (
    EnkpfIntermediate,
    adaptive_gamma,
    enkf_update,
    enkpf_stage1,
    enkpf_update,
    enkpf_weights,
    pf_weights,
)
from enkpf.local_filters import (
    LocalWindowSpec,
    ObservationBlock,
    block_lenkpf_update,
    compute_uvw,
    lenkf_update,
    naive_lenkpf_update,
    schedule_blocks,
)
from enkpf.sweq import ModelParams, ModelState, RadarObs, gen_observations, model_step
from enkpf.scoring import crps_empirical, field_crps, rank_histogram

__version__ = "0.1.0"
