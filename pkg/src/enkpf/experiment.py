"""Cycled twin experiments: forecast, observe, score, analyze, repeat.

Each repetition spins up a truth state and an initial ensemble shared by all
methods, then cycles: the truth advances one assimilation interval and emits
radar-like observations; every method's one-step-ahead forecast ensemble is
scored against the truth (CRPS per field, relative to the free forecast);
each method then runs its analysis and the analyses are propagated to the
next cycle. The `free` method never sees an observation object at all: its
"analysis" is the forecast, which makes it the climatological baseline.

A numerical failure (blowup, CFL, non-PD innovation) removes the method for
the rest of the repetition; its later cycles are recorded with empty scores
and the other methods continue.

Every random draw comes from seed_stream(base_seed, rep, cycle, role, unit),
so the full output is a pure function of the config: repetitions can run in a
process pool and still produce byte-identical CSV files. Forecast plume
streams are keyed by member index only and therefore shared across methods,
which pairs the method comparisons member-by-member.
"""

import csv
import os
from dataclasses import dataclass
from functools import partial
from multiprocessing import Pool

import numpy as np

from enkpf.config import METHODS, validate_config
from enkpf.core import Ensemble, ensemble_moments
from enkpf.errors import CflViolation, FilterError, NumericalBlowup
from enkpf.global_filters import adaptive_gamma, enkf_update, pf_weights
from enkpf.local_filters import (
    LocalDiagnostics,
    LocalWindowSpec,
    block_lenkpf_update,
    lenkf_update,
    naive_lenkpf_update,
)
from enkpf.resampling import balanced_resample, ess
from enkpf.rngstream import seed_stream
from enkpf.scoring import ScoreRecord, field_crps, rank_of_truth, write_scores_csv
from enkpf.sweq import (
    ModelState,
    advance_members,
    gen_observations,
    obs_to_gauss,
    spinup_ensemble,
)
from enkpf.taper import TaperSpec

FIELDS = ("h", "u", "r")
METHOD_IDS = {name: i for i, name in enumerate(METHODS)}
FAILURES = (FilterError, NumericalBlowup, CflViolation)
RANK_TIME_THIN_S = 1800.0
RANK_SPACE_THIN = 10

TRACE_HEADER = [
    "rep", "cycle", "time_s", "method", "truth_rain_mean",
    "forecast_rain_mean", "analysis_rain_mean",
    "gamma_mean", "gamma_min", "gamma_max", "ess_mean",
]


@dataclass(frozen=True)
class TraceRow:
    """Per (cycle, method) diagnostic summary of one repetition."""

    rep: int
    cycle: int
    time_s: float
    method: str
    truth_rain_mean: float
    forecast_rain_mean: float
    analysis_rain_mean: float
    gammas: tuple
    ess_values: tuple


@dataclass
class RepResult:
    rep: int
    records: list
    rank_counts: dict  # (method, field) -> (k + 1,) counts
    trace_rows: list
    failed_at: dict  # method -> cycle of first numerical failure


def _field_slices(n):
    return {"h": slice(0, n), "u": slice(n, 2 * n), "r": slice(2 * n, 3 * n)}


def _analyze(method, members, obs, cfg, layout, window, taper, rng, diag):
    """Run one method's analysis; returns the analysis member array."""
    if method == "enkf_global":
        p = ensemble_moments(members)[1]
        return enkf_update(Ensemble(members), obs, p, rng).members
    if method == "enkpf_global":
        p = ensemble_moments(members)[1]
        gamma, (out, w, _) = adaptive_gamma(Ensemble(members), obs, p, cfg.ess_band, rng)
        diag.record(gamma, ess(w))
        return out.members
    if method == "pf_global":
        w = pf_weights(Ensemble(members), obs)
        diag.record(0.0, ess(w))
        idx = balanced_resample(w, rng)
        return members[idx.idx].copy()
    if method == "lenkf":
        return lenkf_update(Ensemble(members), obs, window, taper, layout, rng).members
    if method == "naive_lenkpf":
        return naive_lenkpf_update(
            Ensemble(members), obs, window, taper, layout, cfg.ess_band, rng,
            diagnostics=diag,
        ).members
    if method == "block_lenkpf":
        return block_lenkpf_update(
            Ensemble(members), obs, taper, layout, cfg.block_segment_m, cfg.ess_band,
            rng, diagnostics=diag,
        ).members
    raise ValueError(f"no analysis defined for method {method!r}")


def run_single_rep(cfg, rep):
    """One repetition of the twin experiment; pure function of (cfg, rep)."""
    params = cfg.model
    layout = params.layout
    n = params.geometry.n_points
    k = cfg.k
    seed = cfg.base_seed
    steps = int(round(cfg.interval_s / params.dt_s))
    window = LocalWindowSpec(cfg.l_m)
    taper = TaperSpec(cfg.l_m)
    slices = _field_slices(n)

    spin = spinup_ensemble(
        params, k + 1, cfg.spinup_days, seed_stream(seed, rep, 0, "spinup", 0)
    )
    truth = spin.members[0].copy()
    ens = {m: spin.members[1:].copy() for m in cfg.methods}
    failed_at = {}

    records = []
    rank_counts = {
        (m, f): np.zeros(k + 1, dtype=np.int64) for m in cfg.methods for f in FIELDS
    }
    trace_rows = []

    for cycle in range(1, cfg.n_cycles + 1):
        t_now = cycle * cfg.interval_s
        truth = advance_members(
            truth[None, :], params, steps, [seed_stream(seed, rep, cycle, "truth", 0)]
        )[0]
        truth_state = ModelState.from_vector(truth, t=t_now)
        radar = gen_observations(truth_state, params, seed_stream(seed, rep, cycle, "obs", 0))
        obs = obs_to_gauss(radar, cfg.r_r, cfg.r_u)

        forecasts = {}
        for m in cfg.methods:
            if m in failed_at:
                continue
            try:
                rngs = [seed_stream(seed, rep, cycle, "forecast", i) for i in range(k)]
                forecasts[m] = advance_members(ens[m], params, steps, rngs)
            except FAILURES:
                failed_at[m] = cycle

        free_crps = {}
        if "free" in forecasts:
            free_crps = {
                f: field_crps(forecasts["free"][:, slices[f]], truth[slices[f]])
                for f in FIELDS
            }
        for m in cfg.methods:
            for f in FIELDS:
                crps = (
                    field_crps(forecasts[m][:, slices[f]], truth[slices[f]])
                    if m in forecasts
                    else None
                )
                records.append(ScoreRecord(rep, cycle, m, f, crps, free_crps.get(f)))

        if round(t_now) % round(RANK_TIME_THIN_S) == 0:
            for m in forecasts:
                rng_rank = seed_stream(seed, rep, cycle, "ranks", METHOD_IDS[m])
                for f in FIELDS:
                    fc = forecasts[m][:, slices[f]]
                    tr = truth[slices[f]]
                    for g in range(0, n, RANK_SPACE_THIN):
                        rank_counts[(m, f)][rank_of_truth(fc[:, g], tr[g], rng_rank)] += 1

        for m in cfg.methods:
            if m not in forecasts:
                continue
            if m == "free":
                ens[m] = forecasts[m]
                continue
            diag = LocalDiagnostics()
            rng_a = seed_stream(seed, rep, cycle, "analysis", METHOD_IDS[m])
            try:
                ens[m] = _analyze(
                    m, forecasts[m], obs, cfg, layout, window, taper, rng_a, diag
                )
            except FAILURES:
                failed_at[m] = cycle
                continue
            if cfg.trace:
                trace_rows.append(
                    TraceRow(
                        rep, cycle, t_now, m,
                        float(truth[slices["r"]].mean()),
                        float(forecasts[m][:, slices["r"]].mean()),
                        float(ens[m][:, slices["r"]].mean()),
                        tuple(diag.gammas),
                        tuple(diag.ess_values),
                    )
                )

    return RepResult(rep, records, rank_counts, trace_rows, failed_at)


def _cell(value):
    return "" if value is None else repr(float(value))


def write_ranks_csv(rank_totals, methods, k, fh):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["method", "field", "rank", "count"])
    for m in methods:
        for f in FIELDS:
            counts = rank_totals[(m, f)]
            for rank in range(k + 1):
                writer.writerow([m, f, rank, int(counts[rank])])


def write_trace_csv(trace_rows, fh):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for row in trace_rows:
        gammas = np.asarray(row.gammas)
        esses = np.asarray(row.ess_values)
        has = gammas.size > 0
        writer.writerow(
            [
                row.rep, row.cycle, _cell(row.time_s), row.method,
                _cell(row.truth_rain_mean), _cell(row.forecast_rain_mean),
                _cell(row.analysis_rain_mean),
                _cell(float(gammas.mean()) if has else None),
                _cell(float(gammas.min()) if has else None),
                _cell(float(gammas.max()) if has else None),
                _cell(float(esses.mean()) if esses.size else None),
            ]
        )


def run_experiment(cfg, threads=1):
    """Run all repetitions and write scores.csv / ranks.csv (+ traces).

    Returns (records, rank_totals). Output bytes depend only on the config:
    repetitions are independent seeded jobs whose results are collected in
    repetition order before anything is written.
    """
    cfg = validate_config(cfg.resolved())
    os.makedirs(cfg.out_dir, exist_ok=True)
    job = partial(run_single_rep, cfg)
    reps = list(range(cfg.repetitions))
    if threads > 1 and cfg.repetitions > 1:
        with Pool(processes=min(threads, cfg.repetitions)) as pool:
            results = pool.map(job, reps)
    else:
        results = [job(rep) for rep in reps]
    results.sort(key=lambda res: res.rep)

    records = [rec for res in results for rec in res.records]
    rank_totals = {
        (m, f): np.zeros(cfg.k + 1, dtype=np.int64)
        for m in cfg.methods
        for f in FIELDS
    }
    for res in results:
        for key, counts in res.rank_counts.items():
            rank_totals[key] += counts

    with open(os.path.join(cfg.out_dir, "scores.csv"), "w", newline="") as fh:
        write_scores_csv(records, fh)
    with open(os.path.join(cfg.out_dir, "ranks.csv"), "w", newline="") as fh:
        write_ranks_csv(rank_totals, cfg.methods, cfg.k, fh)
    if cfg.trace:
        for res in results:
            path = os.path.join(cfg.out_dir, f"trace_{res.rep}.csv")
            with open(path, "w", newline="") as fh:
                write_trace_csv(res.trace_rows, fh)
    return records, rank_totals
