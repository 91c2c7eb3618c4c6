"""Deterministic random sub-streams for the cycled experiments.

Every random draw in a run is made from a stream derived as
seed_stream(base_seed, repetition, cycle, role, unit): a counter-based Philox
generator keyed through numpy's SeedSequence with the id tuple as spawn key.
Identical tuples give identical streams; distinct tuples give statistically
independent ones. Nothing is shared between streams, so repetitions (and
blocks within a schedule group) can run in any order, serial or parallel,
without changing a single draw.
"""

import numpy as np

ROLES = ("spinup", "truth", "obs", "forecast", "analysis", "ranks")
_ROLE_IDS = {name: i for i, name in enumerate(ROLES)}


def seed_stream(base_seed, repetition, cycle, role, unit=0):
    """Independent Generator for one (repetition, cycle, role, unit) slot.

    role is one of ROLES; unit distinguishes parallel consumers inside a role
    (member index for forecasts, method id for analyses). All ids must be
    nonnegative integers.
    """
    if role not in _ROLE_IDS:
        raise ValueError(f"unknown role {role!r}; expected one of {ROLES}")
    ids = (int(repetition), int(cycle), _ROLE_IDS[role], int(unit))
    if min(ids) < 0 or int(base_seed) < 0:
        raise ValueError("base_seed, repetition, cycle, and unit must be nonnegative")
    seq = np.random.SeedSequence(entropy=int(base_seed), spawn_key=ids)
    return np.random.Generator(np.random.Philox(seed=seq))
