"""Seed-stream derivation.

Every random draw in the package flows from a single master seed through
named substreams, so that independent concerns (graph generation, each
teacher's targets and init, student init, integrator noise) never share
or perturb each other's state.  A stream is addressed by the master seed
plus a tuple of small integers; the constants below document the address
space.
"""

from __future__ import annotations

import numpy as np

# top-level stream ids
SBM_EDGES = 0
SBM_FEATURES = 1
SBM_SPLITS = 2
SBM_MEANS = 3
TASK_TARGETS = 10      # + canonical task index
TEACHER_INIT = 11      # + canonical task index + role (0 enc, 1 task head, 2 ssl head)
STUDENT_INIT = 20      # + role (0 enc, 1 head)
GAMMA_INIT = 21
INTEGRATOR = 22
RUN = 30               # + run index, for multi-seed CLI runs
DELTA = 31


def stream(seed, *key):
    """Generator for the substream addressed by ``(seed, *key)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in key]]))


def derive_seed(seed, *key):
    """Collapse a substream address into a plain integer seed."""
    return int(np.random.SeedSequence([int(seed), *[int(k) for k in key]]).generate_state(1)[0])
