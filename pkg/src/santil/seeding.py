"""Deterministic seed derivation from one master seed.

One run seed fans out into independent streams keyed by purpose and task
position, so reordering tasks in an ablation keeps the init and shuffle
noise attached to each position.
"""

from __future__ import annotations

import numpy as np

TAG_INIT = 0
TAG_SHUFFLE = 1
TAG_SPLIT = 2
TAG_PERM = 3

COMPONENT_BACKBONE = 0
COMPONENT_ADJUST = 1
COMPONENT_CLASSIFIER = 2


def derive_seed(master: int, *key: int) -> int:
    """Stable child seed for (master, *key) via SeedSequence hashing."""
    ss = np.random.SeedSequence([int(master)] + [int(k) for k in key])
    return int(ss.generate_state(1, np.uint64)[0])
