"""Deterministic RNG derivation.

Every stochastic component draws from its own stream derived from
(base seed, stream id, optional per-item keys) through SeedSequence, so
adding draws to one component never shifts another, and per-scene work can
be farmed out to processes while staying bit-reproducible.
"""

import numpy as np

STREAM_SCENE = 1
STREAM_PANOPTIC = 2
STREAM_ENCODER = 3
STREAM_HEAD = 4
STREAM_PARAMS = 5


def derive_rng(base, *keys):
    """Generator seeded from (base, *keys); all components must be ints >= 0."""
    entropy = [int(base)]
    entropy.extend(int(k) for k in keys)
    if any(k < 0 for k in entropy):
        raise ValueError("seed components must be non-negative, got %r" % (entropy,))
    return np.random.default_rng(np.random.SeedSequence(entropy))
