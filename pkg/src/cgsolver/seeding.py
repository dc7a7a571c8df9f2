"""Named random sub-streams derived from a single integer seed.

Each name maps to a fixed spawn key, so adding a stream never shifts the
others and e.g. the init stream can be held fixed while the data stream varies.
"""

from __future__ import annotations

import numpy as np

STREAMS = ("data", "init", "batch", "eval")

# instance seeds drawn for training and evaluation live in disjoint halves
# of [0, 2**63): evaluation seeds carry the top bit
_HALF = 2**62


def stream(seed, name):
    if name not in STREAMS:
        raise KeyError(f"unknown stream {name!r}; expected one of {STREAMS}")
    seq = np.random.SeedSequence(int(seed), spawn_key=(STREAMS.index(name),))
    return np.random.default_rng(seq)


def streams(seed):
    return {name: stream(seed, name) for name in STREAMS}


def train_instance_seeds(rng, count):
    return [int(s) for s in rng.integers(0, _HALF, size=count)]


def eval_instance_seeds(rng, count):
    return [int(s) + _HALF for s in rng.integers(0, _HALF, size=count)]
