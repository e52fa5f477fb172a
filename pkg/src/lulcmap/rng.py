"""Named random substreams derived from a single run seed.

Every source of randomness (weight init, dataset split, epoch shuffling,
augmentation, dropout) draws from its own stream so that one `seed` value
reproduces an entire run and changing one consumer does not perturb the
others.  Streams are derived with `numpy.random.SeedSequence`, which is
stable across platforms.
"""

from __future__ import annotations

import numpy as np

# Fixed tags keep the derivation independent of call order.
_STREAM_TAGS = {
    "init": 0xA1,
    "split": 0xA2,
    "shuffle": 0xA3,
    "augment": 0xA4,
    "dropout": 0xA5,
}


def _sequence(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    if name not in _STREAM_TAGS:
        raise ValueError(f"unknown rng stream {name!r}; known: {sorted(_STREAM_TAGS)}")
    return np.random.SeedSequence([int(seed), _STREAM_TAGS[name], *map(int, extra)])


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for stream `name`, optionally keyed by extra ints (epoch, index...)."""
    return np.random.default_rng(_sequence(seed, name, *extra))


def substream_seed(seed: int, name: str, *extra: int) -> int:
    """Plain integer seed derived from a named stream, for APIs that take ints."""
    return int(_sequence(seed, name, *extra).generate_state(1, dtype=np.uint32)[0])
