"""Named counter-based random streams.

Replicate ``r`` of an experiment seeded with ``seed`` always draws its noise
from the stream named ``(seed, r)``; auxiliary draws (randomised controls,
plan sampling) live on differently tagged streams so they never disturb the
noise.  This is what gives common random numbers across compared plans.
"""

import numpy as np

# SeedSequence ignores trailing zero words, so every key ends in a non-zero tag.
_NOISE, _CONTROL, _SAMPLING = 1, 2, 3


def _generator(*words):
    if any(int(w) < 0 for w in words):
        raise ValueError("seeds and stream keys must be non-negative")
    seq = np.random.SeedSequence([int(w) for w in words])
    return np.random.Generator(np.random.Philox(seq))


def noise_stream(seed, replicate=0):
    return _generator(seed, replicate, _NOISE)


def control_stream(seed, replicate=0):
    return _generator(seed, replicate, _CONTROL)


def sampling_stream(seed, purpose=0):
    return _generator(seed, purpose, _SAMPLING)
