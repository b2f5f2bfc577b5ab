"""Deterministic random streams.

Every stochastic step in the library draws from a Philox 4x64-10
counter-based generator (Salmon et al. constants, as shipped in numpy's
``np.random.Philox``).  A stream is identified by a user seed plus a tuple
of integer tags; the tags are fed to ``SeedSequence`` as the spawn key, so
the mapping (seed, tags) -> stream is stable across runs, machines, and
worker layouts.
"""

import numpy as np

# Stream tags.  Fixed numbers, never reused for a different purpose.
PARAMS = 1        # model parameter initialization
SHUFFLE = 2       # per-epoch training order
AUGMENT = 3       # per-cloud augmentation (tags: epoch, cloud index)
SURFACE = 4       # mesh surface sampling
SYNTH_TRAIN = 5   # synthetic dataset, training split
SYNTH_TEST = 6    # synthetic dataset, test split
SYNTH_SEG = 7     # synthetic segmentation dataset
GENERIC = 8       # one-off draws (tests, benchmarks)


def stream(seed, *tags):
    """Return a ``numpy.random.Generator`` for the (seed, tags) stream."""
    key = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(t) for t in tags))
    return np.random.Generator(np.random.Philox(key))
