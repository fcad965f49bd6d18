"""Per-object random streams derived from a master seed.

Object ``i`` of a dataset uses seed ``master + i``; independent purposes
(phantom geometry, illumination, photon noise) draw from separate child
streams of that seed so changing one never perturbs another.
"""

import numpy as np

PHANTOM, PATTERN, NOISE, SHARED, MODEL, TRAIN, SAMPLE = range(7)


def object_rng(master_seed: int, index: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master_seed) + int(index), spawn_key=(stream,))
    return np.random.default_rng(ss)


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    return object_rng(seed, 0, stream)
