"""Named child random streams derived from one run seed.

A stream is ``numpy.random.Generator(PCG64(SeedSequence(seed, spawn_key=(crc32(name),))))``.
The derivation depends only on the seed and the stream name, so adding a
new stream never perturbs existing ones.
"""

import zlib

import numpy as np

RNG_ALGORITHM = "numpy.PCG64/SeedSequence(seed, spawn_key=(crc32(name),))"
STREAMS = ("env", "agent-noise", "rff", "buffer-sampling", "init", "eval")


def stream(seed, name):
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))
