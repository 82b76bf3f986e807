"""Seeded random streams shared by every sampler in the package.

All randomness is drawn as uniform doubles and pushed through inverse
transforms, so a block of ``B`` iterations drawn in one call is bit-identical
to ``B`` successive single-iteration draws from the same generator.
"""

from __future__ import annotations

import numpy as np

# random() returns multiples of 2**-53 in [0, 1); shifting by half a step keeps
# inverse CDFs away from 0 and 1.
_HALF_ULP = 2.0**-54


def replication_rng(seed: int, replication: int) -> np.random.Generator:
    """Generator owning the stream of one replication of one experiment."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replication),))
    return np.random.Generator(np.random.PCG64(ss))


def open_uniform(rng: np.random.Generator, size) -> np.ndarray:
    """Uniform draws on the open interval (0, 1)."""
    return rng.random(size) + _HALF_ULP


def draw_blocks(rngs, block: int, width: int) -> np.ndarray:
    """Draw ``block`` iterations of ``width`` uniforms from each generator.

    Returns an array of shape ``(block, len(rngs), width)``.
    """
    out = np.empty((block, len(rngs), width))
    for r, rng in enumerate(rngs):
        out[:, r, :] = open_uniform(rng, (block, width))
    return out
