"""
Random stream derivation for regret-forge.
All randomness flows through numpy Generators derived statelessly from
(master seed, indices), so parallel and serial runs consume identical streams.
"""

import numpy as np

RandomStream = np.random.Generator

_SEED_BITS = 63


def derive_stream(master_seed: int, *indices: int) -> RandomStream:
    """
    Build the child stream for a position in an experiment.

    The same (master_seed, indices) always yields a bit-identical stream,
    independent of how many other streams were derived before.

    Args:
        master_seed: 64-bit experiment seed
        indices: Position of the task (grid index, seed index, role, ...)

    Returns:
        A fresh numpy Generator
    """
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(i) for i in indices))
    return np.random.default_rng(seq)


def draw_seed(rng: RandomStream) -> int:
    """Draw a master seed from an existing stream (advances it by one draw)."""
    return int(rng.integers(0, 2 ** _SEED_BITS))
