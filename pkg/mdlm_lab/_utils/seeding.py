import numpy as np


def derive_seed(base_seed: int, index: int) -> int:
    """Mix a base seed with a run (or shard) index.

    The result depends only on ``(base_seed, index)``, so the order in which runs
    execute never changes any run's randomness.

    Args:
        base_seed (int): Seed of the whole job.
        index (int): Zero-based run or shard index.

    Returns:
        int: A 63-bit seed for ``numpy.random.default_rng``.
    """
    sequence = np.random.SeedSequence([int(base_seed), int(index)])
    return int(sequence.generate_state(1, dtype=np.uint64)[0]) >> 1


def derived_rng(base_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base_seed, index))
