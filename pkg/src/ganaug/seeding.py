import numpy as np


def derive_seed(*keys: int) -> int:
    """Mix integer keys into a fresh 63-bit seed.

    Used wherever a sub-stream needs its own seed (per epoch, per repetition)
    so that neighbouring keys do not produce correlated streams.
    """
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)
