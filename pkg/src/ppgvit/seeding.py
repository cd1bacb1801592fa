"""All randomness derives from one run seed through named streams."""
import numpy as np

RNG_ENCODER, RNG_LORA, RNG_HEAD, RNG_SPLIT, RNG_SHUFFLE, RNG_DROPOUT = range(6)
RNG_SYNTH = 101


def derived_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for one purpose, e.g. ``derived_rng(seed, RNG_SHUFFLE, epoch)``."""
    return np.random.default_rng([int(seed), *(int(s) for s in stream)])
