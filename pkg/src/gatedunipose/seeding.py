"""SplitMix64 seed derivation.

Child seeds depend only on the parent seed and the key path, never on call
order, so per-sample or per-parameter streams agree between serial and
parallel generation.
"""

_MASK = (1 << 64) - 1


def splitmix64(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Fold ``keys`` into ``seed`` one SplitMix64 step at a time."""
    state = splitmix64(int(seed) & _MASK)
    for key in keys:
        state = splitmix64(state ^ (int(key) & _MASK))
    return state
