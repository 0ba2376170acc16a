"""Pure-Python 64-bit FNV-1a, the fallback for the compiled kernel."""

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data, seed: int = FNV_OFFSET) -> int:
    h = seed
    for byte in memoryview(data).cast("B"):
        h = ((h ^ byte) * FNV_PRIME) & MASK
    return h
