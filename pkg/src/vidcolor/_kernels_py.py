"""Pure-Python versions of the compiled kernels in ``_kernels.pyx``."""

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data, state: int = FNV_OFFSET) -> int:
    h = state
    for byte in bytes(data):
        h = ((h ^ byte) * FNV_PRIME) & _MASK
    return h
