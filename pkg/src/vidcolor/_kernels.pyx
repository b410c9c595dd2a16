# cython: language_level=3
"""Compiled hot loops. Mirrors ``_kernels_py`` exactly."""

from libc.stdint cimport uint64_t


cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001B3ULL


def fnv1a64(const unsigned char[::1] data not None, uint64_t state=FNV_OFFSET):
    cdef Py_ssize_t i, n = data.shape[0]
    cdef uint64_t h = state
    with nogil:
        for i in range(n):
            h ^= data[i]
            h *= FNV_PRIME
    return h
