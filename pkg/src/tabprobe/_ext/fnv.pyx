# cython: language_level=3, boundscheck=False, wraparound=False
from libc.stdint cimport uint64_t

cdef uint64_t FNV_OFFSET = 0xcbf29ce484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001b3ULL


def fnv1a_64(const unsigned char[::1] data not None, uint64_t seed=FNV_OFFSET):
    """64-bit FNV-1a over a contiguous byte buffer."""
    cdef uint64_t h = seed
    cdef Py_ssize_t i, n = data.shape[0]
    with nogil:
        for i in range(n):
            h ^= data[i]
            h *= FNV_PRIME
    return h
