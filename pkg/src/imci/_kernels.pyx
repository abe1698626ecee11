# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: bit packing, FNV-1a dispatch hashing, MVCC visibility.

Semantics match ``_kernels_py`` exactly; ``imci.kernels`` picks one at import.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint8_t, uint64_t, int64_t

cnp.import_array()

cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001B3ULL


cdef inline uint64_t _fnv(uint64_t v) nogil:
    cdef uint64_t h = FNV_OFFSET
    cdef int i
    for i in range(8):
        h ^= v & 0xFF
        h *= FNV_PRIME
        v >>= 8
    return h


def fnv1a64(value):
    """FNV-1a over the 8 little-endian bytes of a signed 64-bit integer."""
    cdef int64_t s = value
    return _fnv(<uint64_t>s)


def fnv1a64_array(values):
    cdef const int64_t[::1] v = np.ascontiguousarray(values, dtype=np.int64)
    cdef Py_ssize_t n = v.shape[0], i
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _fnv(<uint64_t>v[i])
    return out


def bitpack(values, int width):
    """Pack uint64 values into ``width`` bits each, LSB first, byte aligned."""
    cdef const uint64_t[::1] v = np.ascontiguousarray(values, dtype=np.uint64)
    cdef Py_ssize_t n = v.shape[0], i
    if width == 0 or n == 0:
        return b""
    cdef Py_ssize_t nbytes = (n * width + 7) // 8
    out = bytearray(nbytes)
    cdef uint8_t[::1] o = out
    cdef uint64_t x
    cdef Py_ssize_t bit = 0, byte
    cdef int off, got, chunk
    with nogil:
        for i in range(n):
            x = v[i]
            got = 0
            while got < width:
                byte = bit >> 3
                off = bit & 7
                chunk = 8 - off
                if chunk > width - got:
                    chunk = width - got
                o[byte] |= <uint8_t>(((x >> got) & ((1 << chunk) - 1)) << off)
                got += chunk
                bit += chunk
    return bytes(out)


def bitunpack(data, int width, Py_ssize_t n):
    out = np.zeros(n, dtype=np.uint64)
    if n == 0 or width == 0:
        return out
    cdef const uint8_t[::1] d = memoryview(data).cast("B")
    cdef uint64_t[::1] o = out
    cdef Py_ssize_t i, bit = 0, byte
    cdef int off, got, chunk
    cdef uint64_t x
    with nogil:
        for i in range(n):
            x = 0
            got = 0
            while got < width:
                byte = bit >> 3
                off = bit & 7
                chunk = 8 - off
                if chunk > width - got:
                    chunk = width - got
                x |= (<uint64_t>((d[byte] >> off) & ((1 << chunk) - 1))) << got
                got += chunk
                bit += chunk
            o[i] = x
    return out


def visible_mask(insert_vid, delete_vid, uint64_t snapshot, Py_ssize_t n):
    """Rows r < n with insert_vid[r] <= snapshot < delete_vid[r].

    ``insert_vid`` may be None (map dropped): only the delete bound applies.
    """
    cdef const uint64_t[::1] dv = delete_vid
    cdef const uint64_t[::1] iv
    out = np.empty(n, dtype=np.bool_)
    cdef cnp.npy_bool[::1] o = out
    cdef Py_ssize_t i
    if insert_vid is None:
        with nogil:
            for i in range(n):
                o[i] = dv[i] > snapshot
    else:
        iv = insert_vid
        with nogil:
            for i in range(n):
                o[i] = iv[i] <= snapshot and dv[i] > snapshot
    return out
