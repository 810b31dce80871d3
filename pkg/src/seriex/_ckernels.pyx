# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled integer kernels: int8 GEMM with int64 accumulation, bit packing."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int8_t, int32_t, int64_t, uint8_t

cnp.import_array()


def gemm_i8(const int8_t[:, :] a, const int8_t[:, :] b):
    """Exact int64 product of two int8 matrices (operands widened to int32)."""
    cdef Py_ssize_t m = a.shape[0], kdim = a.shape[1], n = b.shape[1]
    if b.shape[0] != kdim:
        raise ValueError("inner dimensions differ")
    out = np.zeros((m, n), dtype=np.int64)
    cdef int64_t[:, ::1] c = out
    cdef Py_ssize_t i, k, j
    cdef int32_t aik
    with nogil:
        for i in range(m):
            for k in range(kdim):
                aik = a[i, k]
                if aik == 0:
                    continue
                for j in range(n):
                    c[i, j] += aik * <int32_t>b[k, j]
    return out


def pack_bits(values, int bits):
    cdef const int8_t[::1] v = np.ascontiguousarray(values, dtype=np.int8).ravel()
    cdef Py_ssize_t n = v.shape[0]
    cdef Py_ssize_t nbytes = (n * bits + 7) // 8
    out = np.zeros(nbytes, dtype=np.uint8)
    cdef uint8_t[::1] p = out
    cdef uint8_t mask = <uint8_t>((1 << bits) - 1)
    cdef Py_ssize_t i, bitpos
    with nogil:
        for i in range(n):
            bitpos = i * bits
            p[bitpos >> 3] |= (<uint8_t>v[i] & mask) << (bitpos & 7)
    return out


def unpack_bits(payload, int bits, Py_ssize_t n):
    cdef const uint8_t[::1] p = np.ascontiguousarray(payload, dtype=np.uint8)
    out = np.empty(n, dtype=np.int8)
    cdef int8_t[::1] v = out
    cdef int mask = (1 << bits) - 1
    cdef int half = 1 << (bits - 1)
    cdef int field
    cdef Py_ssize_t i, bitpos
    with nogil:
        for i in range(n):
            bitpos = i * bits
            field = (p[bitpos >> 3] >> (bitpos & 7)) & mask
            if field >= half:
                field -= 1 << bits
            v[i] = <int8_t>field
    return out
