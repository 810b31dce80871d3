"""Pure numpy versions of the hot kernels.

Used when the compiled extension is unavailable or ``SERIEX_PURE_PYTHON=1``.
Every function here has a twin in ``_ckernels.pyx`` with the same signature
and bit-identical results.
"""
import numpy as np


def gemm_i8(a, b):
    """Exact int64 product of two int8 matrices."""
    return np.matmul(a.astype(np.int64), b.astype(np.int64))


def pack_bits(values, bits):
    v = np.ascontiguousarray(values, dtype=np.int8).ravel()
    if bits == 8:
        return v.view(np.uint8).copy()
    per_byte = 8 // bits
    mask = (1 << bits) - 1
    n = v.size
    nbytes = -(-n * bits // 8)
    fields = np.zeros(nbytes * per_byte, dtype=np.uint8)
    fields[:n] = v.view(np.uint8) & mask
    fields = fields.reshape(nbytes, per_byte)
    out = np.zeros(nbytes, dtype=np.uint8)
    for slot in range(per_byte):
        out |= fields[:, slot] << np.uint8(slot * bits)
    return out


def unpack_bits(payload, bits, n):
    p = np.ascontiguousarray(payload, dtype=np.uint8)
    if bits == 8:
        return p[:n].view(np.int8).copy()
    per_byte = 8 // bits
    mask = (1 << bits) - 1
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits)[None, :]
    fields = ((p[:, None] >> shifts) & mask).ravel()[:n].astype(np.int16)
    # sign-extend the X-bit field
    fields = np.where(fields >= (1 << (bits - 1)), fields - (1 << bits), fields)
    return fields.astype(np.int8)
