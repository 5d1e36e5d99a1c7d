# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled block scale search.

Must stay arithmetic-for-arithmetic identical to ``_search_fallback.py``:
same division, same RNE rounding, same left-to-right loss accumulation.
"""

import numpy as np

from libc.math cimport INFINITY, copysign, fabs
from libc.stdint cimport uint64_t


cdef union _bits:
    double d
    uint64_t u


cdef inline double _pow2(int k) noexcept nogil:
    # exact 2**k for normal-range k
    cdef _bits b
    b.u = <uint64_t>(k + 1023) << 52
    return b.d


cdef inline double _round_value(double y, int mant_bits, int min_exp,
                                double vmax, bint signed) noexcept nogil:
    # same result as frexp/ldexp/rint: scaling by powers of two is exact and
    # (t + 2**52) - 2**52 is round-half-even for 0 <= t < 2**52
    cdef _bits b
    cdef double a, t, r
    cdef int e
    if signed:
        a = fabs(y)
    else:
        a = y if y > 0.0 else 0.0
    if a >= vmax:
        # saturates either way; also keeps the exponent tricks below in range
        return copysign(vmax, y) if signed else vmax
    b.d = a
    e = <int>((b.u >> 52) & 0x7FF) - 1023
    if e < min_exp:
        e = min_exp
    t = a * _pow2(mant_bits - e)
    if t < 4503599627370496.0:
        t = (t + 4503599627370496.0) - 4503599627370496.0
    r = t * _pow2(e - mant_bits)
    if r > vmax:
        r = vmax
    if signed:
        return copysign(r, y)
    return r


cdef inline double _block_loss(const double[:, ::1] x, Py_ssize_t b, double s,
                               int mant_bits, int min_exp, double vmax,
                               bint signed, double bound) noexcept nogil:
    # stops once the partial sum reaches ``bound``: the caller only keeps strict improvements
    cdef Py_ssize_t i
    cdef Py_ssize_t n = x.shape[1]
    cdef double acc = 0.0
    cdef double d
    for i in range(n):
        d = x[b, i] - _round_value(x[b, i] / s, mant_bits, min_exp, vmax, signed) * s
        acc = acc + d * d
        if acc >= bound:
            return acc
    return acc


def search_blocks(const double[:, ::1] x, const double[::1] scale_table,
                  const long long[::1] start_codes, const long long[::1] offsets,
                  long long max_code, int mant_bits, int min_exp, double vmax,
                  bint signed):
    """Best (scale code, offset, loss) per block; code -1 when nothing was valid."""
    cdef Py_ssize_t nblocks = x.shape[0]
    cdef Py_ssize_t width = x.shape[1]
    cdef Py_ssize_t noff = offsets.shape[0]
    best_code_arr = np.empty(nblocks, dtype=np.int64)
    best_off_arr = np.empty(nblocks, dtype=np.int64)
    best_loss_arr = np.empty(nblocks, dtype=np.float64)
    cdef long long[::1] best_code = best_code_arr
    cdef long long[::1] best_off = best_off_arr
    cdef double[::1] best_loss = best_loss_arr
    cdef Py_ssize_t b, i, k
    cdef long long c
    cdef double loss, cur
    cdef bint zero

    with nogil:
        for b in range(nblocks):
            zero = True
            for i in range(width):
                if x[b, i] != 0.0:
                    zero = False
                    break
            if zero:
                best_code[b] = 0
                best_off[b] = 0
                best_loss[b] = 0.0
                continue
            best_code[b] = -1
            best_off[b] = 0
            cur = 0.0
            for k in range(noff):
                c = start_codes[b] + offsets[k]
                if c < 1 or c > max_code:
                    continue
                loss = _block_loss(x, b, scale_table[c], mant_bits, min_exp, vmax, signed,
                                  cur if best_code[b] >= 0 else INFINITY)
                if best_code[b] < 0 or loss < cur:
                    cur = loss
                    best_code[b] = c
                    best_off[b] = offsets[k]
            best_loss[b] = cur
    return best_code_arr, best_off_arr, best_loss_arr
