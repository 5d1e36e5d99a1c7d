"""NumPy implementation of the block scale search (used when the extension is absent).

Bitwise-identical to the compiled kernel: losses are accumulated column by
column in the same order instead of through ``np.sum``'s pairwise reduction.
"""

import numpy as np


def _round_values(y, mant_bits, min_exp, vmax, signed):
    a = np.abs(y) if signed else np.maximum(y, 0.0)
    _, ex = np.frexp(a)
    q = np.ldexp(1.0, np.maximum(ex - 1, min_exp) - mant_bits)
    r = np.minimum(np.rint(a / q) * q, vmax)
    return np.copysign(r, y) if signed else r


def block_losses(x, s, mant_bits, min_exp, vmax, signed):
    """Squared reconstruction error per block at per-block scale ``s`` (> 0)."""
    s = s[:, None]
    d = x - _round_values(x / s, mant_bits, min_exp, vmax, signed) * s
    d *= d
    acc = np.zeros(x.shape[0])
    for i in range(x.shape[1]):
        acc = acc + d[:, i]
    return acc


def search_blocks(x, scale_table, start_codes, offsets, max_code,
                  mant_bits, min_exp, vmax, signed):
    nblocks = x.shape[0]
    zero = ~np.any(x != 0.0, axis=1)
    best_code = np.full(nblocks, -1, dtype=np.int64)
    best_off = np.zeros(nblocks, dtype=np.int64)
    best_loss = np.zeros(nblocks)
    live = ~zero
    for f in offsets:
        c = start_codes + f
        ok = live & (c >= 1) & (c <= max_code)
        if not ok.any():
            continue
        idx = np.flatnonzero(ok)
        loss = block_losses(x[idx], scale_table[c[idx]], mant_bits, min_exp, vmax, signed)
        take = (best_code[idx] < 0) | (loss < best_loss[idx])
        sel = idx[take]
        best_loss[sel] = loss[take]
        best_code[sel] = c[sel]
        best_off[sel] = f
    best_code[zero] = 0
    return best_code, best_off, best_loss
