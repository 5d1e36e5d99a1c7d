"""Offset search over neighbouring block scales.

The max-abs scale code ``c`` is the starting point; the search tries codes
``c + f`` for each integer offset ``f`` in a :class:`SearchRange` and keeps the
one with the smallest squared reconstruction error.  Because scale codes are
monotone in value, offset ``+1`` is always the next larger representable scale.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .blockquant import (
    NVFP4,
    BlockFormat,
    get_format,
    max_abs_codes,
    quantize_block,
    quantize_tensor,
    search_scales,
)
from .minifloat import MiniFloatSpec, enumerate_values

__all__ = [
    "SearchRange",
    "SearchResult",
    "DEFAULT_RANGE",
    "FULL_RANGE",
    "offset_scale",
    "scale_search",
    "exhaustive_oracle",
    "brute_force_losses",
    "offset_histogram",
    "histogram_csv",
]


@dataclass(frozen=True)
class SearchRange:
    f_min: int
    f_max: int
    scan_order: bool = False
    allow_excluding_zero: bool = False

    def __post_init__(self):
        if self.f_min > self.f_max:
            raise ValueError(f"empty search range [{self.f_min}, {self.f_max}]")
        if not self.allow_excluding_zero and not self.f_min <= 0 <= self.f_max:
            raise ValueError("search range must contain offset 0 (pass allow_excluding_zero for ablations)")

    @property
    def width(self) -> int:
        return self.f_max - self.f_min + 1

    def offsets(self) -> np.ndarray:
        """Offsets in evaluation order.

        Scan order walks ``f_min..f_max`` like the reference loop, so the first
        minimum found wins.  Otherwise offsets are visited by increasing
        ``|f|`` (negative first), which breaks ties toward the smallest
        magnitude and then the smaller offset.
        """
        fs = range(self.f_min, self.f_max + 1)
        if not self.scan_order:
            fs = sorted(fs, key=lambda f: (abs(f), f))
        return np.array(list(fs), dtype=np.int64)

    @classmethod
    def exhaustive(cls, fmt: BlockFormat) -> SearchRange:
        """Range reaching every finite scale code from any starting code."""
        n = fmt.max_scale_code
        return cls(-n, n)

    @classmethod
    def of_width(cls, width: int) -> SearchRange:
        """Range of ``width`` offsets with ``f_min = 1 - f_max`` for even widths."""
        f_max = width // 2
        return cls(f_max - width + 1, f_max)

    @classmethod
    def parse(cls, text: str) -> SearchRange:
        t = text.strip().lower()
        if t == "full":
            return FULL_RANGE
        if t == "default":
            return DEFAULT_RANGE
        lo, sep, hi = t.partition(":")
        if not sep:
            raise ValueError(f"bad search range {text!r}; expected F_MIN:F_MAX, 'full' or 'default'")
        return cls(int(lo), int(hi))

    def __str__(self) -> str:
        return f"{self.f_min}:{self.f_max}"


DEFAULT_RANGE = SearchRange(-2, 6)
FULL_RANGE = SearchRange(-127, 127)


@dataclass
class SearchResult:
    best_offset: int
    best_scale_code: int
    best_codes: np.ndarray
    loss: float
    offsets_evaluated: int


def offset_scale(s: int, f: int, spec: MiniFloatSpec) -> int | None:
    """Scale code ``s + f``, or None when it is zero, NaN or out of range."""
    c = s + f
    return c if 1 <= c <= spec.max_code else None


def _count_valid(start: int, r: SearchRange, max_code: int) -> int:
    lo = max(r.f_min, 1 - start)
    hi = min(r.f_max, max_code - start)
    return max(hi - lo + 1, 0)


def scale_search(x, fmt: BlockFormat | str = NVFP4, r: SearchRange = DEFAULT_RANGE) -> SearchResult:
    fmt = get_format(fmt)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != fmt.block_size:
        raise ValueError(f"block has {x.size} elements, format needs {fmt.block_size}")
    codes, offs, losses = search_scales(x.reshape(1, -1), fmt, r.offsets())
    code = int(codes[0])
    if code == 0:
        return SearchResult(0, 0, np.zeros(x.size, dtype=np.uint8), 0.0, 0)
    start = int(max_abs_codes(x.reshape(1, -1), fmt)[0])
    block = quantize_block(x, code, fmt)
    return SearchResult(int(offs[0]), code, block.codes, float(losses[0]),
                        _count_valid(start, r, fmt.max_scale_code))


# ---------------------------------------------------------------------------
# Independent oracle
# ---------------------------------------------------------------------------


def _nearest_by_table(spec: MiniFloatSpec, y: np.ndarray) -> np.ndarray:
    """Nearest representable value by table lookup; ties go to the even significand."""
    vals = np.array(sorted({v for _, v in enumerate_values(spec)}))
    y = np.clip(y, vals[0], vals[-1])
    idx = np.clip(np.searchsorted(vals, y), 1, vals.size - 1)
    lo, hi = vals[idx - 1], vals[idx]
    dl, dh = y - lo, hi - y
    lo_even = np.mod(lo / (hi - lo), 2.0) == 0.0
    pick_lo = (dl < dh) | ((dl == dh) & lo_even)
    return np.where(pick_lo, lo, hi)


def brute_force_losses(blocks: np.ndarray, fmt: BlockFormat) -> np.ndarray:
    """Loss of every (block, finite nonzero scale code) pair: shape (nblocks, max_code + 1).

    Column 0 (the zero scale) holds the all-zero-codes loss.  Rounding goes
    through a sorted value table rather than the kernel's exponent arithmetic.
    """
    blocks = np.asarray(blocks, dtype=np.float64)
    out = np.empty((blocks.shape[0], fmt.max_scale_code + 1))
    for c in range(fmt.max_scale_code + 1):
        s = float(fmt.scale_table[c])
        if s == 0.0:
            xhat = np.zeros_like(blocks)
        else:
            xhat = _nearest_by_table(fmt.value_spec, blocks / s) * s
        d = blocks - xhat
        acc = np.zeros(blocks.shape[0])
        for i in range(blocks.shape[1]):
            acc = acc + d[:, i] * d[:, i]
        out[:, c] = acc
    return out


def exhaustive_oracle(x, fmt: BlockFormat | str = NVFP4) -> SearchResult:
    """Full-range search, cross-checked against an independent scan of every scale code."""
    fmt = get_format(fmt)
    res = scale_search(x, fmt, SearchRange.exhaustive(fmt))
    if res.best_scale_code == 0:
        return res
    per_code = brute_force_losses(np.asarray(x, dtype=np.float64).reshape(1, -1), fmt)[0, 1:]
    if not np.all(res.loss <= per_code):
        worst = int(np.argmin(per_code)) + 1
        raise AssertionError(
            f"search loss {res.loss!r} exceeds loss {per_code[worst - 1]!r} at scale code {worst}"
        )
    return res


# ---------------------------------------------------------------------------
# Offset statistics
# ---------------------------------------------------------------------------


def offset_histogram(X, fmt: BlockFormat | str = NVFP4, r: SearchRange = FULL_RANGE,
                     threads: int = 1, per_row_global: bool = False) -> dict[int, int]:
    qt = quantize_tensor(X, fmt, r, per_row_global=per_row_global, threads=threads)
    counts = Counter(qt.offsets.tolist())
    return dict(sorted(counts.items()))


def merge_histograms(*hists: dict[int, int]) -> dict[int, int]:
    total = Counter()
    for h in hists:
        total.update(h)
    return dict(sorted(total.items()))


def histogram_csv(hist: dict[int, int]) -> str:
    total = sum(hist.values())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["offset", "count", "fraction"])
    for f, c in sorted(hist.items()):
        w.writerow([f, c, repr(c / total) if total else "0.0"])
    return buf.getvalue()
