"""Micro-block quantization: max-abs scaling, (de)quantization, loss, containers."""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import kernels
from ._search_fallback import block_losses
from .minifloat import (
    MiniFloatSpec,
    decode_codes,
    decode_table,
    encode_values,
    parse_spec,
    round_to,
    round_values,
)

__all__ = [
    "BlockFormat",
    "NVFP4",
    "MXFP4",
    "MXFP6",
    "QuantizedBlock",
    "QuantizedTensor",
    "get_format",
    "max_abs_scale",
    "max_abs_codes",
    "quantize_block",
    "dequantize_block",
    "block_loss",
    "search_scales",
    "quantize_tensor",
    "mse",
    "row_global_scales",
    "save_quantized",
    "load_quantized",
    "read_raw",
    "write_raw",
]

SCALE_RULES = ("nearest", "pow2_floor")


@dataclass(frozen=True)
class BlockFormat:
    """Value format, scale format and block length of a microscaling format.

    ``scale_rule`` picks how the max-abs scale is derived: ``"nearest"`` rounds
    ``amax / max_value`` into the scale format; ``"pow2_floor"`` is the shared
    exponent rule of the MX formats, ``floor(log2 amax) - floor(log2 max_value)``.
    """

    value_spec: MiniFloatSpec
    scale_spec: MiniFloatSpec
    block_size: int
    scale_rule: str = "nearest"

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.scale_rule not in SCALE_RULES:
            raise ValueError(f"unknown scale_rule {self.scale_rule!r}")
        if self.scale_rule == "pow2_floor" and self.scale_spec.mantissa_bits != 0:
            raise ValueError("pow2_floor needs a power-of-two scale format (no mantissa bits)")
        if self.scale_spec.signed:
            raise ValueError("scale formats must be unsigned")

    @property
    def name(self) -> str:
        return f"{self.value_spec.name}/{self.scale_spec.name}/{self.block_size}" + (
            "/pow2" if self.scale_rule == "pow2_floor" else ""
        )

    @property
    def max_value(self) -> float:
        return self.value_spec.max_value

    @property
    def max_scale_code(self) -> int:
        return self.scale_spec.max_code

    @property
    def max_scale_value(self) -> float:
        return self.scale_spec.max_value

    @cached_property
    def scale_table(self) -> np.ndarray:
        return decode_table(self.scale_spec)[: self.max_scale_code + 1]

    @property
    def bits_per_element(self) -> float:
        return self.value_spec.width + 8 / self.block_size

    def with_block_size(self, block_size: int) -> BlockFormat:
        return BlockFormat(self.value_spec, self.scale_spec, block_size, self.scale_rule)


NVFP4 = BlockFormat(parse_spec("E2M1"), parse_spec("E4M3U"), 16)
MXFP4 = BlockFormat(parse_spec("E2M1"), parse_spec("E8M0U"), 32, "pow2_floor")
MXFP6 = BlockFormat(parse_spec("E2M3"), parse_spec("E8M0U"), 32, "pow2_floor")

_PRESETS = {"nvfp4": NVFP4, "mxfp4": MXFP4, "mxfp6": MXFP6, "mxfp6_e2m3": MXFP6}


def get_format(name: str | BlockFormat) -> BlockFormat:
    """Preset name (``nvfp4``, ``mxfp4``, ``mxfp6``) or ``VALUE/SCALE/BLOCK[/pow2]``."""
    if isinstance(name, BlockFormat):
        return name
    key = name.strip().lower()
    if key in _PRESETS:
        return _PRESETS[key]
    parts = name.strip().split("/")
    if len(parts) not in (3, 4) or (len(parts) == 4 and parts[3].lower() != "pow2"):
        raise ValueError(f"bad block format {name!r}; expected a preset or VALUE/SCALE/BLOCK[/pow2]")
    rule = "pow2_floor" if len(parts) == 4 else "nearest"
    return BlockFormat(parse_spec(parts[0]), parse_spec(parts[1]), int(parts[2]), rule)


@dataclass
class QuantizedBlock:
    codes: np.ndarray
    scale_code: int


# ---------------------------------------------------------------------------
# Max-abs scale
# ---------------------------------------------------------------------------


def max_abs_codes(blocks: np.ndarray, fmt: BlockFormat) -> np.ndarray:
    """Max-abs scale code for every row of a (nblocks, block_size) array."""
    amax = np.max(np.abs(blocks), axis=1)
    if fmt.scale_rule == "pow2_floor":
        _, ex_a = np.frexp(amax)
        _, ex_v = math.frexp(fmt.max_value)
        codes = (ex_a - 1) - (ex_v - 1) + fmt.scale_spec.bias
        codes = np.clip(codes, 1, fmt.max_scale_code)
        return np.where(amax == 0, 0, codes).astype(np.int64)
    s = round_values(fmt.scale_spec, amax / fmt.max_value)
    codes = encode_values(fmt.scale_spec, s).astype(np.int64)
    # a nonzero block never gets the zero scale; it takes the smallest positive one
    return np.where(amax > 0, np.maximum(codes, 1), 0)


def max_abs_scale(x, fmt: BlockFormat) -> int:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("block contains non-finite values")
    if fmt.scale_rule == "nearest":
        amax = float(np.max(np.abs(x)))
        code = round_to(fmt.scale_spec, amax / fmt.max_value).bits
        return max(code, 1) if amax > 0 else 0
    return int(max_abs_codes(x.reshape(1, -1), fmt)[0])


# ---------------------------------------------------------------------------
# Single blocks
# ---------------------------------------------------------------------------


def _decode_scale(fmt: BlockFormat, scale_code: int) -> float:
    if not 0 <= scale_code <= fmt.max_scale_code:
        raise ValueError(f"scale code {scale_code} is not a finite {fmt.scale_spec.name} code")
    return float(fmt.scale_table[scale_code])


def quantize_block(x, scale_code: int, fmt: BlockFormat) -> QuantizedBlock:
    x = np.asarray(x, dtype=np.float64)
    s = _decode_scale(fmt, scale_code)
    if s == 0.0:
        return QuantizedBlock(np.zeros(x.shape, dtype=np.uint8), 0)
    q = round_values(fmt.value_spec, x / s)
    return QuantizedBlock(encode_values(fmt.value_spec, q), scale_code)


def dequantize_block(b: QuantizedBlock, fmt: BlockFormat, global_scale: float = 1.0) -> np.ndarray:
    s = _decode_scale(fmt, b.scale_code)
    return decode_codes(fmt.value_spec, b.codes) * s * global_scale


def block_loss(x, b: QuantizedBlock, fmt: BlockFormat) -> float:
    """Sum of squared errors, accumulated left to right like the search kernel."""
    x = np.asarray(x, dtype=np.float64)
    d = x - dequantize_block(b, fmt)
    acc = 0.0
    for v in d * d:
        acc += float(v)
    return acc


# ---------------------------------------------------------------------------
# Batched search engine
# ---------------------------------------------------------------------------


def search_scales(blocks: np.ndarray, fmt: BlockFormat, offsets, threads: int = 1):
    """Run the block search over rows of ``blocks``.

    ``offsets`` is scanned in order with a strict ``<`` update, so the first
    minimum in scan order wins.  Returns ``(scale_codes, offsets, losses)``.
    """
    blocks = np.ascontiguousarray(blocks, dtype=np.float64)
    if not np.all(np.isfinite(blocks)):
        raise ValueError("input contains non-finite values")
    start = max_abs_codes(blocks, fmt)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    vs = fmt.value_spec
    args = (fmt.scale_table, offsets, fmt.max_scale_code, vs.mantissa_bits,
            vs.min_exponent, vs.max_value, vs.signed)

    def run(lo, hi):
        return kernels.search_blocks(blocks[lo:hi], args[0], start[lo:hi], *args[1:])

    n = blocks.shape[0]
    if threads <= 1 or n < 2 * threads:
        codes, offs, losses = run(0, n)
    else:
        bounds = np.linspace(0, n, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, bounds[:-1], bounds[1:]))
        codes, offs, losses = (np.concatenate(p) for p in zip(*parts))
    if np.any(codes < 0):
        raise ValueError("no valid scale offset in the search range for some block")
    return codes, offs, losses


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------


@dataclass
class QuantizedTensor:
    shape: tuple
    fmt: BlockFormat
    codes: np.ndarray          # (nblocks, block_size) uint8 value codes
    scale_codes: np.ndarray    # (nblocks,) uint8
    global_scales: np.ndarray | None = None   # (rows,) float32
    offsets: np.ndarray | None = field(default=None, compare=False)
    losses: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def num_blocks(self) -> int:
        return self.codes.shape[0]

    @property
    def rows(self) -> int:
        return int(np.prod(self.shape[:-1], dtype=np.int64)) if len(self.shape) > 1 else 1

    def block(self, i: int) -> QuantizedBlock:
        return QuantizedBlock(self.codes[i], int(self.scale_codes[i]))

    @property
    def blocks(self):
        return [self.block(i) for i in range(self.num_blocks)]

    def dequantize(self) -> np.ndarray:
        vals = decode_codes(self.fmt.value_spec, self.codes)
        scales = self.fmt.scale_table[self.scale_codes.astype(np.int64)]
        out = (vals * scales[:, None]).reshape(self.rows, -1)
        if self.global_scales is not None:
            out = out * self.global_scales.astype(np.float64)[:, None]
        return out.reshape(self.shape)

    def storage_bits(self) -> int:
        """Payload bits: value codes, scale codes and optional 32-bit row scales."""
        bits = self.codes.size * self.fmt.value_spec.width + self.num_blocks * 8
        if self.global_scales is not None:
            bits += 32 * self.global_scales.size
        return bits


def row_global_scales(rows: np.ndarray, fmt: BlockFormat, headroom: int = 0) -> np.ndarray:
    """Per-row scale mapping each row max onto the largest block scale.

    ``headroom`` lowers the target to the scale ``headroom`` codes below the
    maximum so a searched block scale can still move upward.
    """
    top = fmt.scale_table[fmt.max_scale_code - headroom]
    amax = np.max(np.abs(rows), axis=1)
    g = amax / (fmt.max_value * top)
    # zero rows get 1; others stay in the normal float32 range so no precision is lost
    g = np.where(amax > 0, np.maximum(g, np.finfo(np.float32).tiny), 1.0)
    return g.astype(np.float32)


def _as_offsets(method):
    if method in (None, "max_abs"):
        return np.array([0], dtype=np.int64)
    if isinstance(method, str):
        from .scalesearch import SearchRange
        return SearchRange.parse(method).offsets()
    return method.offsets()


def quantize_tensor(
    X,
    fmt: BlockFormat | str = NVFP4,
    method="max_abs",
    per_row_global: bool = False,
    threads: int = 1,
    headroom: int = 0,
    per_tensor_global: bool = False,
) -> QuantizedTensor:
    """Quantize ``X`` in independent blocks along its last dimension.

    ``method`` is ``"max_abs"``, a :class:`~scalelab.scalesearch.SearchRange`
    or a range string such as ``"-2:6"`` / ``"full"``.  A float32 second-level
    scale, per row or for the whole tensor, can be divided out first; it is
    stored once per row either way.
    """
    fmt = get_format(fmt)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 0 or X.shape[-1] % fmt.block_size:
        raise ValueError(f"last dimension of shape {X.shape} is not divisible by {fmt.block_size}")
    rows = X.reshape(-1, X.shape[-1])
    g = None
    if per_row_global and per_tensor_global:
        raise ValueError("choose per-row or per-tensor global scaling, not both")
    if per_row_global or per_tensor_global:
        if not np.all(np.isfinite(rows)):
            raise ValueError("input contains non-finite values")
        if per_row_global:
            g = row_global_scales(rows, fmt, headroom)
        else:
            g = row_global_scales(rows.reshape(1, -1), fmt, headroom)
            g = np.repeat(g, rows.shape[0])
        rows = rows / g.astype(np.float64)[:, None]
    blocks = rows.reshape(-1, fmt.block_size)
    codes, offs, losses = search_scales(blocks, fmt, _as_offsets(method), threads)
    s = fmt.scale_table[codes]
    with np.errstate(divide="ignore", invalid="ignore"):
        q = round_values(fmt.value_spec, np.where(s[:, None] > 0, blocks / s[:, None], 0.0))
    return QuantizedTensor(
        shape=tuple(X.shape),
        fmt=fmt,
        codes=encode_values(fmt.value_spec, q),
        scale_codes=codes.astype(np.uint8),
        global_scales=g,
        offsets=offs,
        losses=losses,
    )


def mse(X, qt: QuantizedTensor) -> float:
    X = np.asarray(X, dtype=np.float64)
    d = X - qt.dequantize()
    return float(np.mean(d * d))


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

MAGIC = b"SQT1"
VERSION = 1
_FLAG_GLOBAL = 1
_FLAG_POW2 = 2


def _pack_codes(codes: np.ndarray, width: int) -> bytes:
    flat = codes.reshape(-1).astype(np.uint8)
    if width > 4:
        return flat.tobytes()
    if flat.size % 2:
        flat = np.append(flat, np.uint8(0))
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8).tobytes()


def _unpack_codes(buf: bytes, count: int, width: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    if width > 4:
        return raw[:count].copy()
    out = np.empty(raw.size * 2, dtype=np.uint8)
    out[0::2] = raw & 0x0F
    out[1::2] = raw >> 4
    return out[:count]


def _write_str(s: str) -> bytes:
    b = s.encode("ascii")
    return struct.pack("<B", len(b)) + b


def save_quantized(path, qt: QuantizedTensor) -> int:
    """Write the little-endian container; returns the number of bytes written."""
    fmt = qt.fmt
    for spec in (fmt.value_spec, fmt.scale_spec):
        if parse_spec(spec.name) != spec:
            raise ValueError(f"{spec.name} has non-default parameters and cannot be serialized")
    flags = (_FLAG_GLOBAL if qt.global_scales is not None else 0) | (
        _FLAG_POW2 if fmt.scale_rule == "pow2_floor" else 0
    )
    header = MAGIC + struct.pack("<HHB", VERSION, flags, len(qt.shape))
    header += struct.pack(f"<{len(qt.shape)}Q", *qt.shape)
    header += _write_str(fmt.value_spec.name) + _write_str(fmt.scale_spec.name)
    header += struct.pack("<I", fmt.block_size)
    body = _pack_codes(qt.codes, fmt.value_spec.width) + qt.scale_codes.astype(np.uint8).tobytes()
    if qt.global_scales is not None:
        body += qt.global_scales.astype("<f4").tobytes()
    data = header + body
    Path(path).write_bytes(data)
    return len(data)


def load_quantized(path) -> QuantizedTensor:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a quantized tensor file")
    pos = 4
    version, flags, ndim = struct.unpack_from("<HHB", data, pos)
    pos += 5
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    shape = struct.unpack_from(f"<{ndim}Q", data, pos)
    pos += 8 * ndim
    names = []
    for _ in range(2):
        (n,) = struct.unpack_from("<B", data, pos)
        names.append(data[pos + 1 : pos + 1 + n].decode("ascii"))
        pos += 1 + n
    (block_size,) = struct.unpack_from("<I", data, pos)
    pos += 4
    fmt = BlockFormat(parse_spec(names[0]), parse_spec(names[1]), block_size,
                      "pow2_floor" if flags & _FLAG_POW2 else "nearest")
    count = int(np.prod(shape, dtype=np.int64))
    nblocks = count // block_size
    width = fmt.value_spec.width
    nbytes = count if width > 4 else (count + 1) // 2
    codes = _unpack_codes(data[pos : pos + nbytes], count, width).reshape(nblocks, block_size)
    pos += nbytes
    scale_codes = np.frombuffer(data, dtype=np.uint8, count=nblocks, offset=pos).copy()
    pos += nblocks
    g = None
    if flags & _FLAG_GLOBAL:
        rows = count // shape[-1]
        g = np.frombuffer(data, dtype="<f4", count=rows, offset=pos).astype(np.float32)
        pos += 4 * rows
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return QuantizedTensor(tuple(int(s) for s in shape), fmt, codes, scale_codes, g)


def read_raw(path, shape) -> np.ndarray:
    """Headerless little-endian float32 file -> float64 array of ``shape``."""
    raw = np.fromfile(path, dtype="<f4")
    shape = tuple(int(s) for s in shape)
    if raw.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{path}: holds {raw.size} floats, shape {shape} needs {int(np.prod(shape))}")
    return raw.astype(np.float64).reshape(shape)


def write_raw(path, X) -> None:
    np.asarray(X, dtype="<f4").tofile(path)
