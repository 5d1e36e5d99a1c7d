"""Bit-exact emulation of small ExMy floating-point formats.

A format is described by a :class:`MiniFloatSpec`.  Codes are plain integers
laid out as ``[sign] exponent mantissa`` (sign bit only for signed formats).
Exponent field 0 is subnormal, so every format has an exact zero at code 0.

Rounding is round-to-nearest with ties to the even significand; magnitudes
beyond the largest finite value saturate instead of overflowing.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

__all__ = [
    "Code",
    "MiniFloatSpec",
    "E2M1",
    "E4M3",
    "UE4M3",
    "UE8M0",
    "parse_spec",
    "default_bias",
    "enumerate_values",
    "round_to",
    "decode",
    "round_values",
    "encode_values",
    "decode_codes",
    "sweep_grid",
]

SPECIAL_POLICIES = ("none", "top_code_is_nan", "ieee_like")

# (exponent_bits, mantissa_bits) -> policy used when a format is parsed by name.
_DEFAULT_POLICY = {
    (4, 3): "top_code_is_nan",
    (8, 0): "top_code_is_nan",
    (5, 2): "ieee_like",
}

# (exponent_bits, mantissa_bits) -> exponent bias when none is given.  E4M3
# uses 8 so that code 64 (0 1000 000) is 1.0; every other format uses the
# usual 2**(e-1) - 1.
_DEFAULT_BIAS = {(4, 3): 8}


def default_bias(exponent_bits: int, mantissa_bits: int) -> int:
    return _DEFAULT_BIAS.get(
        (exponent_bits, mantissa_bits), max((1 << max(exponent_bits - 1, 0)) - 1, 0)
    )


_SPEC_RE = re.compile(r"^(U?)E(\d+)M(\d+)(U?)$", re.IGNORECASE)


@dataclass(frozen=True)
class MiniFloatSpec:
    exponent_bits: int
    mantissa_bits: int
    signed: bool = True
    bias: int | None = None
    special_policy: str = "none"

    def __post_init__(self):
        if self.exponent_bits < 0 or self.mantissa_bits < 0:
            raise ValueError("exponent_bits and mantissa_bits must be >= 0")
        if self.special_policy not in SPECIAL_POLICIES:
            raise ValueError(f"unknown special_policy {self.special_policy!r}")
        if self.bias is None:
            object.__setattr__(self, "bias", default_bias(self.exponent_bits, self.mantissa_bits))
        if self.width > 8:
            raise ValueError(f"{self.name} is {self.width} bits wide; at most 8 are supported")
        if self.special_policy == "ieee_like" and self.exponent_bits < 2:
            raise ValueError("ieee_like formats need at least 2 exponent bits")
        if self.max_code < 1:
            raise ValueError(f"{self.name} has no nonzero finite value")

    @property
    def name(self) -> str:
        name = f"E{self.exponent_bits}M{self.mantissa_bits}" + ("" if self.signed else "U")
        if self.bias != default_bias(self.exponent_bits, self.mantissa_bits):
            name += f"b{self.bias}"
        return name

    @property
    def width(self) -> int:
        return self.exponent_bits + self.mantissa_bits + int(self.signed)

    @property
    def magnitude_bits(self) -> int:
        return self.exponent_bits + self.mantissa_bits

    @property
    def sign_mask(self) -> int:
        return (1 << self.magnitude_bits) if self.signed else 0

    @property
    def min_exponent(self) -> int:
        """Unbiased exponent of the smallest normal binade (also used by subnormals)."""
        return 1 - self.bias

    @property
    def max_code(self) -> int:
        """Magnitude code of the largest finite value."""
        top = (1 << self.magnitude_bits) - 1
        if self.special_policy == "top_code_is_nan":
            return top - 1
        if self.special_policy == "ieee_like":
            return ((1 << self.exponent_bits) - 1 << self.mantissa_bits) - 1
        return top

    @property
    def max_value(self) -> float:
        return _decode_magnitude(self, self.max_code)

    @property
    def min_positive(self) -> float:
        return _decode_magnitude(self, 1)

    def is_nan_code(self, code: int) -> bool:
        mag = code & ((1 << self.magnitude_bits) - 1)
        return mag > self.max_code

    def __str__(self) -> str:
        return self.name


class Code(NamedTuple):
    bits: int
    spec: MiniFloatSpec


def parse_spec(text: str | MiniFloatSpec) -> MiniFloatSpec:
    """Parse ``"E{e}M{m}[U]"`` (a leading ``U`` is also accepted)."""
    if isinstance(text, MiniFloatSpec):
        return text
    m = _SPEC_RE.match(text.strip())
    if not m:
        raise ValueError(f"bad format string {text!r}; expected E<e>M<m>[U]")
    e, mant = int(m.group(2)), int(m.group(3))
    unsigned = bool(m.group(1) or m.group(4))
    policy = _DEFAULT_POLICY.get((e, mant), "none")
    return MiniFloatSpec(e, mant, signed=not unsigned, special_policy=policy)


E2M1 = parse_spec("E2M1")
E4M3 = parse_spec("E4M3")
UE4M3 = parse_spec("E4M3U")
UE8M0 = parse_spec("E8M0U")


def _decode_magnitude(spec: MiniFloatSpec, mag: int) -> float:
    m = spec.mantissa_bits
    e_field = mag >> m
    mant = mag & ((1 << m) - 1)
    if e_field == 0:
        return math.ldexp(mant, spec.min_exponent - m)
    return math.ldexp((1 << m) + mant, e_field - spec.bias - m)


def decode(code: Code) -> float:
    bits, spec = code
    if not 0 <= bits < (1 << spec.width):
        raise ValueError(f"code {bits} out of range for {spec.name}")
    if spec.is_nan_code(bits):
        raise ValueError(f"code {bits} is a NaN code in {spec.name}")
    value = _decode_magnitude(spec, bits & ((1 << spec.magnitude_bits) - 1))
    return -value if bits & spec.sign_mask else value


def enumerate_values(spec: MiniFloatSpec) -> list[tuple[int, float]]:
    """All finite (code, value) pairs sorted by value; -0 is folded into +0."""
    out = [(mag, _decode_magnitude(spec, mag)) for mag in range(spec.max_code + 1)]
    if spec.signed:
        out += [(spec.sign_mask | mag, -v) for mag, v in out if mag != 0]
    return sorted(out, key=lambda cv: cv[1])


def _round_magnitude(spec: MiniFloatSpec, a: float) -> float:
    if a >= spec.max_value:
        return spec.max_value
    _, ex = math.frexp(a)
    quantum = math.ldexp(1.0, max(ex - 1, spec.min_exponent) - spec.mantissa_bits)
    return min(round(a / quantum) * quantum, spec.max_value)


def _encode_magnitude(spec: MiniFloatSpec, value: float) -> int:
    if value == 0.0:
        return 0
    m = spec.mantissa_bits
    _, ex = math.frexp(value)
    e = ex - 1
    if e < spec.min_exponent:
        return int(value / math.ldexp(1.0, spec.min_exponent - m))
    return ((e + spec.bias) << m) | (int(value / math.ldexp(1.0, e - m)) - (1 << m))


def round_to(spec: MiniFloatSpec, x: float) -> Code:
    """Code of the representable value nearest to ``x`` (RNE, saturating)."""
    if not math.isfinite(x):
        raise ValueError("cannot round a non-finite value")
    if not spec.signed and x < 0:
        x = 0.0
    mag = _encode_magnitude(spec, _round_magnitude(spec, abs(x)))
    if x < 0 and mag != 0:
        mag |= spec.sign_mask
    return Code(mag, spec)


# ---------------------------------------------------------------------------
# Vectorized forms (float64 arrays)
# ---------------------------------------------------------------------------


def round_values(spec: MiniFloatSpec, x: np.ndarray) -> np.ndarray:
    """Round each element to its nearest representable value (returned as reals)."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x) if spec.signed else np.maximum(x, 0.0)
    _, ex = np.frexp(a)
    quantum = np.ldexp(1.0, np.maximum(ex - 1, spec.min_exponent) - spec.mantissa_bits)
    r = np.minimum(np.rint(a / quantum) * quantum, spec.max_value)
    return np.copysign(r, x) if spec.signed else r


def encode_values(spec: MiniFloatSpec, values: np.ndarray) -> np.ndarray:
    """Codes for values that are already exactly representable."""
    v = np.asarray(values, dtype=np.float64)
    a = np.abs(v)
    m = spec.mantissa_bits
    _, ex = np.frexp(a)
    e = ex - 1
    sub = e < spec.min_exponent
    with np.errstate(invalid="ignore"):
        sub_mag = a / math.ldexp(1.0, spec.min_exponent - m)
        norm_mag = ((e + spec.bias) << m) + (np.ldexp(a, m - e) - (1 << m))
    mag = np.where(a == 0, 0, np.where(sub, sub_mag, norm_mag)).astype(np.int64)
    if spec.signed:
        mag = np.where((v < 0) & (mag != 0), mag | spec.sign_mask, mag)
    return mag.astype(np.uint8)


@lru_cache(maxsize=None)
def decode_table(spec: MiniFloatSpec) -> np.ndarray:
    """Value of every code (NaN codes map to NaN), indexed by code.  Read-only."""
    table = np.full(1 << spec.width, np.nan)
    for code, value in enumerate_values(spec):
        table[code] = value
    if spec.signed:
        table[spec.sign_mask] = -0.0
    table.flags.writeable = False
    return table


def decode_codes(spec: MiniFloatSpec, codes: np.ndarray) -> np.ndarray:
    out = decode_table(spec)[np.asarray(codes, dtype=np.int64)]
    if np.isnan(out).any():
        raise ValueError(f"NaN code present while decoding {spec.name}")
    return out


def sweep_grid(
    exponent_bits=range(1, 9),
    mantissa_bits=range(0, 7),
    signed: bool = False,
) -> list[MiniFloatSpec]:
    """Formats for the format-sweep studies, skipping those wider than 8 bits."""
    out = []
    for e in exponent_bits:
        for m in mantissa_bits:
            if e + m + int(signed) > 8:
                continue
            try:
                out.append(MiniFloatSpec(e, m, signed=signed,
                                         special_policy=_DEFAULT_POLICY.get((e, m), "none")))
            except ValueError:
                continue
    return out
