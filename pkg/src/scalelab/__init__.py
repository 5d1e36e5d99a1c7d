"""Microscaling block floating point lab: searched block scales and FP4 attention."""

from .blockquant import (
    MXFP4,
    MXFP6,
    NVFP4,
    BlockFormat,
    QuantizedTensor,
    get_format,
    quantize_tensor,
)
from .kernels import BACKEND
from .minifloat import MiniFloatSpec, parse_spec
from .scalesearch import DEFAULT_RANGE, FULL_RANGE, SearchRange, scale_search

__version__ = "0.1.0"
