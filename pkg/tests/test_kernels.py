import numpy as np
import pytest

from scalelab import kernels
from scalelab.blockquant import MXFP4, NVFP4, get_format, max_abs_codes
from scalelab.rng import normal
from scalelab.scalesearch import DEFAULT_RANGE, SearchRange

compiled = kernels.compiled_search_blocks()
needs_ext = pytest.mark.skipif(compiled is None, reason="compiled kernel not built")

FORMATS = [NVFP4, MXFP4, get_format("mxfp6"), get_format("E3M2/E4M3U/16"), get_format("E2M1/E8M0U/16")]


def _args(blocks, fmt, r):
    vs = fmt.value_spec
    return (np.ascontiguousarray(blocks), fmt.scale_table, max_abs_codes(blocks, fmt), r.offsets(),
            fmt.max_scale_code, vs.mantissa_bits, vs.min_exponent, vs.max_value, vs.signed)


def _blocks(fmt, n=3000, seed=0):
    X = normal(seed, "kern", (n, fmt.block_size)) * np.exp2(normal(seed, "mag", (n, 1)) * 6)
    X[::7, ::3] = 0.0
    X[::50] = 0.0
    return X


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@needs_ext
@pytest.mark.parametrize("fmt", FORMATS, ids=lambda f: f.name)
@pytest.mark.parametrize("r", ["default", "full", "scan"])
def test_compiled_matches_python_bitwise(fmt, r):
    rng = {"default": DEFAULT_RANGE, "full": SearchRange.exhaustive(fmt),
           "scan": SearchRange(-4, 8, scan_order=True)}[r]
    args = _args(_blocks(fmt), fmt, rng)
    a = compiled(*args)
    b = kernels.python_search_blocks(*args)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_python_backend_forced(monkeypatch):
    import importlib
    monkeypatch.setenv("SCALELAB_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("SCALELAB_PURE_PYTHON")
        importlib.reload(kernels)


def test_invalid_marker():
    fmt = NVFP4
    x = np.zeros((1, 16))
    x[0, 0] = 6.0 * fmt.scale_table[126]
    r = SearchRange(1, 2, allow_excluding_zero=True)
    for fn in filter(None, [compiled, kernels.python_search_blocks]):
        code, _, _ = fn(*_args(x, fmt, r))
        assert code[0] == -1
