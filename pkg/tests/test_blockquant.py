import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scalelab.blockquant import (
    MXFP4,
    NVFP4,
    BlockFormat,
    QuantizedBlock,
    block_loss,
    dequantize_block,
    get_format,
    load_quantized,
    max_abs_codes,
    max_abs_scale,
    mse,
    quantize_block,
    quantize_tensor,
    read_raw,
    save_quantized,
    write_raw,
)
from scalelab.minifloat import UE4M3, decode_table, enumerate_values, parse_spec

E2M1_VALUES = np.array(sorted({v for _, v in enumerate_values(parse_spec("E2M1"))}))


def test_presets():
    assert NVFP4.block_size == 16 and NVFP4.max_value == 6.0
    assert NVFP4.scale_spec == UE4M3
    assert MXFP4.block_size == 32 and MXFP4.scale_spec.name == "E8M0U"
    assert NVFP4.bits_per_element == 4.5
    assert get_format("nvfp4") is NVFP4
    assert get_format("E2M1/E4M3U/16") == NVFP4
    assert get_format("E2M1/E8M0U/32/pow2") == MXFP4
    with pytest.raises(ValueError):
        get_format("E2M1/E4M3U")
    with pytest.raises(ValueError):
        BlockFormat(parse_spec("E2M1"), parse_spec("E4M3"), 16)  # signed scale


def test_max_abs_scale_examples():
    assert max_abs_scale(np.zeros(16), NVFP4) == 0
    x = np.zeros(16)
    x[3] = -6.0
    assert max_abs_scale(x, NVFP4) == 64  # [REFERENCE] 1.0 is code 64
    x[3] = 3.3
    code = max_abs_scale(x, NVFP4)
    # [DERIVED] nearest UE4M3 value to 0.55 by enumeration
    vals = [(abs(v - 0.55), c) for c, v in enumerate_values(UE4M3)]
    assert code == min(vals)[1]
    with pytest.raises(ValueError):
        max_abs_scale(np.full(16, np.nan), NVFP4)


def test_max_abs_tiny_block_gets_smallest_scale():
    x = np.zeros(16)
    x[0] = 1e-30
    assert max_abs_scale(x, NVFP4) == 1
    assert max_abs_codes(x.reshape(1, -1), NVFP4)[0] == 1


def test_mx_pow2_floor_rule():
    x = np.zeros(32)
    for amax, want in [(6.0, 2**0 * 1.0), (7.9, 1.0), (8.0, 2.0), (3.0, 0.5), (4.0, 1.0)]:
        x[0] = amax
        code = max_abs_codes(x.reshape(1, -1), MXFP4)[0]
        # [DERIVED] floor(log2 amax) - floor(log2 6)
        assert MXFP4.scale_table[code] == 2.0 ** (np.floor(np.log2(amax)) - 2)
        assert MXFP4.scale_table[code] == want


def test_quantize_block_examples():
    x = np.zeros(16)
    x[0] = 6.0
    b = quantize_block(x, 64, NVFP4)
    np.testing.assert_array_equal(dequantize_block(b, NVFP4), x)
    assert block_loss(x, b, NVFP4) == 0.0
    x[0] = 7.1
    b = quantize_block(x, 64, NVFP4)
    assert dequantize_block(b, NVFP4)[0] == 6.0  # saturation
    zero = quantize_block(x, 0, NVFP4)
    assert zero.scale_code == 0 and not zero.codes.any()
    assert block_loss(x, zero, NVFP4) == 7.1**2
    with pytest.raises(ValueError):
        quantize_block(x, 127, NVFP4)


def test_block_loss_example():
    x = np.zeros(16)
    x[0] = 3.3
    code = max_abs_scale(x, NVFP4)
    s = NVFP4.scale_table[code]
    b = quantize_block(x, code, NVFP4)
    q = dequantize_block(b, NVFP4)[0]
    assert block_loss(x, b, NVFP4) == (3.3 - q) ** 2
    assert q == E2M1_VALUES[np.argmin(np.abs(E2M1_VALUES - 3.3 / s))] * s


def test_dequantize_global_scale_and_broadcast():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((2, 32))
    qt = quantize_tensor(X, NVFP4, per_row_global=True)
    out = qt.dequantize()
    for r in range(2):
        for j in range(2):
            b = qt.block(2 * r + j)
            np.testing.assert_array_equal(
                out[r, 16 * j : 16 * (j + 1)],
                dequantize_block(b, NVFP4) * float(qt.global_scales[r]))


@given(v=arrays(np.int64, 16, elements=st.integers(0, 14)), code=st.integers(1, 126))
def test_representable_round_trip(v, code):
    s = NVFP4.scale_table[code]
    x = E2M1_VALUES[v] * s
    b = quantize_block(x, code, NVFP4)
    np.testing.assert_array_equal(dequantize_block(b, NVFP4), x)
    assert block_loss(x, b, NVFP4) == 0.0


@given(x=arrays(np.float64, 16, elements=st.floats(-1e3, 1e3)))
def test_max_abs_never_overflows(x):
    code = max_abs_scale(x, NVFP4)
    b = quantize_block(x, code, NVFP4)
    xh = dequantize_block(b, NVFP4)
    if np.any(x != 0):
        i = np.argmax(np.abs(x))
        assert np.abs(b.codes[i] & 7) <= 7
        assert np.abs(xh[i]) <= NVFP4.max_value * NVFP4.scale_table[code]


@given(x=arrays(np.float64, 16, elements=st.floats(-10, 10)), perm=st.permutations(range(16)))
def test_loss_permutation_invariant(x, perm):
    code = max(max_abs_scale(x, NVFP4), 1)
    a = block_loss(x, quantize_block(x, code, NVFP4), NVFP4)
    xp = x[list(perm)]
    b = block_loss(xp, quantize_block(xp, code, NVFP4), NVFP4)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-300)


def test_tensor_independence_and_determinism():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((8, 64))
    qt = quantize_tensor(X, NVFP4, "-2:6")
    qt4 = quantize_tensor(X, NVFP4, "-2:6", threads=4)
    np.testing.assert_array_equal(qt.codes, qt4.codes)
    np.testing.assert_array_equal(qt.scale_codes, qt4.scale_codes)
    for i, blk in enumerate(X.reshape(-1, 16)):
        single = quantize_tensor(blk.reshape(1, -1), NVFP4, "-2:6")
        np.testing.assert_array_equal(single.codes[0], qt.codes[i])
        assert single.scale_codes[0] == qt.scale_codes[i]


def test_zero_tensor():
    qt = quantize_tensor(np.zeros((4, 32)), NVFP4, "full")
    assert not qt.scale_codes.any() and mse(np.zeros((4, 32)), qt) == 0.0


def test_shape_errors():
    with pytest.raises(ValueError):
        quantize_tensor(np.zeros((4, 30)), NVFP4)
    with pytest.raises(ValueError):
        quantize_tensor(np.full((1, 16), np.inf), NVFP4)
    with pytest.raises(ValueError):
        quantize_tensor(np.ones((1, 16)), NVFP4, per_row_global=True, per_tensor_global=True)


def test_per_row_global_scale_value():
    X = np.array([[0.0] * 15 + [12.0], [0.0] * 15 + [-3.0]])
    qt = quantize_tensor(X, NVFP4, per_row_global=True)
    top = decode_table(UE4M3)[126]
    want = (np.array([12.0, 3.0]) / (6.0 * top)).astype(np.float32)
    np.testing.assert_array_equal(qt.global_scales, want)
    np.testing.assert_allclose(qt.dequantize(), X, rtol=1e-6)


def test_per_tensor_global_is_shared():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((4, 32))
    qt = quantize_tensor(X, NVFP4, per_tensor_global=True)
    assert np.all(qt.global_scales == qt.global_scales[0])


def test_storage_bits_nvfp4():
    qt = quantize_tensor(np.ones((4, 64)), NVFP4)
    assert qt.storage_bits() == 4.5 * 256


@pytest.mark.parametrize("fmt", ["nvfp4", "mxfp4", "mxfp6"])
@pytest.mark.parametrize("global_", [False, True])
def test_container_round_trip(tmp_path, fmt, global_):
    rng = np.random.default_rng(5)
    X = rng.standard_normal((3, 64))
    qt = quantize_tensor(X, fmt, "-2:6", per_row_global=global_)
    path = tmp_path / "t.sqt"
    n = save_quantized(path, qt)
    assert path.stat().st_size == n
    back = load_quantized(path)
    assert back.shape == qt.shape and back.fmt == qt.fmt
    np.testing.assert_array_equal(back.codes, qt.codes)
    np.testing.assert_array_equal(back.scale_codes, qt.scale_codes)
    if global_:
        np.testing.assert_array_equal(back.global_scales, qt.global_scales)
    np.testing.assert_array_equal(back.dequantize(), qt.dequantize())
    f = get_format(fmt)
    header = 4 + 5 + 8 * 2 + 2 + len(f.value_spec.name) + len(f.scale_spec.name) + 4
    code_bits = 4 if f.value_spec.width <= 4 else 8  # wider codes take a byte each
    payload = qt.codes.size * code_bits // 8 + qt.num_blocks + (12 if global_ else 0)
    assert n == header + payload
    if fmt == "nvfp4":
        assert (n - header - (12 if global_ else 0)) * 8 == 4.5 * X.size


def test_container_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_quantized(p)


def test_raw_io(tmp_path):
    X = np.arange(12, dtype=np.float64).reshape(3, 4)
    write_raw(tmp_path / "x.f32", X)
    assert (tmp_path / "x.f32").stat().st_size == 48
    np.testing.assert_array_equal(read_raw(tmp_path / "x.f32", (3, 4)), X)
    with pytest.raises(ValueError):
        read_raw(tmp_path / "x.f32", (5, 4))


def test_quantized_block_dataclass():
    b = QuantizedBlock(np.zeros(16, dtype=np.uint8), 0)
    np.testing.assert_array_equal(dequantize_block(b, NVFP4), np.zeros(16))
