import numpy as np
import pytest

from scalelab.attention import (
    AttentionConfig,
    CacheStateError,
    MixedPrecisionKVCache,
    attend_step,
    gaussian_qkv,
    quantize_p,
    quantize_qk,
    reference_attention,
    run_sequence,
)
from scalelab.blockquant import NVFP4, mse, quantize_tensor
from scalelab.minifloat import enumerate_values, parse_spec
from scalelab.transforms import build_qk_transform

SSA = AttentionConfig.for_method("scalesearch_attention")
B = 16


def small(method="scalesearch_attention", ablate=(), **kw):
    kw.setdefault("head_dim", 16)
    kw.setdefault("cache_block", B)
    return AttentionConfig.for_method(method, ablate, **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig(head_dim=48)
    with pytest.raises(ValueError):
        AttentionConfig(cache_block=8)
    with pytest.raises(ValueError):
        AttentionConfig(cache_block=24)
    with pytest.raises(ValueError):
        AttentionConfig(method="magic")
    with pytest.raises(ValueError):
        AttentionConfig.for_method("naive_fp4", ("no-fun",))
    assert AttentionConfig(head_dim=64).scale == 1 / 8
    assert AttentionConfig(method="full_precision", head_dim=8).head_dim == 8


def test_for_method_flags():
    assert (SSA.use_search, SSA.use_ip, SSA.use_reparam, SSA.mixed_cache) == (True,) * 4
    n = AttentionConfig.for_method("naive_fp4")
    assert (n.use_search, n.use_ip, n.use_reparam, n.mixed_cache) == (False,) * 4
    assert AttentionConfig.for_method("naive_fp4+scalesearch").use_search
    a = AttentionConfig.for_method("scalesearch_attention", ("no-ip", "no-cache"))
    assert not a.use_ip and not a.use_reparam and not a.mixed_cache and a.use_search


def test_quantize_qk_examples():
    cfg = small()
    qt = quantize_qk(np.zeros((1, 16)), cfg)
    assert qt.num_blocks == 1 and not qt.codes.any() and not qt.dequantize().any()
    vals = np.array([v for _, v in enumerate_values(parse_spec("E2M1"))])
    row = vals[np.arange(16) % 15].reshape(1, -1) * 0.75
    np.testing.assert_array_equal(quantize_qk(row, cfg).dequantize(), row)
    with pytest.raises(ValueError):
        quantize_qk(np.zeros((1, 8)), cfg)
    X = np.random.default_rng(0).standard_normal((64, 16))
    assert mse(X, quantize_qk(X, cfg)) <= mse(X, quantize_qk(X, small(ablate=("no-scalesearch",))))


def test_quantize_p_examples():
    cfg = small()
    one = np.zeros(16)
    one[5] = 1.0
    # the float32 row scale is the only rounding left in a one-hot row
    np.testing.assert_allclose(quantize_p(one, cfg).dequantize()[0], one, rtol=2**-23, atol=0)
    k = 48
    u = np.full(k, 1.0 / k)
    err = np.abs(quantize_p(u, cfg).dequantize()[0] - u)
    assert np.max(err) <= 2**-23 * u[0]


def test_first_token_output_is_v():
    cfg = small()
    cache = MixedPrecisionKVCache(cfg)
    rng = np.random.default_rng(1)
    q, k, v = rng.standard_normal((3, 16))
    out, cache, info = attend_step(cache, q, k, v)
    np.testing.assert_array_equal(out, v)
    assert info["quantized_fraction"] == 0.0


def _run_steps(cfg, n, seed=0):
    rng = np.random.default_rng(seed)
    cache = MixedPrecisionKVCache(cfg)
    infos = []
    for _ in range(n):
        q, k, v = rng.standard_normal((3, cfg.head_dim))
        _, cache, info = attend_step(cache, q, k, v)
        infos.append(info)
    return cache, infos


def test_block_completion_quantizes_tail():
    cfg = small()
    cache, _ = _run_steps(cfg, 2 * B - 1)
    assert cache.full_precision_tokens == 2 * B - 1 and cache.quantized_tokens == 0
    rng = np.random.default_rng(9)
    q, k, v = rng.standard_normal((3, 16))
    _, cache, info = attend_step(cache, q, k, v)
    assert cache.full_precision_tokens == B and cache.quantized_tokens == B
    assert len(cache.quantized_k) == 1 and len(cache.quantized_v) == 1
    assert info["quantized_fraction"] == 0.5


def test_sink_stays_full_precision():
    cfg = small()
    rng = np.random.default_rng(2)
    data = rng.standard_normal((5 * B, 3, 16))
    cache = MixedPrecisionKVCache(cfg)
    for t in range(5 * B):
        _, cache, _ = attend_step(cache, *data[t])
        n = min(t + 1, B)
        np.testing.assert_array_equal(cache.sink_k, data[:n, 1])
        np.testing.assert_array_equal(cache.sink_v, data[:n, 2])
        tail = (t + 1 - B) % B if t + 1 > B else 0
        assert cache.tail_k.shape[0] == tail
        assert cache.full_precision_tokens <= 2 * B - 1
        if t + 1 > B:
            assert cache.full_precision_tokens == B + (t + 1) % B


def test_no_cache_quantizes_everything():
    cfg = small(ablate=("no-cache",))
    cache, infos = _run_steps(cfg, 40)
    assert cache.full_precision_tokens == 0
    assert all(i["quantized_fraction"] == 1.0 for i in infos)
    assert len(cache.quantized_k) == 40 and len(cache.quantized_v) == 2


def test_full_precision_is_exact():
    qkv = gaussian_qkv(0, 100, 16)
    tr = run_sequence(qkv, small("full_precision"))
    assert np.all(tr.errors <= 1e-12)
    assert np.all(tr.quantized_fraction == 0)


def test_reference_softmax_rows():
    rng = np.random.default_rng(0)
    Q, K, V = rng.standard_normal((3, 20, 8))
    out = reference_attention(Q, K, np.eye(20)[:, :20], 0.3)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.triu(out, 1) == 0)


def test_transform_transparency():
    # transforms on, quantization off: full-precision result
    qkv = gaussian_qkv(4, 80, 16, channel_spread=1.0)
    cfg = small("full_precision")
    t = build_qk_transform(16, True, True, qkv[:, 0], qkv[:, 1])
    tr = run_sequence(qkv, cfg, transform=t)
    ref = tr.reference
    assert np.linalg.norm(tr.outputs - ref) <= 1e-6 * np.linalg.norm(ref)


def test_causality_by_prefix_replay():
    cfg = small()
    qkv = gaussian_qkv(5, 3 * B + 5, 16, 1.0, 2.0)
    t = build_qk_transform(16, True, True, qkv[:, 0], qkv[:, 1])
    full = run_sequence(qkv, cfg, transform=t)
    for n in (1, B, 2 * B + 3):
        part = run_sequence(qkv[:n], cfg, transform=t)
        np.testing.assert_array_equal(part.outputs, full.outputs[:n])


def test_quantize_once():
    cfg = small()
    rng = np.random.default_rng(6)
    cache = MixedPrecisionKVCache(cfg)
    snapshots = []
    for t in range(6 * B):
        _, cache, _ = attend_step(cache, *rng.standard_normal((3, 16)))
        for i, (qk, codes) in enumerate(snapshots):
            assert cache.quantized_k[i] is qk
            np.testing.assert_array_equal(qk.codes, codes)
        while len(snapshots) < len(cache.quantized_k):
            qk = cache.quantized_k[len(snapshots)]
            snapshots.append((qk, qk.codes.copy()))
    assert len(snapshots) == 5


def test_bad_inputs():
    cfg = small()
    cache = MixedPrecisionKVCache(cfg)
    with pytest.raises(ValueError):
        attend_step(cache, np.full(16, np.nan), np.zeros(16), np.zeros(16))
    with pytest.raises(CacheStateError):
        attend_step(cache, np.zeros(16), np.zeros(16), np.zeros(16), small(ablate=("no-cache",)))
    with pytest.raises(ValueError):
        run_sequence(np.zeros((4, 2, 16)), cfg)


def test_trace_csv():
    tr = run_sequence(gaussian_qkv(0, 20, 16), small())
    lines = tr.to_csv().splitlines()
    assert lines[0] == "step,error,quantized_fraction" and len(lines) == 21
    assert tr.frobenius_error == pytest.approx(np.sqrt(np.sum(tr.errors**2)))


def test_storage_of_completed_blocks():
    cfg = small()
    cache, _ = _run_steps(cfg, 3 * B)
    qk = cache.quantized_k[0]
    # [REFERENCE] 4.5 bits per element for block codes and scales, plus float32 row scales
    assert qk.storage_bits() - 32 * qk.global_scales.size == 4.5 * qk.codes.size


def test_gaussian_qkv_streams():
    a = gaussian_qkv(1, 10, 8, 1.0)
    b = gaussian_qkv(1, 10, 8, 1.0, stream="calibration")
    assert a.shape == (10, 3, 8) and not np.array_equal(a, b)
    np.testing.assert_array_equal(gaussian_qkv(1, 10, 8, 1.0), a)
    np.testing.assert_array_equal(a[:, 2], gaussian_qkv(1, 10, 8)[:, 2])
