"""Simulated FP4 causal attention with a mixed-precision KV cache.

Quantized operands enter every matmul as ``decoded code * block scale * row
scale`` products, standing in for FP4 tensor-core inputs; accumulation is in
float64.  Queries and keys are blocked along the head dimension, values and
attention probabilities along the token dimension (the reduction dimension of
``P @ V``), always in groups of the format's block size.

With the mixed-precision cache, the first ``B`` tokens (the sink block) and
the most recent partial block stay in full precision; every other block of
``B`` tokens is quantized exactly once, when it completes.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .blockquant import NVFP4, BlockFormat, QuantizedTensor, get_format, quantize_tensor
from .rng import normal
from .scalesearch import DEFAULT_RANGE, SearchRange
from .transforms import QKTransform, build_qk_transform

__all__ = [
    "METHODS",
    "ABLATIONS",
    "AttentionConfig",
    "MixedPrecisionKVCache",
    "AttentionTrace",
    "CacheStateError",
    "quantize_qk",
    "quantize_p",
    "attend_step",
    "run_sequence",
    "reference_attention",
    "gaussian_qkv",
]

METHODS = ("full_precision", "naive_fp4", "naive_fp4+scalesearch", "scalesearch_attention")
ABLATIONS = ("no-scalesearch", "no-ip", "no-cache")


class CacheStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    head_dim: int = 64
    cache_block: int = 64
    fmt: BlockFormat = NVFP4
    method: str = "scalesearch_attention"
    search_range: SearchRange = DEFAULT_RANGE
    use_search: bool = True
    use_ip: bool = True
    use_reparam: bool = True
    mixed_cache: bool = True
    softmax_scale: float | None = None
    # block scales may sit this many codes below the largest scale after row scaling
    headroom: int = 6

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        d = self.head_dim
        if d < 1 or d & (d - 1):
            raise ValueError(f"head_dim must be a power of two, got {d}")
        bs = self.fmt.block_size
        if self.cache_block < 16:
            raise ValueError(f"cache_block must be >= 16, got {self.cache_block}")
        if self.quantized:
            if d % bs:
                raise ValueError(f"head_dim {d} is not divisible by the block size {bs}")
            if self.cache_block % bs:
                raise ValueError(f"cache_block {self.cache_block} is not divisible by the block size {bs}")
        if not 0 <= self.headroom < self.fmt.max_scale_code:
            raise ValueError("headroom out of range")

    @property
    def quantized(self) -> bool:
        return self.method != "full_precision"

    @property
    def scale(self) -> float:
        return self.softmax_scale if self.softmax_scale is not None else 1.0 / math.sqrt(self.head_dim)

    @property
    def quant_method(self):
        return self.search_range if self.use_search else "max_abs"

    @classmethod
    def for_method(cls, method: str, ablate=(), **kw) -> AttentionConfig:
        """Config with the component switches implied by ``method``, minus any ablations."""
        if isinstance(ablate, str):
            ablate = (ablate,)
        unknown = set(ablate) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation(s) {sorted(unknown)}; choose from {ABLATIONS}")
        ssa = method == "scalesearch_attention"
        flags = dict(
            use_search=method in ("naive_fp4+scalesearch", "scalesearch_attention"),
            use_ip=ssa,
            use_reparam=ssa,
            mixed_cache=ssa,
        )
        if "no-scalesearch" in ablate:
            flags["use_search"] = False
        if "no-ip" in ablate:
            flags["use_ip"] = flags["use_reparam"] = False
        if "no-cache" in ablate:
            flags["mixed_cache"] = False
        flags.update(kw)
        if "fmt" in flags:
            flags["fmt"] = get_format(flags["fmt"])
        return cls(method=method, **flags)


# ---------------------------------------------------------------------------
# Operand quantization
# ---------------------------------------------------------------------------


def _quantize_rows(M: np.ndarray, cfg: AttentionConfig) -> QuantizedTensor:
    bs = cfg.fmt.block_size
    pad = (-M.shape[-1]) % bs
    if pad:
        M = np.pad(M, ((0, 0), (0, pad)))
    return quantize_tensor(M, cfg.fmt, cfg.quant_method, per_row_global=True,
                           headroom=cfg.headroom)


def quantize_qk(X, cfg: AttentionConfig) -> QuantizedTensor:
    """Queries or keys (tokens x d), blocked along the head dimension after row scaling."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[-1] != cfg.head_dim or cfg.head_dim % cfg.fmt.block_size:
        raise ValueError(f"expected rows of length {cfg.head_dim} divisible by {cfg.fmt.block_size}")
    return _quantize_rows(X, cfg)


def quantize_p(P, cfg: AttentionConfig) -> QuantizedTensor:
    """Probabilities over the quantized key columns, blocked along the key dimension.

    Rows are zero-padded to a multiple of the block size; the caller passes only
    the columns that multiply quantized values.
    """
    return _quantize_rows(np.atleast_2d(np.asarray(P, dtype=np.float64)), cfg)


def _quantize_v(V: np.ndarray, cfg: AttentionConfig):
    """Dequantized values for a token segment, quantized as V^T along tokens."""
    n = V.shape[0]
    qt = _quantize_rows(np.ascontiguousarray(V.T), cfg)
    return qt.dequantize()[:, :n].T.copy(), qt


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


class _Rows:
    """Append-only row buffer with amortized growth."""

    def __init__(self, d: int):
        self._buf = np.empty((16, d))
        self.n = 0

    def append(self, rows: np.ndarray):
        rows = np.atleast_2d(rows)
        need = self.n + rows.shape[0]
        if need > self._buf.shape[0]:
            grown = np.empty((max(need, 2 * self._buf.shape[0]), self._buf.shape[1]))
            grown[: self.n] = self._buf[: self.n]
            self._buf = grown
        self._buf[self.n : need] = rows
        self.n = need

    def truncate(self, n: int):
        self.n = n

    @property
    def view(self) -> np.ndarray:
        return self._buf[: self.n]


@dataclass
class MixedPrecisionKVCache:
    """KV store: full-precision sink and tail, quantized completed blocks.

    Without ``mixed_cache`` every token is quantized: keys on arrival, values
    in groups of the format block size, the open group being requantized each
    step until it fills.
    """

    cfg: AttentionConfig
    token_count: int = 0
    quantized_k: list = field(default_factory=list)   # QuantizedTensor per token block
    quantized_v: list = field(default_factory=list)   # QuantizedTensor (V^T) per token block

    def __post_init__(self):
        d = self.cfg.head_dim
        self._fp_k, self._fp_v = _Rows(d), _Rows(d)      # sink then tail
        self._khat, self._vhat = _Rows(d), _Rows(d)      # dequantized codes
        self._open_v = None

    # -- layout ----------------------------------------------------------

    @property
    def B(self) -> int:
        return self.cfg.cache_block

    @property
    def sink_tokens(self) -> int:
        return min(self.token_count, self.B) if self.cfg.mixed_cache else 0

    @property
    def quantized_tokens(self) -> int:
        if not self.cfg.quantized:
            return 0
        if not self.cfg.mixed_cache:
            return self.token_count
        return max(self.token_count - self.B, 0) // self.B * self.B

    @property
    def full_precision_tokens(self) -> int:
        return self.token_count - self.quantized_tokens

    @property
    def sink_k(self):
        return self._fp_k.view[: self.sink_tokens]

    @property
    def sink_v(self):
        return self._fp_v.view[: self.sink_tokens]

    @property
    def tail_k(self):
        return self._fp_k.view[self.sink_tokens :]

    @property
    def tail_v(self):
        return self._fp_v.view[self.sink_tokens :]

    def check(self):
        fp = self._fp_k.n
        if (fp != self._fp_v.n or self._vhat.n != self._khat.n
                or fp + self.quantized_tokens != self.token_count):
            raise CacheStateError("cache row counts disagree with the token count")
        if self.cfg.mixed_cache and fp > 2 * self.B - 1:
            raise CacheStateError(f"{fp} full-precision tokens exceed 2B - 1")

    # -- updates ---------------------------------------------------------

    def append(self, k: np.ndarray, v: np.ndarray):
        self.check()
        cfg = self.cfg
        self.token_count += 1
        if not cfg.quantized or cfg.mixed_cache:
            self._fp_k.append(k)
            self._fp_v.append(v)
            self._seal()
            return
        qk = quantize_qk(k, cfg)
        self.quantized_k.append(qk)
        self._khat.append(qk.dequantize())
        self._append_open_v(v)

    def _append_open_v(self, v):
        bs = self.cfg.fmt.block_size
        done = (self.token_count - 1) // bs * bs
        self._open_v = v[None] if self._open_v is None else np.vstack([self._open_v, v])
        vhat, qt = _quantize_v(self._open_v, self.cfg)
        self._vhat.truncate(done)
        self._vhat.append(vhat)
        if self._open_v.shape[0] == bs:
            self.quantized_v.append(qt)
            self._open_v = None

    def _seal(self):
        # the tail is quantized as soon as it holds a complete block beyond the sink
        cfg = self.cfg
        if not (cfg.quantized and cfg.mixed_cache):
            return
        B = self.B
        if self.token_count <= B or (self.token_count - B) % B:
            return
        k_blk = self._fp_k.view[B:].copy()
        v_blk = self._fp_v.view[B:].copy()
        if k_blk.shape[0] != B:
            raise CacheStateError("tail does not hold exactly one block")
        qk = quantize_qk(k_blk, cfg)
        vhat, qv = _quantize_v(v_blk, cfg)
        self.quantized_k.append(qk)
        self.quantized_v.append(qv)
        self._khat.append(qk.dequantize())
        self._vhat.append(vhat)
        self._fp_k.truncate(B)
        self._fp_v.truncate(B)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - np.max(s))
    return e / np.sum(e)


def attend_step(cache: MixedPrecisionKVCache, q, k_new, v_new, cfg: AttentionConfig | None = None):
    """Append one token and attend to the whole cache; returns ``(output, cache, info)``.

    ``info`` holds the quantized fraction of score columns and the
    full-precision token count during the step.
    """
    cfg = cache.cfg if cfg is None else cfg
    if cfg != cache.cfg:
        raise CacheStateError("config does not match the cache")
    q = np.asarray(q, dtype=np.float64)
    k_new = np.asarray(k_new, dtype=np.float64)
    v_new = np.asarray(v_new, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k_new)) and np.all(np.isfinite(v_new))):
        raise ValueError("non-finite input vector")
    cache.append(k_new, v_new)
    cache.check()

    n = cache.token_count
    nq = cache.quantized_tokens
    ns = cache.sink_tokens
    fp_k, fp_v = cache._fp_k.view, cache._fp_v.view

    # key order: sink, quantized blocks, tail
    scores = np.empty(n)
    scores[:ns] = fp_k[:ns] @ q
    if nq:
        qhat = quantize_qk(q, cfg).dequantize()[0]
        scores[ns : ns + nq] = cache._khat.view @ qhat
    scores[ns + nq :] = fp_k[ns:] @ q
    p = _softmax(scores * cfg.scale)

    out = p[:ns] @ fp_v[:ns] + p[ns + nq :] @ fp_v[ns:]
    if nq:
        phat = quantize_p(p[ns : ns + nq], cfg).dequantize()[0, :nq]
        out = out + phat @ cache._vhat.view
    info = {"quantized_fraction": nq / n, "full_precision_tokens": cache.full_precision_tokens}
    return out, cache, info


def reference_attention(Q, K, V, scale: float) -> np.ndarray:
    """Exact causal softmax attention, one output row per query."""
    T = Q.shape[0]
    S = (Q @ K.T) * scale
    S[np.triu_indices(T, 1)] = -np.inf
    S -= S.max(axis=1, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=1, keepdims=True)
    return P @ V


@dataclass
class AttentionTrace:
    outputs: np.ndarray
    errors: np.ndarray
    quantized_fraction: np.ndarray
    full_precision_tokens: np.ndarray
    reference: np.ndarray

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors))

    @property
    def frobenius_error(self) -> float:
        return float(np.sqrt(np.sum(self.errors**2)))

    @property
    def max_error(self) -> float:
        return float(np.max(self.errors))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "error", "quantized_fraction"])
        for t, (e, f) in enumerate(zip(self.errors, self.quantized_fraction)):
            w.writerow([t, repr(float(e)), repr(float(f))])
        return buf.getvalue()


def run_sequence(qkv, cfg: AttentionConfig, transform: QKTransform | None = None,
                 calibration=None) -> AttentionTrace:
    """Token-by-token causal attention over ``qkv`` of shape (tokens, 3, d).

    The query/key transform is fitted on ``calibration`` (a pair of Q and K
    sample matrices) when given, else on the sequence itself.  Pass a fixed
    ``transform`` or calibration set when prefixes must be replayable.
    """
    qkv = np.asarray(qkv, dtype=np.float64)
    if qkv.ndim != 3 or qkv.shape[1] != 3 or qkv.shape[2] != cfg.head_dim or qkv.shape[0] < 1:
        raise ValueError(f"expected qkv of shape (tokens>=1, 3, {cfg.head_dim}), got {qkv.shape}")
    Q, K, V = qkv[:, 0], qkv[:, 1], qkv[:, 2]
    if transform is None:
        qs, ks = calibration if calibration is not None else (Q, K)
        transform = build_qk_transform(cfg.head_dim, cfg.use_ip, cfg.use_reparam, qs, ks)
    Qt, Kt = transform.apply_q(Q), transform.apply_k(K)

    ref = reference_attention(Q, K, V, cfg.scale)
    cache = MixedPrecisionKVCache(cfg)
    T = Q.shape[0]
    outs = np.empty_like(V)
    frac = np.empty(T)
    fp_tokens = np.empty(T, dtype=np.int64)
    for t in range(T):
        outs[t], cache, info = attend_step(cache, Qt[t], Kt[t], V[t], cfg)
        frac[t] = info["quantized_fraction"]
        fp_tokens[t] = info["full_precision_tokens"]
    errors = np.linalg.norm(outs - ref, axis=1)
    return AttentionTrace(outs, errors, frac, fp_tokens, ref)


def gaussian_qkv(seed: int, tokens: int, d: int, channel_spread: float = 0.0,
                 logit_scale: float = 1.0, stream: str = "qkv") -> np.ndarray:
    """Seeded Gaussian (tokens, 3, d) array from the counter-based generator.

    With ``channel_spread`` > 0, every query and key channel gets its own
    log-normal standard deviation ``exp(spread * z - spread**2)`` (independent
    for queries and keys), the kind of anisotropy the Hadamard rotation and the
    reparameterization act on; the offset keeps the mean score variance at one.
    ``logit_scale`` multiplies the queries and so sharpens the softmax.
    Values stay unit Gaussian.  Channel scales depend on ``seed`` only, so a
    second ``stream`` draws fresh tokens from the same distribution (for
    calibrating the query/key transform).
    """
    X = normal(seed, stream, (tokens, 3, d))
    if channel_spread:
        z = normal(seed, "channels", (2, d))
        X[:, :2] *= np.exp(channel_spread * z - channel_spread**2)
    X[:, 0] *= logit_scale
    return X
