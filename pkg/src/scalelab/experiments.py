"""Seeded studies on synthetic Gaussian tensors and attention sequences.

Each ``run_*`` function takes an :class:`ExperimentConfig` and returns a
:class:`Report`.  Report bytes (JSON and CSV) depend only on the config, never
on the worker count; wall-clock time is kept on the object but left out of
the serialized report.

Formats with the ``nearest`` scale rule (NVFP4 style) are quantized after a
float32 per-tensor scale, as in two-level NVFP4 scaling; MX formats
(``pow2_floor``) have no second-level scale.
"""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .attention import AttentionConfig, gaussian_qkv, run_sequence
from .blockquant import BlockFormat, get_format, mse, quantize_tensor, read_raw
from .minifloat import MiniFloatSpec, parse_spec, sweep_grid
from .rng import normal
from .scalesearch import SearchRange

__all__ = [
    "STUDIES",
    "ATTENTION_VARIANTS",
    "ConfigError",
    "ExperimentConfig",
    "Report",
    "gaussian_tensor",
    "improvement_point",
    "run_mse_vs_width",
    "run_offset_hist",
    "run_format_sweep",
    "run_block_size",
    "run_attention_compare",
    "run_study",
    "check_report",
]

STUDIES = (
    "mse_vs_width",
    "offset_hist",
    "format_sweep_scale",
    "format_sweep_value",
    "format_sweep_mxfp",
    "block_size",
    "attention_compare",
)

# name -> (method, ablations)
ATTENTION_VARIANTS = {
    "full_precision": ("full_precision", ()),
    "scalesearch_attention": ("scalesearch_attention", ()),
    "no_scalesearch": ("scalesearch_attention", ("no-scalesearch",)),
    "no_ip_magnitude": ("scalesearch_attention", ("no-ip",)),
    "no_mixed_cache": ("scalesearch_attention", ("no-cache",)),
    "naive_fp4": ("naive_fp4", ()),
    "naive_fp4+scalesearch": ("naive_fp4+scalesearch", ()),
}
ABLATION_ORDER = ("scalesearch_attention", "no_scalesearch", "no_ip_magnitude", "no_mixed_cache")

STANDARD_SCALES = ("E4M3U", "E8M0U")
STANDARD_VALUES = ("E2M1", "E2M3", "E3M2", "E4M3", "E5M2")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    study: str
    seed: int = 0
    shape: tuple = (2048, 2048)
    fmt: str = "nvfp4"
    search_range: str = "full"
    widths: tuple = tuple(range(1, 21))
    block_sizes: tuple = (16, 32, 64, 128, 256)
    exponent_bits: tuple = ()
    mantissa_bits: tuple = ()
    input_path: str | None = None
    # attention_compare
    seeds: int = 100
    tokens: int = 512
    head_dim: int = 64
    cache_block: int = 64
    channel_spread: float = 1.0
    logit_scale: float = 2.0
    variants: tuple = tuple(ATTENTION_VARIANTS)

    def __post_init__(self):
        errors = []
        if self.study not in STUDIES:
            errors.append(f"study: {self.study!r} is not one of {', '.join(STUDIES)}")
        if not 0 <= self.seed < 2**64:
            errors.append("seed: must be a 64-bit unsigned integer")
        if len(self.shape) < 1 or any(int(n) < 1 for n in self.shape):
            errors.append(f"shape: bad tensor shape {self.shape}")
        try:
            get_format(self.fmt)
        except ValueError as exc:
            errors.append(f"fmt: {exc}")
        try:
            SearchRange.parse(self.search_range)
        except ValueError as exc:
            errors.append(f"search_range: {exc}")
        if any(w < 1 for w in self.widths):
            errors.append("widths: widths must be >= 1")
        if any(b < 1 for b in self.block_sizes):
            errors.append("block_sizes: block sizes must be >= 1")
        if self.seeds < 1 or self.tokens < 1:
            errors.append("seeds/tokens: must be >= 1")
        unknown = set(self.variants) - set(ATTENTION_VARIANTS)
        if unknown:
            errors.append(f"variants: unknown {sorted(unknown)}")
        if errors:
            raise ConfigError("invalid experiment config:\n  " + "\n  ".join(errors))

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        if "study" not in data:
            raise ConfigError("missing config field: study")
        clean = {}
        for k, v in data.items():
            clean[k] = tuple(v) if isinstance(v, list) else v
        return cls(**clean)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @property
    def block_format(self) -> BlockFormat:
        return get_format(self.fmt)

    @property
    def range(self) -> SearchRange:
        return SearchRange.parse(self.search_range)


@dataclass
class Report:
    study: str
    config: dict
    points: list
    summary: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "artifact": "scalelab",
            "version": __version__,
            "study": self.study,
            "config": self.config,
            "summary": self.summary,
            "points": self.points,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if not self.points:
            return ""
        cols = list(self.points[0])
        w.writerow(cols)
        for p in self.points:
            w.writerow([_csv_cell(p[c]) for c in cols])
        return buf.getvalue()


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return int(v)
    return v


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------


def gaussian_tensor(seed: int, shape) -> np.ndarray:
    """Unit Gaussian float32 tensor, returned as float64 for exact arithmetic."""
    return normal(seed, "tensor", tuple(shape)).astype(np.float32).astype(np.float64)


def _input_tensor(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.input_path:
        return read_raw(cfg.input_path, cfg.shape)
    return gaussian_tensor(cfg.seed, cfg.shape)


def _quantize(X, fmt: BlockFormat, method, threads: int):
    return quantize_tensor(X, fmt, method, threads=threads,
                           per_tensor_global=fmt.scale_rule == "nearest")


def _as_matrix(X, fmt: BlockFormat) -> np.ndarray:
    """Flatten to rows whose length is a multiple of the block size."""
    if X.shape[-1] % fmt.block_size == 0:
        return X
    flat = X.reshape(-1)
    if flat.size % fmt.block_size:
        raise ConfigError(f"tensor of {flat.size} elements does not split into blocks of {fmt.block_size}")
    return flat.reshape(-1, fmt.block_size)


def improvement_point(X, fmt: BlockFormat, r: SearchRange | None = None, threads: int = 1) -> dict:
    """Max-abs and searched MSE of ``X`` under ``fmt`` and the improvement in percent."""
    X = _as_matrix(X, fmt)
    r = SearchRange.exhaustive(fmt) if r is None else r
    base = mse(X, _quantize(X, fmt, "max_abs", threads))
    searched = mse(X, _quantize(X, fmt, r, threads))
    return {
        "format": fmt.name,
        "mse_max_abs": base,
        "mse_search": searched,
        "improvement_pct": _improvement(base, searched),
    }


def _improvement(base: float, searched: float) -> float:
    return 100.0 * (base - searched) / base if base > 0 else 0.0


def _resolve_range(cfg: ExperimentConfig, fmt: BlockFormat) -> SearchRange:
    return SearchRange.exhaustive(fmt) if cfg.search_range == "full" else cfg.range


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------


def run_mse_vs_width(cfg: ExperimentConfig, threads: int = 1) -> Report:
    """MSE for symmetric-style ranges ``[1 - f_max, f_max]`` of growing width."""
    fmt = cfg.block_format
    X = _as_matrix(_input_tensor(cfg), fmt)
    base = mse(X, _quantize(X, fmt, "max_abs", threads))
    points = []
    for w in sorted(set(cfg.widths)):
        r = SearchRange.of_width(w)
        m = mse(X, _quantize(X, fmt, r, threads))
        points.append({"width": w, "f_min": r.f_min, "f_max": r.f_max, "mse": m,
                       "improvement_pct": _improvement(base, m)})
    oracle = mse(X, _quantize(X, fmt, SearchRange.exhaustive(fmt), threads))
    mses = [p["mse"] for p in points]
    summary = {
        "mse_max_abs": base,
        "mse_exhaustive": oracle,
        "improvement_exhaustive_pct": _improvement(base, oracle),
        "monotone_non_increasing": all(b <= a for a, b in zip(mses, mses[1:])),
        "saturation_rel_change": abs(mses[-2] - mses[-1]) / mses[-2] if len(mses) > 1 and mses[-2] else 0.0,
    }
    return Report(cfg.study, cfg.to_dict(), points, summary)


def _hist_summary(hist: dict[int, int]) -> dict:
    total = sum(hist.values())
    offs = sorted(hist)
    counts = [hist[f] for f in offs]
    local_max = []
    for i, f in enumerate(offs):
        left = hist.get(f - 1, 0)
        right = hist.get(f + 1, 0)
        if counts[i] > left and counts[i] >= right:
            local_max.append(f)
    return {
        "blocks": total,
        "distinct_offsets": len(offs),
        "mode": max(offs, key=lambda f: (hist[f], -abs(f))) if offs else 0,
        "local_maxima": local_max,
        "mass_default_range": sum(hist.get(f, 0) for f in range(-2, 7)) / total if total else 0.0,
    }


def run_offset_hist(cfg: ExperimentConfig, threads: int = 1) -> Report:
    fmt = cfg.block_format
    X = _as_matrix(_input_tensor(cfg), fmt)
    r = _resolve_range(cfg, fmt)
    qt = _quantize(X, fmt, r, threads)
    offs, counts = np.unique(qt.offsets, return_counts=True)
    hist = {int(f): int(c) for f, c in zip(offs, counts)}
    total = sum(hist.values())
    points = [{"offset": f, "count": c, "fraction": c / total} for f, c in sorted(hist.items())]
    return Report(cfg.study, cfg.to_dict(), points, _hist_summary(hist))


def _sweep_formats(cfg: ExperimentConfig) -> list[tuple[BlockFormat, MiniFloatSpec, bool]]:
    """(format, swept spec, is-standard) triples for the configured sweep."""
    e_bits = cfg.exponent_bits or None
    m_bits = cfg.mantissa_bits or None
    E2M1 = parse_spec("E2M1")
    out = []
    if cfg.study == "format_sweep_scale":
        grid = sweep_grid(e_bits or range(1, 9), m_bits or range(0, 8), signed=False)
        for spec in grid:
            out.append((BlockFormat(E2M1, spec, 16), spec, spec.name in STANDARD_SCALES))
    else:
        grid = sweep_grid(e_bits or range(1, 6), m_bits or range(0, 6), signed=True)
        if cfg.study == "format_sweep_value":
            scale, bs, rule = parse_spec("E4M3U"), 16, "nearest"
        else:
            scale, bs, rule = parse_spec("E8M0U"), 32, "pow2_floor"
        for spec in grid:
            out.append((BlockFormat(spec, scale, bs, rule), spec, spec.name in STANDARD_VALUES))
    return out


def run_format_sweep(cfg: ExperimentConfig, threads: int = 1) -> Report:
    """Improvement of full-range search over max-abs across a grid of formats."""
    if not cfg.study.startswith("format_sweep"):
        raise ConfigError(f"study: {cfg.study!r} is not a format sweep")
    X = gaussian_tensor(cfg.seed, cfg.shape) if not cfg.input_path else _input_tensor(cfg)
    points = []
    for fmt, spec, standard in _sweep_formats(cfg):
        p = improvement_point(X, fmt, SearchRange.exhaustive(fmt), threads)
        points.append({"exponent_bits": spec.exponent_bits, "mantissa_bits": spec.mantissa_bits,
                       "standard": standard, **p})
    summary = {p["format"]: p["improvement_pct"] for p in points if p["standard"]}
    return Report(cfg.study, cfg.to_dict(), points, {"standard_improvement_pct": summary})


def run_block_size(cfg: ExperimentConfig, threads: int = 1) -> Report:
    base_fmt = cfg.block_format
    X = _input_tensor(cfg)
    points = []
    for bs in sorted(set(cfg.block_sizes)):
        fmt = base_fmt.with_block_size(bs)
        p = improvement_point(X, fmt, _resolve_range(cfg, fmt), threads)
        points.append({"block_size": bs, **p})
    imp = [p["improvement_pct"] for p in points]
    summary = {"non_increasing": all(b <= a for a, b in zip(imp, imp[1:]))}
    return Report(cfg.study, cfg.to_dict(), points, summary)


def _attention_seed(args) -> list[float]:
    cfg, seed = args
    d = cfg.head_dim
    qkv = gaussian_qkv(seed, cfg.tokens, d, cfg.channel_spread, cfg.logit_scale)
    calib = gaussian_qkv(seed, cfg.tokens, d, cfg.channel_spread, cfg.logit_scale, stream="calibration")
    out = []
    for name in cfg.variants:
        method, ablate = ATTENTION_VARIANTS[name]
        acfg = AttentionConfig.for_method(method, ablate, head_dim=d, cache_block=cfg.cache_block,
                                          fmt=cfg.fmt)
        trace = run_sequence(qkv, acfg, calibration=(calib[:, 0], calib[:, 1]))
        out.append(trace.frobenius_error)
    return out


def run_attention_compare(cfg: ExperimentConfig, threads: int = 1) -> Report:
    """Per-variant Frobenius output error over seeds ``seed .. seed + seeds - 1``."""
    jobs = [(cfg, cfg.seed + i) for i in range(cfg.seeds)]
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            rows = list(pool.map(_attention_seed, jobs))
    else:
        rows = [_attention_seed(j) for j in jobs]
    E = np.array(rows)
    points = []
    for j, name in enumerate(cfg.variants):
        points.append({"variant": name, "mean_error": float(np.mean(E[:, j])),
                       "std_error": float(np.std(E[:, j])), "max_error": float(np.max(E[:, j]))})
    means = {p["variant"]: p["mean_error"] for p in points}
    summary = {"ranking": sorted(means, key=lambda k: (means[k], k))}
    if all(v in means for v in ABLATION_ORDER):
        seq = [means[v] for v in ABLATION_ORDER]
        summary["ablation_order_holds"] = all(a < b for a, b in zip(seq, seq[1:]))
    if "scalesearch_attention" in means and "naive_fp4" in means:
        summary["ssa_beats_naive"] = means["scalesearch_attention"] < means["naive_fp4"]
    per_seed = [{"seed": s, **{v: float(e) for v, e in zip(cfg.variants, row)}}
                for (_, s), row in zip(jobs, rows)]
    summary["per_seed"] = per_seed
    return Report(cfg.study, cfg.to_dict(), points, summary)


_RUNNERS = {
    "mse_vs_width": run_mse_vs_width,
    "offset_hist": run_offset_hist,
    "format_sweep_scale": run_format_sweep,
    "format_sweep_value": run_format_sweep,
    "format_sweep_mxfp": run_format_sweep,
    "block_size": run_block_size,
    "attention_compare": run_attention_compare,
}


def run_study(cfg: ExperimentConfig, threads: int = 1) -> Report:
    t0 = time.perf_counter()
    report = _RUNNERS[cfg.study](cfg, threads)
    report.wall_clock_s = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# Acceptance checks
# ---------------------------------------------------------------------------

# (label, target %, tolerance in points)
SWEEP_TARGETS = {
    "E2M1/E4M3U/16": ("NVFP4", 27.0, 4.0),
    "E2M1/E8M0U/32/pow2": ("MXFP4", 8.0, 3.0),
    "E2M3/E8M0U/32/pow2": ("MXFP6 E2M3", 11.0, 3.0),
}


def check_report(report: Report) -> list[tuple[str, bool, str]]:
    """Named pass/fail checks for a report; empty when the study has none."""
    s = report.summary
    checks = []
    if report.study == "mse_vs_width":
        checks.append(("monotone", s["monotone_non_increasing"], "MSE non-increasing in width"))
        if max(report.config["widths"]) >= 15:
            rel = s["saturation_rel_change"]
            checks.append(("saturated", rel <= 1e-3, f"last-step relative change {rel:.2e}"))
    elif report.study == "offset_hist":
        fmt = get_format(report.config["fmt"])
        if fmt.scale_rule == "pow2_floor":
            ok = s["distinct_offsets"] == 2 and s["mode"] == 0
            checks.append(("two_offsets", ok, f"{s['distinct_offsets']} offsets, mode {s['mode']}"))
        else:
            lm = s["local_maxima"]
            ok = 0 in lm and (4 in lm or 5 in lm)
            checks.append(("bimodal", ok, f"local maxima at {lm}"))
            checks.append(("mass", s["mass_default_range"] >= 0.95,
                           f"mass in [-2, 6] = {s['mass_default_range']:.4f}"))
    elif report.study.startswith("format_sweep"):
        for p in report.points:
            if p["format"] in SWEEP_TARGETS:
                label, target, tol = SWEEP_TARGETS[p["format"]]
                v = p["improvement_pct"]
                checks.append((label, abs(v - target) <= tol, f"{v:.2f}% (target {target} +/- {tol})"))
    elif report.study == "block_size":
        checks.append(("non_increasing", s["non_increasing"],
                       " ".join(f"{p['block_size']}:{p['improvement_pct']:.2f}%" for p in report.points)))
    elif report.study == "attention_compare":
        if "ablation_order_holds" in s:
            checks.append(("ablation_order", s["ablation_order_holds"], " < ".join(ABLATION_ORDER)))
        if "ssa_beats_naive" in s:
            checks.append(("ssa_vs_naive", s["ssa_beats_naive"], "scalesearch_attention < naive_fp4"))
    return checks
