"""``scalelab`` command line.

Output files go to ``--out-dir``, else ``$SCALELAB_OUT_DIR``, else
``./scalelab_out``.  Every run prints its resolved configuration first.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attention import ABLATIONS, METHODS, AttentionConfig, gaussian_qkv, run_sequence
from .blockquant import (
    get_format,
    load_quantized,
    mse,
    quantize_tensor,
    read_raw,
    save_quantized,
    search_scales,
    write_raw,
)
from .experiments import STUDIES, ConfigError, ExperimentConfig, check_report, run_study
from .kernels import BACKEND
from .minifloat import enumerate_values
from .rng import normal, uniform
from .scalesearch import SearchRange, brute_force_losses

OUT_ENV = "SCALELAB_OUT_DIR"
DEFAULT_OUT = "scalelab_out"


class CLIError(Exception):
    pass


def out_dir(args) -> Path:
    d = Path(args.out_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _shape(text: str) -> tuple:
    try:
        shape = tuple(int(s) for s in text.replace("x", ",").split(",") if s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; expected e.g. 2048,2048") from None
    if not shape or any(n < 1 for n in shape):
        raise argparse.ArgumentTypeError(f"bad shape {text!r}")
    return shape


def _int_list(text: str) -> tuple:
    return tuple(int(s) for s in text.split(",") if s)


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _echo(title: str, config: dict):
    print(f"[{title}] resolved config:")
    for k in sorted(config):
        print(f"  {k} = {config[k]}")


def _resolve_range(text: str, fmt):
    if text in ("max_abs", "none"):
        return "max_abs"
    if text == "full":
        return SearchRange.exhaustive(fmt)
    return SearchRange.parse(text)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_quantize(args) -> int:
    fmt = get_format(args.format)
    method = _resolve_range(args.range, fmt)
    output = Path(args.output) if args.output else out_dir(args) / (Path(args.input).stem + ".sqt")
    _echo("quantize", {
        "input": args.input, "shape": args.shape, "format": fmt.name, "range": str(method),
        "per_row_global": args.per_row_global, "threads": args.threads, "output": str(output),
        "backend": BACKEND,
    })
    X = read_raw(args.input, args.shape)
    kw = dict(per_row_global=args.per_row_global, threads=args.threads)
    qt = quantize_tensor(X, fmt, method, **kw)
    nbytes = save_quantized(output, qt)
    err = mse(X, qt)
    base = err if method == "max_abs" else mse(X, quantize_tensor(X, fmt, "max_abs", **kw))
    imp = 100.0 * (base - err) / base if base > 0 else 0.0
    print(f"mse={err!r} mse_max_abs={base!r} improvement_pct={imp:.4f}")
    print(f"wrote {nbytes} bytes to {output}")
    return 0


def cmd_dequantize(args) -> int:
    output = Path(args.output) if args.output else out_dir(args) / (Path(args.input).stem + ".f32")
    _echo("dequantize", {"input": args.input, "output": str(output)})
    qt = load_quantized(args.input)
    write_raw(output, qt.dequantize())
    print(f"shape={','.join(map(str, qt.shape))} format={qt.fmt.name}")
    print(f"wrote {output}")
    return 0


def _read_config_file(path: str) -> dict:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return json.loads(text)
    data = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, v = _parse_kv(line)
            data[k] = v
    return data


def _parse_kv(item: str):
    if "=" not in item:
        raise CLIError(f"expected key=value, got {item!r}")
    k, v = (s.strip() for s in item.split("=", 1))
    try:
        v = json.loads(v)
    except json.JSONDecodeError:
        pass
    if isinstance(v, str) and "," in v and k in ("shape", "widths", "block_sizes", "exponent_bits",
                                                   "mantissa_bits", "variants"):
        parts = [p for p in v.split(",") if p]
        v = parts if k == "variants" else [int(p) for p in parts]
    return k, v


_STUDY_FLAGS = ("study", "seed", "shape", "fmt", "search_range", "widths", "block_sizes",
                "input_path", "seeds", "tokens", "head_dim", "cache_block",
                "channel_spread", "logit_scale")


def cmd_study(args) -> int:
    data = _read_config_file(args.config) if args.config else {}
    for item in args.settings:
        k, v = _parse_kv(item)
        data[k] = v
    for name in _STUDY_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            data[name] = list(v) if isinstance(v, tuple) else v
    cfg = ExperimentConfig.from_dict(data)
    d = out_dir(args)
    _echo("study", {**cfg.to_dict(), "threads": args.threads, "out_dir": str(d), "backend": BACKEND})
    report = run_study(cfg, args.threads)
    stem = args.name or cfg.study
    (d / f"{stem}.json").write_text(report.to_json())
    (d / f"{stem}.csv").write_text(report.to_csv())
    print(f"wrote {d / (stem + '.json')} and {d / (stem + '.csv')}")
    print(f"wall_clock_s={report.wall_clock_s:.2f}")
    checks = check_report(report)
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if args.assert_:
        if not checks:
            print(f"no acceptance checks defined for study {cfg.study}")
        return 0 if all(ok for _, ok, _ in checks) else 1
    return 0


def cmd_attention(args) -> int:
    cfg = AttentionConfig.for_method(args.method, tuple(args.ablate), head_dim=args.head_dim,
                                     cache_block=args.cache_block, fmt=args.fmt)
    output = Path(args.output) if args.output else out_dir(args) / "attention_trace.csv"
    source = args.qkv or f"gaussian(seed={args.seed})"
    _echo("attention", {
        "source": source, "tokens": args.tokens, "head_dim": cfg.head_dim,
        "cache_block": cfg.cache_block, "fmt": cfg.fmt.name, "method": cfg.method,
        "ablate": ",".join(args.ablate) or "none", "use_search": cfg.use_search,
        "use_ip": cfg.use_ip, "use_reparam": cfg.use_reparam, "mixed_cache": cfg.mixed_cache,
        "channel_spread": args.channel_spread, "logit_scale": args.logit_scale,
        "output": str(output),
    })
    calib = None
    if args.qkv:
        qkv = read_raw(args.qkv, (args.tokens, 3, cfg.head_dim))
    else:
        qkv = gaussian_qkv(args.seed, args.tokens, cfg.head_dim, args.channel_spread, args.logit_scale)
        c = gaussian_qkv(args.seed, args.tokens, cfg.head_dim, args.channel_spread,
                         args.logit_scale, stream="calibration")
        calib = (c[:, 0], c[:, 1])
    trace = run_sequence(qkv, cfg, calibration=calib)
    output.write_text(trace.to_csv())
    print(f"mean_error={trace.mean_error!r} max_error={trace.max_error!r} "
          f"frobenius_error={trace.frobenius_error!r} "
          f"final_quantized_fraction={float(trace.quantized_fraction[-1])!r}")
    print(f"wrote {output}")
    return 0


def cmd_oracle_verify(args) -> int:
    """Compare the search kernel against the table-lookup brute force."""
    fmt = get_format(args.fmt)
    r = SearchRange.exhaustive(fmt)
    _echo("oracle-verify", {"fmt": fmt.name, "blocks": args.blocks, "seed": args.seed,
                            "range": str(r), "backend": BACKEND})
    bs = fmt.block_size
    # Gaussian blocks over a spread of magnitudes
    mags = np.exp2(uniform(args.seed, "oracle-mag", (args.blocks, 1)) * 16 - 8)
    blocks = normal(args.seed, "oracle", (args.blocks, bs)) * mags
    codes, _, losses = search_scales(blocks, fmt, r.offsets(), args.threads)
    brute = brute_force_losses(blocks, fmt)[:, 1:]
    best = brute.min(axis=1)
    mismatch = int(np.sum(losses != best))
    worse = int(np.sum(losses > best))
    ok_loss = mismatch == 0
    print(f"{'PASS' if ok_loss else 'FAIL'} loss equality: {mismatch} of {args.blocks} blocks differ "
          f"({worse} worse than brute force)")

    # representable blocks: random codes times a random valid scale
    table = np.array(sorted({v for _, v in enumerate_values(fmt.value_spec)}))
    pick = (uniform(args.seed, "oracle-q", (args.blocks, bs)) * table.size).astype(np.int64)
    scodes = 1 + (uniform(args.seed, "oracle-s", args.blocks) * fmt.max_scale_code).astype(np.int64)
    rep = table[pick] * fmt.scale_table[scodes][:, None]
    _, _, rep_loss = search_scales(rep, fmt, r.offsets(), args.threads)
    nonzero = int(np.sum(rep_loss != 0.0))
    ok_rep = nonzero == 0
    print(f"{'PASS' if ok_rep else 'FAIL'} representable blocks: {nonzero} of {args.blocks} "
          "have nonzero loss")
    return 0 if ok_loss and ok_rep else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive, default=1, help="worker count (results do not depend on it)")
    common.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")

    p = argparse.ArgumentParser(prog="scalelab", description="Microscaling quantization lab.")
    p.add_argument("--version", action="version", version=f"scalelab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", parents=[common], help="quantize a raw float32 file")
    q.add_argument("input")
    q.add_argument("--shape", type=_shape, required=True)
    q.add_argument("--format", default="nvfp4")
    q.add_argument("--range", default="-2:6", help="max_abs, full, default or F_MIN:F_MAX")
    q.add_argument("--per-row-global", action="store_true")
    q.add_argument("-o", "--output")
    q.set_defaults(func=cmd_quantize)

    d = sub.add_parser("dequantize", parents=[common], help="decode a container to raw float32")
    d.add_argument("input")
    d.add_argument("-o", "--output")
    d.set_defaults(func=cmd_dequantize)

    s = sub.add_parser("study", parents=[common], help="run a seeded study")
    s.add_argument("settings", nargs="*", help="key=value overrides, e.g. study=offset_hist fmt=mxfp4")
    s.add_argument("--config", help="JSON or key=value config file (flags win)")
    s.add_argument("--study", choices=STUDIES)
    s.add_argument("--seed", type=int)
    s.add_argument("--shape", type=_shape)
    s.add_argument("--fmt")
    s.add_argument("--range", dest="search_range")
    s.add_argument("--widths", type=_int_list)
    s.add_argument("--block-sizes", type=_int_list)
    s.add_argument("--input", dest="input_path")
    s.add_argument("--seeds", type=int)
    s.add_argument("--tokens", type=int)
    s.add_argument("--head-dim", type=int)
    s.add_argument("--cache-block", type=int)
    s.add_argument("--channel-spread", type=float)
    s.add_argument("--logit-scale", type=float)
    s.add_argument("--name", help="report file stem (default: the study name)")
    s.add_argument("--assert", dest="assert_", action="store_true",
                   help="exit nonzero unless every acceptance check passes")
    s.set_defaults(func=cmd_study)

    a = sub.add_parser("attention", parents=[common], help="simulate quantized causal attention")
    a.add_argument("--qkv", help="raw float32 file of shape (tokens, 3, head_dim)")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--tokens", type=_positive, default=512)
    a.add_argument("--head-dim", type=int, default=64)
    a.add_argument("--cache-block", type=int, default=64)
    a.add_argument("--fmt", default="nvfp4")
    a.add_argument("--method", choices=METHODS, default="scalesearch_attention")
    a.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])
    a.add_argument("--channel-spread", type=float, default=1.0)
    a.add_argument("--logit-scale", type=float, default=2.0)
    a.add_argument("-o", "--output")
    a.set_defaults(func=cmd_attention)

    o = sub.add_parser("oracle-verify", parents=[common], help="check the search against brute force")
    o.add_argument("--fmt", default="nvfp4")
    o.add_argument("--blocks", type=_positive, default=10000)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_oracle_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
