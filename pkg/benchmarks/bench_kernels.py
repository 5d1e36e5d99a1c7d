"""Compiled vs NumPy block search on a seeded Gaussian tensor.

    python3 benchmarks/bench_kernels.py [--rows 512] [--range full] [--fmt nvfp4]
"""

import argparse
import time

import numpy as np

from scalelab.blockquant import get_format, max_abs_codes
from scalelab.experiments import gaussian_tensor
from scalelab.kernels import compiled_search_blocks, python_search_blocks
from scalelab.scalesearch import SearchRange


def bench(fn, blocks, start, offsets, fmt, repeat):
    vs = fmt.value_spec
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(blocks, fmt.scale_table, start, offsets, fmt.max_scale_code,
                 vs.mantissa_bits, vs.min_exponent, vs.max_value, vs.signed)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--rows", type=int, default=512)
    p.add_argument("--fmt", default="nvfp4")
    p.add_argument("--range", default="full")
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()

    fmt = get_format(args.fmt)
    r = SearchRange.exhaustive(fmt) if args.range == "full" else SearchRange.parse(args.range)
    X = gaussian_tensor(0, (args.rows, 2048))
    blocks = np.ascontiguousarray(X.reshape(-1, fmt.block_size))
    start = max_abs_codes(blocks, fmt)
    offsets = r.offsets()
    print(f"{blocks.shape[0]} blocks of {fmt.block_size}, format {fmt.name}, offsets {r}")

    t_py, out_py = bench(python_search_blocks, blocks, start, offsets, fmt, args.repeat)
    print(f"numpy    {t_py * 1e3:9.1f} ms")
    compiled = compiled_search_blocks()
    if compiled is None:
        print("compiled kernel not built")
        return
    t_c, out_c = bench(compiled, blocks, start, offsets, fmt, args.repeat)
    same = all(np.array_equal(a, b) for a, b in zip(out_py, out_c))
    print(f"compiled {t_c * 1e3:9.1f} ms  speedup {t_py / t_c:.1f}x  identical={same}")


if __name__ == "__main__":
    main()
