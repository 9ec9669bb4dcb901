"""Time the compiled kernels against the numpy fallback.

Each case runs on both backends, checks that the outputs are bit-identical,
and reports the best-of-``repeat`` wall time and the speedup.

Usage::

    python benchmarks/bench_kernels.py --repeat 5 --batch 64
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from predbn._kernels import available_backends


def _cases(batch: int, rng: np.random.Generator) -> list[tuple[str, str, tuple]]:
    def arr(*shape):
        return rng.normal(size=shape)

    cases = [
        ("matmul", "mlp 500x20 @ 20x128", (arr(500, 20), arr(20, 128))),
        ("matmul", "mlp 500x128 @ 128x128", (arr(500, 128), arr(128, 128))),
    ]
    # (C_in, F, size, stride) of the image-config conv blocks
    for c, f, size, stride in ((3, 16, 16, 1), (16, 32, 16, 2), (32, 32, 8, 2)):
        x, w = arr(batch, c, size, size), arr(f, c, 3, 3)
        ho = (size + 2 - 3) // stride + 1
        g = arr(batch, f, ho, ho)
        tag = f"{c}->{f} @{size} s{stride}"
        cases += [
            ("conv2d", tag, (x, w, stride, 1)),
            ("conv2d_grad_input", tag, (g, w, x.shape, stride, 1)),
            ("conv2d_grad_weight", tag, (g, x, w.shape, stride, 1)),
        ]
    return cases


def _best(fn, args, repeat: int) -> tuple[float, np.ndarray]:
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3, help="timing repetitions per case")
    p.add_argument("--batch", type=int, default=32, help="image batch size for conv cases")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is available")
    names = list(backends)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    header = f"{'kernel':<20} {'case':<24}" + "".join(f"{n + ' [ms]':>14}" for n in names)
    print(header + (f"{'speedup':>10}" if len(names) > 1 else ""))
    mismatches = 0
    for kernel, tag, call_args in _cases(args.batch, rng):
        times, outs = [], []
        for n in names:
            t, out = _best(getattr(backends[n], kernel), call_args, args.repeat)
            times.append(t)
            outs.append(out)
        same = all(np.array_equal(outs[0], o) for o in outs[1:])
        mismatches += not same
        line = f"{kernel:<20} {tag:<24}" + "".join(f"{1e3 * t:>14.2f}" for t in times)
        if len(names) > 1:
            line += f"{times[-1] / times[0]:>9.1f}x"
        print(line + ("" if same else "  MISMATCH"))
    return 1 if mismatches else 0


if __name__ == "__main__":
    raise SystemExit(main())
