"""Compare the compiled and numpy kernel backends.

Times every kernel at the shapes a default training step produces, then a
handful of full training steps under each backend.

    python3 benchmarks/bench_kernels.py [--repeat 200] [--steps 20] [--dtype float32]
"""
from __future__ import annotations

import argparse
import sys
import time
import timeit

import numpy as np

from aslora import config, kernels, train
from aslora.kernels import _pykernels


def kernel_cases(rng, dt, rows, d, ffn, heads, seq):
    x = rng.normal(size=(rows, d)).astype(dt)
    h = rng.normal(size=(rows, ffn)).astype(dt)
    g = np.ones(d, dt)
    b = np.zeros(d, dt)
    scores = rng.normal(size=(rows * heads, seq)).astype(dt)
    probs = _pykernels.softmax_fwd(scores)
    _, xhat, rstd = _pykernels.layer_norm_fwd(x, g, b, 1e-5)
    batch = rows // seq
    q, k, v = (rng.normal(size=(batch, seq, d)).astype(dt) for _ in range(3))
    _, p = _pykernels.attention_fwd(q, k, v, heads)
    mean = np.zeros(d * 4, dt)
    w = rng.normal(size=d * 4).astype(dt)
    return {
        "softmax_fwd": (scores,),
        "softmax_bwd": (probs, scores),
        "layer_norm_fwd": (x, g, b, 1e-5),
        "layer_norm_bwd": (x, xhat, rstd, g),
        "gelu_fwd": (h,),
        "gelu_bwd": (h, h),
        "running_mean_update": (mean, w, 3),
        "pairwise_l2": (rng.normal(size=(12, d * 4)).astype(dt),),
        "attention_fwd": (q, k, v, heads),
        "attention_bwd": (q, q, k, v, p),
    }


def bench_kernels(repeat: int, dt) -> None:
    cfg = config.materialize({})
    rows = cfg["batch_size"] * cfg["seq_len"]
    cases = kernel_cases(np.random.default_rng(0), dt, rows, cfg["model_dim"], cfg["ffn_dim"],
                         cfg["num_heads"], cfg["seq_len"])
    backends = kernels.available_backends()
    native = set(kernels.compiled_kernels())
    print(f"{'kernel':<22}" + "".join(f"{b + ' (us)':>16}" for b in backends) + f"{'speedup':>10}")
    for name, args in cases.items():
        times = []
        for b in backends:
            fn = getattr(kernels.backend_module(b), name, None)
            if fn is None:
                times.append(float("nan"))
                continue
            times.append(timeit.timeit(lambda: fn(*args), number=repeat) / repeat * 1e6)
        row = f"{name:<22}" + "".join(f"{t:>16.1f}" for t in times)
        if len(times) == 2 and name in native:
            row += f"{times[0] / times[1]:>9.2f}x"
        elif len(times) == 2:
            row += f"{'numpy':>10}"
        print(row)


def bench_steps(steps: int) -> None:
    cfg = config.materialize({"total_steps": 400, "merge_start": 50, "merge_interval": 10})
    for b in kernels.available_backends():
        kernels.use_backend(b)
        tr = train.build_trainer(cfg)
        tr.train_step()
        t0 = time.perf_counter()
        for _ in range(steps):
            tr.train_step()
        print(f"train_step [{b}]: {(time.perf_counter() - t0) / steps * 1e3:.1f} ms")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args(argv)
    if "cython" not in kernels.available_backends():
        print("compiled kernels not built; only the numpy backend is timed", file=sys.stderr)
    default = kernels.BACKEND
    try:
        bench_kernels(args.repeat, np.dtype(args.dtype).type)
        bench_steps(args.steps)
    finally:
        kernels.use_backend(default)
    return 0


if __name__ == "__main__":
    sys.exit(main())
