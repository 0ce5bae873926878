"""Time the hot kernels under the numba and the pure-numpy backend.

Each backend runs in its own interpreter because the choice is made at
import time from ``VIOLET_DISABLE_NUMBA``.  Kernel rows time the ``_nb``
and ``_np`` variants directly; ``train_step`` times the dispatched library.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

CASES = ("softmax_rows", "layer_norm_fwd", "layer_norm_bwd", "gelu_fwd", "gelu_bwd", "lcs_length",
         "train_step")


def _workloads():
    import numpy as np

    from violet import _kernels as k

    suffix = "_nb" if k.HAVE_NUMBA else "_np"
    kern = {n: getattr(k, n + suffix) for n in CASES[:-1]}
    from violet.decoder import DecoderModel, GeminiConfig, build_gemini, train_step
    from violet.encoder import Encoder, EncoderConfig, FeatureSet
    from violet.numeric import OptimHyper

    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 256))
    dy = rng.normal(size=x.shape)
    g, b = np.ones(256), np.zeros(256)
    _, xhat, rstd = k.layer_norm_fwd_np(x, g, b, 1e-5)
    a = list(rng.integers(0, 8, 40))
    c = list(rng.integers(0, 8, 40))

    cfg = GeminiConfig(n_layers=4, d_model=32, n_heads=2, vocab_size=64, max_positions=16, mesh_layers=2)
    model = build_gemini(DecoderModel.init_plain(cfg, rng), cfg, rng)
    enc = Encoder.init(EncoderConfig(n_layers=2, d_model=32, n_heads=2, d_in=16), rng)
    batch = [(FeatureSet(str(i), rng.normal(size=(3, 16))), list(rng.integers(0, 64, 10))) for i in range(8)]
    hyper = OptimHyper(learning_rate=1e-4)
    return {
        "softmax_rows": lambda: kern["softmax_rows"](x),
        "layer_norm_fwd": lambda: kern["layer_norm_fwd"](x, g, b, 1e-5),
        "layer_norm_bwd": lambda: kern["layer_norm_bwd"](dy, xhat, rstd, g),
        "gelu_fwd": lambda: kern["gelu_fwd"](x),
        "gelu_bwd": lambda: kern["gelu_bwd"](x, dy),
        "lcs_length": lambda: kern["lcs_length"](a, c),
        "train_step": lambda: train_step(model, enc, batch, hyper),
    }


def measure(repeat):
    """Run inside one interpreter; prints a JSON dict of seconds per call."""
    from violet import BACKEND

    work = _workloads()
    out = {"backend": BACKEND}
    for name in CASES:
        fn = work[name]
        fn()  # warm-up, includes JIT compilation
        number = 5 if name == "train_step" else 200
        best = min(timeit.repeat(fn, number=number, repeat=repeat)) / number
        out[name] = best
    print(json.dumps(out))


def run_backend(disable, repeat):
    env = dict(os.environ, VIOLET_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(repeat)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", help="also write results here")
    p.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args()
    if args.worker:
        measure(args.repeat)
        return
    fast = run_backend(False, args.repeat)
    slow = run_backend(True, args.repeat)
    if fast["backend"] != "numba":
        print("numba unavailable; both columns use numpy", file=sys.stderr)
    print(f"{'kernel':<16}{'numba us':>12}{'numpy us':>12}{'speedup':>10}")
    for name in CASES:
        f, s = fast[name] * 1e6, slow[name] * 1e6
        print(f"{name:<16}{f:>12.1f}{s:>12.1f}{s / f:>9.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"numba": fast, "numpy": slow}, fh, indent=1)


if __name__ == "__main__":
    main()
