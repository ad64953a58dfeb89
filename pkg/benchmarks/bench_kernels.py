"""Time the numba kernels against the numpy fallbacks, plus one training step per backend.

    python3 benchmarks/bench_kernels.py [--repeat N]

Kernel rows call both implementations directly in one process. The training
step rows run in a subprocess with ``REXUP_NUMBA`` set, since the backend is
picked at import time.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from rexup.kernels import NUMBA_KERNELS, NUMPY_KERNELS

STEP_SNIPPET = """
import time
from rexup.synth import generate_dataset
from rexup.network import ModelConfig, RexupModel, indexed_samples
from rexup.harness import corpus_vocab
from rexup.params import adam_step
s = generate_dataset(0, 40)["train"]
m = RexupModel(ModelConfig(d=64, dtype="float32"), corpus_vocab(s))
items = indexed_samples(s)[:32]
b = m.collate(items)
for _ in range(2):
    loss, out = m.loss(b); m.backward(loss, out.tape); adam_step(m.store)
t = time.perf_counter()
for _ in range({n}):
    loss, out = m.loss(b); m.backward(loss, out.tape); adam_step(m.store)
print((time.perf_counter() - t) / {n})
"""


def cases(rng):
    B, U, O, d = 32, 12, 7, 64
    logits = rng.normal(size=(B * 4, O))
    mask = rng.random((B * 4, O)) < 0.8
    mask[:, 0] = True
    p = NUMPY_KERNELS.softmax_fwd(logits, mask)
    g = rng.normal(size=p.shape)
    gates = rng.normal(size=(B, 4 * d))
    c = rng.normal(size=(B, d))
    out, act = NUMPY_KERNELS.lstm_fwd(gates, c)
    g_out = rng.normal(size=out.shape)
    idx = rng.integers(0, 60, size=B * U)
    src = rng.normal(size=(B * U, 32))
    return {
        "softmax_fwd": lambda k: k.softmax_fwd(logits, mask),
        "softmax_bwd": lambda k: k.softmax_bwd(p, g),
        "lstm_fwd": lambda k: k.lstm_fwd(gates, c),
        "lstm_bwd": lambda k: k.lstm_bwd(act, c, g_out),
        "scatter_add_rows": lambda k: k.scatter_add_rows(np.zeros((60, 32)), idx, src, 0),
    }


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=10)
    args = ap.parse_args()
    if NUMBA_KERNELS is None:
        sys.exit("numba is not importable; nothing to compare")
    print(f"{'kernel':<18}{'numpy (us)':>12}{'numba (us)':>12}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        fn(NUMBA_KERNELS)  # compile
        t_np = min(timeit.repeat(lambda: fn(NUMPY_KERNELS), number=args.repeat, repeat=3)) / args.repeat
        t_nb = min(timeit.repeat(lambda: fn(NUMBA_KERNELS), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:<18}{t_np * 1e6:>12.2f}{t_nb * 1e6:>12.2f}{t_np / t_nb:>10.2f}")
    print()
    for flag in ("0", "1"):
        env = {**os.environ, "REXUP_NUMBA": flag}
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=args.steps)], env=env, capture_output=True, text=True, check=True)
        label = "numba" if flag == "1" else "numpy"
        print(f"train step d=64 B=32 ({label}): {float(res.stdout.strip()) * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
