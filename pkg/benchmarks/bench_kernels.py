"""Compare the numba and numpy kernel paths.

    python benchmarks/bench_kernels.py [--repeat 50] [--json out.json]

Part one times each kernel variant directly on guidance-sized inputs
(16x16 maps, 8 tokens). Part two runs a short guided toy generation in two
subprocesses, one with ``EBAMA_DISABLE_NUMBA=1``, and reports wall time.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from ebama import kernels

TOY_RUN = """
import time
from ebama.energy import GuidanceHyperparams
from ebama.guidance import SamplerConfig, guided_sample
from ebama.kernels import BACKEND
from ebama.prompt_graph import FixtureAnnotator, annotate, extract_object_graph
from ebama.toy import ToyDenoiser

tokens = annotate("a purple crown and a blue suitcase", FixtureAnnotator())
words, graph = [t.text for t in tokens], extract_object_graph(tokens)
toy = ToyDenoiser(0)
run = lambda: guided_sample(toy, words, graph, SamplerConfig(total_steps=STEPS), GuidanceHyperparams(total_steps=STEPS, update_steps=STEPS // 2))
run()  # warm-up (jit compilation, caches)
t = time.perf_counter()
for _ in range(REPS):
    run()
print(BACKEND, (time.perf_counter() - t) / REPS)
"""


def kernel_inputs(rng):
    img = rng.random((16, 16))
    feats = rng.standard_normal((8, 256))
    pos = np.abs(feats) + 0.1
    logits = rng.standard_normal((256, 8))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    k = kernels.gaussian_kernel3(1.0)
    return {
        "smooth3": (img, k),
        "smooth3_adjoint": (img, k),
        "cosine_matrix": (feats,),
        "cosine_matrix_vjp": (feats, rng.standard_normal((8, 8))),
        "sym_kl_matrix": (pos, 1e-12),
        "softmax_rows": (logits,),
        "softmax_rows_vjp": (probs, rng.standard_normal((256, 8))),
    }


def bench_kernels(repeat: int) -> list[dict]:
    rng = np.random.default_rng(0)
    rows = []
    for name, args in kernel_inputs(rng).items():
        np_fn, nb_fn = kernels.variants(name)
        nb_fn(*args)  # compile outside the timed region
        np.testing.assert_allclose(np_fn(*args), nb_fn(*args), rtol=1e-10, atol=1e-12)
        times = {}
        for label, fn in (("numpy", np_fn), ("numba", nb_fn)):
            timer = timeit.Timer(lambda fn=fn: fn(*args))
            loops, _ = timer.autorange()
            best = min(timer.repeat(repeat=max(3, repeat // 10), number=loops)) / loops
            times[label] = best * 1e6
        rows.append({"kernel": name, "numpy_us": times["numpy"], "numba_us": times["numba"],
                     "speedup": times["numpy"] / times["numba"]})
    return rows


def bench_toy(steps: int, reps: int) -> dict:
    out = {}
    code = TOY_RUN.replace("STEPS", str(steps)).replace("REPS", str(reps))
    for disable in ("0", "1"):
        env = {**os.environ, "EBAMA_DISABLE_NUMBA": disable}
        proc = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                              text=True, check=True)
        backend, seconds = proc.stdout.split()
        out[backend] = float(seconds)
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--steps", type=int, default=20, help="sampling steps for the toy run")
    ap.add_argument("--reps", type=int, default=3, help="timed toy runs per backend")
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)

    rows = bench_kernels(args.repeat)
    print(f"{'kernel':<20}{'numpy (us)':>12}{'numba (us)':>12}{'speedup':>9}")
    for r in rows:
        print(f"{r['kernel']:<20}{r['numpy_us']:>12.2f}{r['numba_us']:>12.2f}{r['speedup']:>8.2f}x")

    toy = bench_toy(args.steps, args.reps)
    print(f"\ntoy guided run ({args.steps} steps, {args.steps // 2} updates):")
    for backend, sec in toy.items():
        print(f"  {backend:<6} {sec * 1e3:8.1f} ms")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"kernels": rows, "toy_seconds": toy}, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
