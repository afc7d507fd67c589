"""Compare the compiled kernels against the numpy fallback.

Kernel timings run in-process through the ``impl=`` override. End-to-end
CRoZe scoring runs once per backend in a subprocess, since the backend is
fixed at import (``CROZE_KERNELS=python`` forces the fallback).

    python3 benchmarks/bench_kernels.py [--repeat 20] [--cells 10]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from crozenas import kernels

SCORE_SNIPPET = """
import json, time, numpy as np
from crozenas import kernels, space
from crozenas.batchfile import synthetic_batch
from crozenas.proxies import croze
from crozenas.tensor import init_params
rng = np.random.default_rng(0)
batch = synthetic_batch(8, 10, (3, 16, 16), 0)
plans = [space.build_plan(space.sample_uniform(space.NB201, rng)) for _ in range({cells})]
t = time.perf_counter()
totals = [croze(p, init_params(p, i), batch).total for i, p in enumerate(plans)]
print(json.dumps({{"backend": kernels.BACKEND, "seconds": time.perf_counter() - t, "totals": totals}}))
"""


def kernel_cases(rng):
    x = rng.normal(size=(8, 16, 16, 16))
    w3 = rng.normal(size=(16, 16, 3, 3))
    w5 = rng.normal(size=(16, 16, 5, 5))
    b = rng.normal(size=16)
    gy = rng.normal(size=x.shape)
    _, idx = kernels.maxpool3_forward(x)
    return {
        "conv3x3 fwd": lambda m: kernels.conv2d_forward(x, w3, b, 1, impl=m),
        "conv3x3 bwd": lambda m: kernels.conv2d_backward(gy, x, w3, 1, impl=m),
        "dilconv5x5 fwd": lambda m: kernels.conv2d_forward(x, w5, b, 2, impl=m),
        "avgpool3 fwd": lambda m: kernels.avgpool3_forward(x, impl=m),
        "avgpool3 bwd": lambda m: kernels.avgpool3_backward(gy, impl=m),
        "maxpool3 fwd": lambda m: kernels.maxpool3_forward(x, impl=m),
        "maxpool3 bwd": lambda m: kernels.maxpool3_backward(gy, idx, impl=m),
    }


def end_to_end(backend, cells):
    env = dict(os.environ, CROZE_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", SCORE_SNIPPET.format(cells=cells)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--cells", type=int, default=10)
    args = ap.parse_args()

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy fallback is available", file=sys.stderr)
    names = sorted(backends)
    print(f"{'kernel':<16}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speedup':>10}")
    for label, fn in kernel_cases(np.random.default_rng(0)).items():
        ms = {n: 1e3 * min(timeit.repeat(lambda: fn(backends[n]), number=1, repeat=args.repeat))
              for n in names}
        speed = ms["python"] / ms["cython"] if "cython" in ms else float("nan")
        print(f"{label:<16}" + "".join(f"{ms[n]:>14.3f}" for n in names) + f"{speed:>10.2f}")

    runs = {n: end_to_end(n, args.cells) for n in names}
    print(f"\nCRoZe scoring, {args.cells} desk-scale NB201 cells:")
    for n, r in runs.items():
        print(f"  {n:<8} {r['seconds']:.2f} s ({1e3 * r['seconds'] / args.cells:.0f} ms per cell)")
    if len(runs) == 2:
        diff = max(abs(a - b) for a, b in zip(runs["python"]["totals"], runs["cython"]["totals"]))
        print(f"  max |score difference| between backends: {diff:.1e}")


if __name__ == "__main__":
    main()
