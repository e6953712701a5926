"""Time the hot kernels under the numba and numpy backends.

Each backend runs in its own interpreter because the backend is chosen from
``LORALAB_BACKEND`` at import time.  Numba compilation is excluded by a
warm-up call.

    python3 benchmarks/bench_kernels.py            # both backends, summary table
    python3 benchmarks/bench_kernels.py --repeat 5
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time


def _measure(repeat: int) -> dict:
    import numpy as np

    from loralab import kernels
    from loralab.nnet import TrainConfig
    from loralab.victim import VictimDataConfig, train_victim
    from loralab.worldgen import TaskWorld

    rng = np.random.default_rng(0)
    d, h, K, r = 16, 32, 8, 4
    X = rng.normal(size=(32, d))
    Q = rng.dirichlet(np.ones(K), size=32)
    W = rng.normal(size=(h, d)) / 4
    b = rng.normal(size=h) * 0.1
    single = rng.normal(size=r * d + h * r + K * h + K) * 0.1
    dual = rng.normal(size=2 * (r * d + h * r) + K * h + K) * 0.1
    g1, g2 = np.zeros_like(single), np.zeros_like(dual)
    Wh, bh = single[r * d + h * r:r * d + h * r + K * h].reshape(K, h), single[-K:]
    Xbig = rng.normal(size=(1600, d))
    A = rng.normal(size=(32, 32))
    S = A @ A.T

    cases = {
        "forward n=32": lambda: kernels.forward(X, W, b, Wh, bh),
        "forward n=1600": lambda: kernels.forward(Xbig, W, b, Wh, bh),
        "ce_loss_grad batch=32": lambda: kernels.ce_loss_grad(X, Q, W, b, single, r, 1.0, g1),
        "dual_loss_grad batch=32": lambda: kernels.dual_loss_grad(X, Q, W, b, dual, r, 1.0, 1.0, False, True, g2),
        "jacobi_eigh 32x32": lambda: kernels.jacobi_eigh(S, 1e-14, 100),
        "victim training (20 epochs)": lambda: train_victim(TaskWorld(), VictimDataConfig(), TrainConfig()),
    }
    out = {}
    for name, fn in cases.items():
        fn()  # warm-up / compile
        inner = 1
        while True:  # pick an inner loop count giving >= 50 ms per sample
            t0 = time.perf_counter()
            for _ in range(inner):
                fn()
            if time.perf_counter() - t0 >= 0.05 or inner >= 1 << 16:
                break
            inner *= 4
        samples = []
        for _ in range(repeat):
            t0 = time.perf_counter()
            for _ in range(inner):
                fn()
            samples.append((time.perf_counter() - t0) / inner)
        out[name] = sorted(samples)[len(samples) // 2]
    return {"backend": kernels.BACKEND, "timings": out}


def _run_backend(backend: str, repeat: int) -> dict:
    env = dict(os.environ, LORALAB_BACKEND=backend)
    proc = subprocess.run([sys.executable, __file__, "--worker", "--repeat", str(repeat)],
                          env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def _human(seconds: float) -> str:
    for unit, scale in (("s", 1.0), ("ms", 1e-3), ("us", 1e-6)):
        if seconds >= scale:
            return f"{seconds / scale:8.2f} {unit}"
    return f"{seconds / 1e-9:8.2f} ns"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    parser.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args(argv)
    if args.worker:
        print(json.dumps(_measure(args.repeat)))
        return 0
    results = {name: _run_backend(name, args.repeat) for name in ("numba", "numpy")}
    fast, ref = results["numba"]["timings"], results["numpy"]["timings"]
    print(f"{'kernel':32s} {'numba':>11s} {'numpy':>11s} {'speedup':>8s}")
    for name in ref:
        print(f"{name:32s} {_human(fast[name])} {_human(ref[name])} {ref[name] / fast[name]:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
