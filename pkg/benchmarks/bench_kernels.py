"""Time the numba and numpy paths of the hot kernels side by side.

    python benchmarks/bench_kernels.py --repeat 20

Also reports a short end-to-end FedAvg run under each path by re-importing
the package in a subprocess with FEDSELECT_DISABLE_NUMBA set or unset.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from fedselect import _accel, kernels


def bench_train(repeat: int) -> dict:
    rng = np.random.default_rng(0)
    d, C, n, epochs = 20, 10, 128, 1
    X = rng.standard_normal((n, d))
    y = rng.integers(0, C, n)
    order = np.stack([rng.permutation(n) for _ in range(epochs)])
    out = {}
    for name, fn in (("numpy", kernels.train_epochs_np), ("numba", kernels.train_epochs_jit)):
        if name == "numba" and not _accel.HAVE_NUMBA:
            continue

        def call():
            W, b = np.zeros((d, C)), np.zeros(C)
            fn(W, b, X, y, order, 8, 0.05, False, 0.9, 0.999, 1e-8)

        call()  # compile / warm caches
        out[name] = min(timeit.repeat(call, number=20, repeat=repeat)) / 20
    return out


def bench_greedy(repeat: int) -> dict:
    rng = np.random.default_rng(1)
    cand = rng.integers(0, 128, size=(1000, 10)).astype(float)
    cur = cand[0].copy()
    taken = np.zeros(1000, dtype=np.bool_)
    taken[0] = True
    out = {}
    for name, fn in (("numpy", kernels.greedy_kl_scores_np), ("numba", kernels.greedy_kl_scores_jit)):
        if name == "numba" and not _accel.HAVE_NUMBA:
            continue
        fn(cur, cand, taken)
        out[name] = min(timeit.repeat(lambda: fn(cur, cand, taken), number=50, repeat=repeat)) / 50
    return out


END_TO_END = """
import time, warnings
from fedselect.distributions import generate_federation
from fedselect.fl_train import SyntheticTask, TrainConfig, run_experiment, train_reference
from fedselect.selection import SelectionConfig
ds = generate_federation(N=1000, seed=0)
task = SyntheticTask(seed=0)
cfg = TrainConfig(rounds={rounds})
ref = train_reference(task, 2560, cfg, max_epochs=20)
run_experiment(ds, task, SelectionConfig(20, 1, "random", 0), TrainConfig(rounds=1), reference=ref)
t = time.perf_counter()
run_experiment(ds, task, SelectionConfig(20, 1, "dubhe", 0), cfg, reference=ref)
print(time.perf_counter() - t)
"""


def bench_end_to_end(rounds: int) -> dict:
    out = {}
    for name, flag in (("numpy", "1"), ("numba", "0")):
        if name == "numba" and not _accel.HAVE_NUMBA:
            continue
        env = dict(os.environ, FEDSELECT_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", END_TO_END.format(rounds=rounds)], env=env,
                             capture_output=True, text=True, check=True)
        out[name] = float(res.stdout.strip().splitlines()[-1])
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--rounds", type=int, default=50, help="FedAvg rounds for the end-to-end timing")
    ap.add_argument("--skip-end-to-end", action="store_true")
    args = ap.parse_args(argv)

    results = {
        "local_epoch_128_samples_s": bench_train(args.repeat),
        "greedy_scan_1000_clients_s": bench_greedy(args.repeat),
    }
    if not args.skip_end_to_end:
        results[f"fedavg_{args.rounds}_rounds_s"] = bench_end_to_end(args.rounds)
    for name, row in results.items():
        speedup = row["numpy"] / row["numba"] if "numba" in row else float("nan")
        cells = "  ".join(f"{k}={v:.3e}" for k, v in row.items())
        print(f"{name:32s} {cells}  speedup={speedup:.1f}x")
    print(json.dumps(results))


if __name__ == "__main__":
    main()
