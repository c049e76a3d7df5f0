"""Compare the numba and pure-numpy kernel paths.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times both implementations directly (the env flag only switches the
dispatcher), plus one end-to-end environment episode per path in a
subprocess so the flag takes effect at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from p2pmarl import kernels

EPISODE = """
import time, numpy as np
from p2pmarl.env import MarketEnv
from p2pmarl.scenario import builtin_scenario
env = MarketEnv(builtin_scenario("case10"))
rng = np.random.default_rng(0)
env.reset(); env.step_followers(rng.uniform(-1, 1, env.n)); env.step_leader(rng.uniform(0, 1, 3))
t = time.perf_counter()
for _ in range(50):
    env.reset(rng, perturb=True)
    for _ in range(24):
        env.step_followers(rng.uniform(-1, 1, env.n))
        env.step_leader(rng.uniform(0, 1, 3))
print((time.perf_counter() - t) / (50 * 24) * 1e3)
"""


def books(n, rng):
    bid_p = np.sort(rng.integers(0, 200, n).astype(float))[::-1].copy()
    off_p = np.sort(rng.integers(0, 200, n).astype(float))
    return bid_p, rng.uniform(0.1, 10, n), off_p, rng.uniform(0.1, 10, n), 1e-9


def bench(label, fn, args, repeat):
    fn(*args)  # warm up / compile
    best = min(timeit.repeat(lambda: fn(*args), number=repeat, repeat=5)) / repeat
    print(f"{label:<34s} {best * 1e6:10.1f} us")
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    for n in (5, 50, 500):
        b = books(n, rng)
        fast = bench(f"clear_sorted numba  ({n} per side)", kernels.clear_sorted_numba, b, args.repeat)
        slow = bench(f"clear_sorted numpy  ({n} per side)", kernels.clear_sorted_numpy, b, args.repeat)
        print(f"{'  speedup':<34s} {slow / fast:10.1f} x")
    for t in (240, 5000):
        g = (rng.normal(size=t), rng.normal(size=t), (rng.uniform(size=t) < 1 / 24).astype(float), 0.0, 0.95, 0.95)
        fast = bench(f"gae numba  (T={t})", kernels.gae_numba, g, args.repeat)
        slow = bench(f"gae numpy  (T={t})", kernels.gae_numpy, g, args.repeat)
        print(f"{'  speedup':<34s} {slow / fast:10.1f} x")
    for flag in ("0", "1"):
        env = {**os.environ, "P2PMARL_DISABLE_NUMBA": flag}
        ms = float(subprocess.run([sys.executable, "-c", EPISODE], env=env, capture_output=True, text=True,
                                  check=True).stdout)
        path = "numpy" if flag == "1" else "numba"
        print(f"{'env step, case10, ' + path + ' path':<34s} {ms * 1e3:10.1f} us")


if __name__ == "__main__":
    main()
