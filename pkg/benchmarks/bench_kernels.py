"""Compare the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py              # kernel timings
    python benchmarks/bench_kernels.py --end-to-end # also a short training run per backend

Both kernel variants live in ``hrlrooms.kernels`` side by side, so the kernel
timings run in one process. The end-to-end timing starts a fresh interpreter
per backend because the backend flag is read once at import.
"""
import argparse
import json
import os
import subprocess
import sys
import tempfile
import timeit
from pathlib import Path

import numpy as np

from hrlrooms import _accel, kernels
from hrlrooms.approx import StateGoalNet
from hrlrooms.env import Variant, generate_layout, wall_mask


def cases():
    net = StateGoalNet((20, 20), seed=0)
    codes = net.codes
    rng = np.random.default_rng(0)
    rows = net.gates((0.5, 0.5))
    h = np.empty((len(rows), net.n_hidden))
    n = 32
    batch = (codes, rng.integers(400, size=n), rng.integers(400, size=n), rng.random((n, 2)),
             rng.integers(4, size=n), rng.choice([-2.0, -1.0, 1.0], size=n), rng.random(n) < 0.7,
             0.99, 0.001, net.k, net.goal_coder.centers, net.goal_coder.sigma, 0.1)
    pts = rng.random((20_000, 2))
    cents = rng.random((8, 2))
    m = 2000
    meta = (rng.integers(6, size=400), 20, rng.integers(20, size=(m, 2)), rng.integers(6, size=m),
            rng.normal(size=m), rng.integers(20, size=(m, 2)), rng.random(m) < 0.2,
            rng.integers(1, 50, size=m), rng.integers(m, size=32), 0.99, True, 0.001)
    lay = generate_layout(Variant.FOUR_ROOM_KEY_LOCK, 0)
    walls = wall_mask(lay)
    u = rng.random(201)
    ra = rng.integers(4, size=201)
    acts = np.zeros(200, dtype=np.int64)
    w1, w2 = net.w1.copy(), net.w2.copy()
    table = np.zeros((6, 6))

    def episode(fn):
        return lambda: fn(w1, w2, codes, rows, net.k, walls, 3, 3, lay.key_pos.x, lay.key_pos.y,
                          lay.reward_pos.x, lay.reward_pos.y, 40.0, 200, 0.2, u, ra, 0.99, 0.001,
                          acts)

    def both(name, fn_args):
        return name, [lambda f=f: f(*fn_args) for f in (getattr(kernels, name + "_nb"),
                                                         getattr(kernels, name + "_np"))]

    yield both("forward", (w1, w2, codes[123], rows, net.k, h))
    yield both("td_batch", (w1, w2, *batch))
    yield both("lloyd_step", (pts, cents))
    yield both("meta_slots", (table, *meta))
    yield "sarsa_episode", [episode(kernels.sarsa_episode_nb), episode(kernels.sarsa_episode_np)]


def best_time(fn, budget=0.5):
    fn()  # compile / warm up
    n, _ = timeit.Timer(fn).autorange()
    n = max(1, int(n * budget / 0.2))
    return min(timeit.Timer(fn).repeat(3, n)) / n


def end_to_end(episodes: int) -> dict:
    out = {}
    for backend, flag in (("numba", "0"), ("numpy", "1")):
        with tempfile.TemporaryDirectory() as tmp:
            env = dict(os.environ, HRLROOMS_NUMPY=flag)
            cmd = [sys.executable, "-m", "hrlrooms.cli", "train", "--out", tmp, "--seed", "0",
                   "--episodes", str(episodes), "--pretrain-episodes", "50",
                   "--eval-interval", "0", "--final-eval-episodes", "0"]
            subprocess.run(cmd, check=True, env=env, capture_output=True)
            m = json.loads((Path(tmp) / "manifest.json").read_text())
            assert m["backend"] == backend, m["backend"]
            out[backend] = m["timings"]["train_s"]
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--end-to-end", action="store_true")
    p.add_argument("--episodes", type=int, default=200)
    args = p.parse_args(argv)
    if _accel.numba is None:
        sys.exit("numba is not installed; nothing to compare")
    print(f"{'kernel':28s}{'numba':>12s}{'numpy':>12s}{'speedup':>10s}")
    for name, (nb, np_) in cases():
        t_nb, t_np = best_time(nb), best_time(np_)
        print(f"{name:28s}{t_nb * 1e6:10.1f}us{t_np * 1e6:10.1f}us{t_np / t_nb:9.1f}x")
    if args.end_to_end:
        t = end_to_end(args.episodes)
        print(f"\ntrain, {args.episodes} episodes: numba {t['numba']:.1f}s, numpy {t['numpy']:.1f}s "
              f"({t['numpy'] / t['numba']:.1f}x)")


if __name__ == "__main__":
    main()
