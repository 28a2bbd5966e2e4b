"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat N] [--episodes N]

Kernel timings call both implementations directly in one process. The
end-to-end figure runs fault-free episodes in a subprocess per backend,
selected through CAPFUZZ_PURE_PYTHON, since the backend is fixed at import.
"""
from __future__ import annotations

import argparse
import os
import random
import subprocess
import sys
import timeit

import numpy as np

from capfuzz import kernels
from capfuzz.world import generate_scene

EPISODES_SNIPPET = """
import time
from capfuzz import kernels
from capfuzz.agent import EpisodeSettings, reference_agent, run_episode
from capfuzz.instruction import generate_instruction
from capfuzz.world import generate_scene
t0 = time.perf_counter()
for i in range({n}):
    scene = generate_scene(1000 + i)
    instr = generate_instruction(scene, i)
    run_episode(scene, instr, reference_agent(), EpisodeSettings())
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def kernel_cases(rng: random.Random):
    scene = generate_scene(7)
    mask = scene.free_mask
    free = sorted(scene.free_cells)
    goal = [rng.choice(free) for _ in range(4)]
    field_ = kernels.python.bfs_field(mask, goal)
    start = max(free, key=lambda c: field_[c[1], c[0]])
    a = np.array([rng.choice(free) for _ in range(60)], dtype=float)
    b = np.array([rng.choice(free) for _ in range(60)], dtype=float)
    x0, y0 = free[len(free) // 2]
    targets = [(x, y) for x, y in free if abs(x - x0) + abs(y - y0) <= 8]
    return {
        "bfs_field": lambda k: k.bfs_field(mask, goal),
        "descend": lambda k: k.descend(field_, start),
        "dtw 60x60": lambda k: k.dtw(a, b),
        "lines_clear": lambda k: k.lines_clear(mask, x0, y0, targets),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200, help="calls per kernel timing")
    ap.add_argument("--episodes", type=int, default=30, help="episodes for the end-to-end run (0 skips it)")
    args = ap.parse_args(argv)

    if kernels.compiled is None:
        print("compiled extension not built; only the Python backend is available")
    backends = {"python": kernels.python}
    if kernels.compiled is not None:
        backends["cython"] = kernels.compiled

    print(f"{'kernel':<14}" + "".join(f"{name + ' us':>14}" for name in backends) + f"{'speedup':>10}")
    for name, fn in kernel_cases(random.Random(0)).items():
        us = {}
        for bname, impl in backends.items():
            us[bname] = min(timeit.repeat(lambda: fn(impl), number=args.repeat, repeat=3)) / args.repeat * 1e6
        speed = f"{us['python'] / us['cython']:.1f}x" if "cython" in us else "-"
        print(f"{name:<14}" + "".join(f"{v:>14.1f}" for v in us.values()) + f"{speed:>10}")

    if args.episodes:
        print(f"\n{args.episodes} fault-free episodes end to end:")
        for bname in backends:
            env = dict(os.environ, CAPFUZZ_PURE_PYTHON="1" if bname == "python" else "0")
            out = subprocess.run([sys.executable, "-c", EPISODES_SNIPPET.format(n=args.episodes)],
                                 env=env, capture_output=True, text=True, check=True).stdout.split()
            print(f"  {out[0]:<8}{float(out[1]):8.2f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
