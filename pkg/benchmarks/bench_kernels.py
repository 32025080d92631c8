"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N] [--scenario NAME]

Times each kernel on representative inputs, then one short scenario end to
end with each backend (the fallback is forced with TUNNELSIM_PURE=1 in a
child process, because the backend is chosen at import).
"""

from __future__ import annotations

import argparse
import os
import random
import subprocess
import sys
import timeit

from tunnelsim import _purepy

try:
    from tunnelsim import _speedups
except ImportError:
    _speedups = None

SCENARIO_SNIPPET = """
import time, copy
from tunnelsim import config, experiment, kernels
from tunnelsim.traffic import FlowPlan
scn = copy.copy(config.load_scenario({name!r}))
scn.flows = [FlowPlan("audio", "udp_stream", "sender", "receiver", 1500, 40.0, 60.0, flow_id=1)]
t = time.perf_counter()
experiment.run_once(scn, 1)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def kernel_cases():
    rng = random.Random(1)
    packet = bytes(rng.randrange(256) for _ in range(1540))
    delays = [1.2 + rng.random() * 0.1 for _ in range(12000)]
    return [
        ("internet_checksum 1540 B", "internet_checksum", (packet,), 2000),
        ("abs_diffs 12000", "abs_diffs", (delays,), 20),
        ("mean_var 12000", "mean_var", (delays,), 20),
    ]


def bench_kernels(repeat: int) -> None:
    print(f"{'kernel':28} {'python us':>12} {'cython us':>12} {'speedup':>8}")
    for label, fn, args, n in kernel_cases():
        row = []
        for mod in (_purepy, _speedups):
            if mod is None:
                row.append(None)
                continue
            f = getattr(mod, fn)
            best = min(timeit.repeat(lambda: f(*args), number=n, repeat=repeat)) / n
            row.append(best * 1e6)
        py, cy = row
        cy_s = f"{cy:12.2f}" if cy is not None else f"{'n/a':>12}"
        ratio = f"{py / cy:7.1f}x" if cy else f"{'n/a':>8}"
        print(f"{label:28} {py:12.2f} {cy_s} {ratio}")


def bench_scenario(name: str) -> None:
    code = SCENARIO_SNIPPET.format(name=name)
    print(f"\nscenario {name}, 60 s of audio:")
    for pure in ("0", "1"):
        env = dict(os.environ, TUNNELSIM_PURE=pure)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"  {backend:8} {float(secs):7.3f} s")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scenario", default="teredo-default")
    args = ap.parse_args()
    if _speedups is None:
        print("compiled extension not built; only the Python backend is timed")
    bench_kernels(args.repeat)
    bench_scenario(args.scenario)


if __name__ == "__main__":
    main()
