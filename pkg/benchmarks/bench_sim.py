"""Compare the compiled and interpreted Monte Carlo kernels.

Each mode runs in a fresh interpreter so ``METASTAB_DISABLE_JIT`` takes
effect at import time.  Usage::

    python3 benchmarks/bench_sim.py [--samples 5000] [--N 100]
"""
import argparse
import json
import os
import subprocess
import sys
import time


def run_once(samples: int, N: int) -> dict:
    from metastab import sim
    from metastab._jit import JIT_DISABLED
    from metastab.zero_range import ZRModel, zr_generator, zr_wells

    model = ZRModel.complete(2, N)
    chain = zr_generator(model)
    wells = zr_wells(model)
    anchor = wells.anchors[1]
    start = int(wells.E[1][-1])  # far edge of the well
    # warm-up compiles the kernels (or is a no-op when interpreted)
    sim.hitting_times(chain, start, [anchor], 16, (0, 0))
    t0 = time.perf_counter()
    times, _ = sim.hitting_times(chain, start, [anchor], samples, (1, 0))
    hit = time.perf_counter() - t0
    t0 = time.perf_counter()
    sim.order_exit_statistics(chain, wells.E, 1, max(samples // 20, 1), (2, 0))
    exit_ = time.perf_counter() - t0
    return {"jit": not JIT_DISABLED, "hitting_s": hit, "order_exit_s": exit_,
            "mean_hitting": float(times.mean()), "workers": sim.worker_count()}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=5_000)
    ap.add_argument("--N", type=int, default=100)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.child:
        print(json.dumps(run_once(args.samples, args.N)))
        return 0
    results = {}
    for label, flag in (("compiled", "0"), ("interpreted", "1")):
        env = dict(os.environ, METASTAB_DISABLE_JIT=flag)
        out = subprocess.run([sys.executable, __file__, "--child", "--samples", str(args.samples),
                              "--N", str(args.N)], env=env, check=True, capture_output=True, text=True)
        results[label] = json.loads(out.stdout.strip().splitlines()[-1])
    c, i = results["compiled"], results["interpreted"]
    print(f"{'kernel':<14}{'compiled s':>12}{'interpreted s':>15}{'speedup':>10}")
    for key, name in (("hitting_s", "hitting"), ("order_exit_s", "order-exit")):
        print(f"{name:<14}{c[key]:>12.3f}{i[key]:>15.3f}{i[key] / c[key]:>10.1f}")
    same = c["mean_hitting"] == i["mean_hitting"]
    print(f"mean hitting time identical across modes: {same} ({c['mean_hitting']!r})")
    return 0 if same else 1


if __name__ == "__main__":
    sys.exit(main())
