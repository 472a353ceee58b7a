"""Time the compiled kernels against the pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from trajtensor import kernels


def rts_case(rng, N=500, D=6):
    means = rng.standard_normal((N, D))
    covs = np.stack([np.eye(D) * 0.5 + 0.01 * np.ones((D, D)) for _ in range(N)])
    F = np.stack([np.eye(D) * 0.9 for _ in range(N - 1)])
    Q = np.stack([np.eye(D) * 0.1 for _ in range(N - 1)])
    return means, covs, F, Q


def sweep_case(rng, E=64, M=3, K=30, R=3):
    obj = rng.integers(0, K, (E, M)).astype(np.int64)
    prec = np.stack([np.eye(R) * 2.0 for _ in range(K)])
    return dict(
        y=rng.standard_normal(E), obj=obj, prior_prec=prec, prior_shift=rng.standard_normal((K, R)),
        site_prec=np.zeros((E, M, R, R)), site_shift=np.zeros((E, M, R)), site_omega=np.zeros(E),
        post_prec=prec.copy(), means=rng.standard_normal((K, R)), covs=np.linalg.inv(prec),
        gamma_ok=np.zeros(E, dtype=np.uint8),
    )


def bench_backend(mod, repeat):
    rng = np.random.default_rng(0)
    rts = rts_case(rng)
    base = sweep_case(rng)

    def sweep():
        s = {k: v.copy() for k, v in base.items()}
        mod.cp_sweep(s["y"], s["obj"], s["prior_prec"], s["prior_shift"], s["site_prec"], s["site_shift"],
                     s["site_omega"], s["post_prec"], s["means"], s["covs"], 2.0, 3.0, 1.0, s["gamma_ok"])

    return {
        "rts_backward (N=500, D=6)": min(timeit.repeat(lambda: mod.rts_backward(*rts), number=1, repeat=repeat)),
        "cp_sweep (E=64, M=3, R=3)": min(timeit.repeat(sweep, number=1, repeat=repeat)),
    }


def synthetic_run_seconds(pure):
    """Full 1000-event synthetic fit in a fresh interpreter."""
    env = dict(os.environ)
    if pure:
        env["TRAJTENSOR_PURE_PYTHON"] = "1"
    code = (
        "import time\n"
        "from trajtensor import create_model, MaternKernel, run_stream, generate_synthetic, finalize\n"
        "s, _ = generate_synthetic(0)\n"
        "m = create_model((2, 2), 1, kernel=MaternKernel(1, 0.3, 0.3))\n"
        "t = time.perf_counter(); run_stream(m, s.batches()); finalize(m)\n"
        "print(time.perf_counter() - t)\n"
    )
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    results = {name: bench_backend(mod, args.repeat) for name, mod in sorted(backends.items())}
    results.setdefault("python", {})
    for name in backends:
        results[name]["synthetic fit (1000 events)"] = synthetic_run_seconds(pure=(name == "python"))
    rows = list(results["python"])
    print(f"{'kernel':34s} {'python':>10s} {'compiled':>10s} {'speedup':>8s}")
    for row in rows:
        py = results["python"][row]
        c = results.get("compiled", {}).get(row)
        speed = f"{py / c:7.1f}x" if c else "    n/a"
        print(f"{row:34s} {py * 1e3:8.2f}ms {c * 1e3 if c else float('nan'):8.2f}ms {speed}")
    if "compiled" not in backends:
        print("compiled backend not built; reinstall with Cython available")


if __name__ == "__main__":
    main()
