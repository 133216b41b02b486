"""Compare the numba and numpy voxel kernels, and time a full subject fit
under each backend.

    python3 benchmarks/bench_kernels.py [--voxels 200000] [--repeats 5]

The kernel comparison runs in-process (both implementations are importable
when numba is installed). The end-to-end fit is timed in two subprocesses,
one with VBMIX_NUMBA=0, so the backend selection itself is exercised.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from vbmix import kernels

FIT_SNIPPET = """
import json, time
import numpy as np
from vbmix import kernels
from vbmix.population import TrainedModel, init_hyper
from vbmix.subject import FitOptions, TemplatePrior, fit_subject
from vbmix.volume import PhantomSpec, apply_fov_mask, generate_phantom

spec = PhantomSpec((48, 48, 32), [[0, 1, 2], [3, 0, 1], [6, 4, 0]],
                   [np.eye(3) * s for s in (0.5, 0.8, 1.0)], [0.3, 0.3, 0.4])
vol = apply_fov_mask(generate_phantom(spec)[0], 2, 0.5)
model = TrainedModel(init_hyper(vol, 3, 0), TemplatePrior.stationary(3))
opts = FitOptions(max_iters=20, elbo_rel_tol=1e-300)
fit_subject(vol, model, FitOptions(max_iters=1))  # warm-up / JIT
t0 = time.perf_counter()
_, trace = fit_subject(vol, model, opts)
print(json.dumps({"backend": kernels.BACKEND, "seconds": time.perf_counter() - t0,
                  "iters": len(trace), "elbo": float(trace.values[-1])}))
"""


def bench_kernels(n, repeats, rng):
    if not hasattr(kernels, "quad_form_numba"):
        print("numba not available; kernel comparison skipped")
        return
    R = rng.standard_normal((n, 4))
    P = np.cov(rng.standard_normal((4, 50)))
    w = rng.random(n)
    logp = rng.standard_normal((n, 5)) * 10
    cases = {
        "quad_form": ((R, P), kernels.quad_form_numpy, kernels.quad_form_numba),
        "weighted_moments": ((R, w), kernels.weighted_moments_numpy, kernels.weighted_moments_numba),
        "normalize_log_rows": ((logp,), kernels.normalize_log_rows_numpy, kernels.normalize_log_rows_numba),
    }
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, (args, f_np, f_nb) in cases.items():
        f_nb(*args)  # compile
        t_np = min(timeit.repeat(lambda: f_np(*args), number=1, repeat=repeats)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*args), number=1, repeat=repeats)) * 1e3
        print(f"{name:<20}{t_np:>10.2f}{t_nb:>10.2f}{t_np / t_nb:>8.1f}x")


def bench_fit():
    results = []
    for flag in ("0", "1"):
        env = dict(os.environ, VBMIX_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", FIT_SNIPPET], env=env,
                             capture_output=True, text=True, check=True)
        results.append(json.loads(out.stdout))
    for r in results:
        print(f"fit ({r['backend']}): {r['seconds']:.3f}s for {r['iters']} iterations, "
              f"final ELBO {r['elbo']!r}")
    if len(results) == 2:
        diff = abs(results[0]["elbo"] - results[1]["elbo"]) / abs(results[0]["elbo"])
        print(f"relative ELBO difference between backends: {diff:.2e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--voxels", type=int, default=200_000)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    bench_kernels(args.voxels, args.repeats, np.random.default_rng(0))
    bench_fit()


if __name__ == "__main__":
    main()
