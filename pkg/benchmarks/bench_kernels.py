"""Compare the numba kernels with the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--sides 16 32 64] [--repeat 5] [--path]

Kernel timings call each backend explicitly.  ``--path`` additionally runs
one short path in a subprocess per backend, toggling STOCHNS_DISABLE_NUMBA,
which measures the whole scheme as users see it.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from stochns import _kernels
from stochns._jit import use_numba
from stochns.assembly import CONVECTION_DEGREE, _local_coeffs
from stochns.mesh import build_periodic_uniform_mesh
from stochns.spaces import SpaceKind, build_dof_map, element_data

PATH_SNIPPET = """
import time
from stochns.noise import WienerPath
from stochns.stepper import SchemeConfig, run_path
cfg = SchemeConfig(n_side={n}, n_steps={steps})
path = WienerPath.for_spec(cfg.noise, 1, cfg.n_steps, cfg.T)
run_path(cfg.with_(n_steps=1, T=cfg.k), WienerPath.for_spec(cfg.noise, 1, 1, cfg.k))  # warm up
t0 = time.perf_counter()
run_path(cfg, path)
print(time.perf_counter() - t0)
"""


def best_of(fn, repeat):
    fn()  # compile / warm caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernels(sides, repeat):
    rng = np.random.default_rng(0)
    print(f"{'n_side':>6} {'kernel':>10} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for n in sides:
        mesh = build_periodic_uniform_mesh(n)
        V = build_dof_map(mesh, SpaceKind.VelocityP2Vector)
        ed = element_data(mesh, 2, CONVECTION_DEGREE)
        w, u = rng.standard_normal((2, V.n_global))
        wl = _local_coeffs(V, w)
        cases = {
            "residual": lambda b: _kernels.trilinear_residual_global(
                ed.phi, ed.dphi, ed.dx, V.cell_dofs, V.component_stride, w, u, b),
            "jacobian": lambda b: _kernels.trilinear_jacobian_local(ed.phi, ed.dphi, ed.dx, wl, b),
        }
        for name, call in cases.items():
            t_np = best_of(lambda: call("numpy"), repeat)
            t_nb = best_of(lambda: call("numba"), repeat) if use_numba() else float("nan")
            print(f"{n:>6} {name:>10} {1e3 * t_nb:>10.2f} {1e3 * t_np:>10.2f} {t_np / t_nb:>8.1f}")


def bench_path(n, steps):
    code = PATH_SNIPPET.format(n=n, steps=steps)
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, STOCHNS_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        secs = float(out.stdout.strip().splitlines()[-1])
        print(f"path n_side={n} steps={steps} {label}: {secs:.2f} s ({1e3 * secs / steps:.1f} ms/step)")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sides", nargs="+", type=int, default=[16, 32, 64])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--path", action="store_true", help="also time a full path per backend")
    ap.add_argument("--path-side", type=int, default=32)
    ap.add_argument("--path-steps", type=int, default=32)
    args = ap.parse_args()
    if not use_numba():
        print("numba is disabled; only the numpy column is meaningful")
    bench_kernels(args.sides, args.repeat)
    if args.path:
        bench_path(args.path_side, args.path_steps)


if __name__ == "__main__":
    main()
