"""Monte Carlo convergence studies on coupled noise paths.

Every path is simulated at two neighbouring resolutions driven by the same
:class:`~stochns.noise.WienerPath`, so the difference of the two final states
measures discretization error and not sampling noise.  Three root mean square
estimators are reported per level:

* ``EAu`` final-time velocity difference in L2,
* ``EBu`` the same in the H1 seminorm,
* ``Ep``  difference of the time-integrated pressures ``k * sum_n p^n`` in L2.

Paths are independent; with ``parallel > 1`` they run in worker processes and
the reduction is done afterwards in path-index order, so serial and parallel
runs give the same table.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import logging
import math
import multiprocessing
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .assembly import assemble_divergence, assemble_mass, assemble_stiffness, taylor_hood_spaces
from .linsolve import LinearSolveError
from .mesh import build_periodic_uniform_mesh
from .noise import WienerPath, zero_diffusion
from .spaces import (
    FieldCoefficients,
    SpaceKind,
    build_dof_map,
    element_data,
    evaluate_basis,
    gradients_at_quadrature,
    values_at_quadrature,
)
from .stepper import PicardError, discretization, indicator_diagnostics, run_path

log = logging.getLogger(__name__)

ESTIMATORS = ("EAu", "EBu", "Ep")
MAX_FAILURE_RATE = 0.01


class StudyError(RuntimeError):
    """A study could not produce a valid table (e.g. too many failed paths)."""

    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)


@dataclass
class ErrorTable:
    """Estimates per level; ``stderr`` are Monte Carlo standard errors."""

    axis: str  # "time" or "space"
    levels: list
    estimates: dict  # estimator -> array over levels
    stderr: dict
    n_paths: int
    master_seed: int
    failures: list = field(default_factory=list)
    # squared per-path differences (paths, levels, estimators) and their path indices
    samples: Optional[np.ndarray] = None
    path_index: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.axis not in ("time", "space"):
            raise ValueError(f"axis must be 'time' or 'space', got {self.axis!r}")
        self.levels = [float(v) for v in self.levels]
        self.estimates = {k: np.asarray(v, dtype=float) for k, v in self.estimates.items()}
        self.stderr = {k: np.asarray(v, dtype=float) for k, v in self.stderr.items()}

    @property
    def failure_rate(self):
        total = self.n_paths + len(self.failures)
        return len(self.failures) / total if total else 0.0

    def rows(self):
        """CSV rows ``axis,level,estimator,value,stderr,n_paths,seed``."""
        for i, level in enumerate(self.levels):
            for name in self.estimates:
                yield {
                    "axis": self.axis,
                    "level": level,
                    "estimator": name,
                    "value": float(self.estimates[name][i]),
                    "stderr": float(self.stderr[name][i]),
                    "n_paths": self.n_paths,
                    "seed": self.master_seed,
                }


@dataclass(frozen=True)
class RateFit:
    """Least-squares line through (log level, log error)."""

    estimator: str
    slope: float
    intercept: float
    residual: float
    n_levels: int


# ---------------------------------------------------------------- prolongation

_PROLONG_CACHE = {}


def prolongation_matrix(coarse_dofmap, fine_dofmap):
    """Sparse matrix mapping coarse coefficients to fine ones.

    The fine mesh must be a uniform refinement of the coarse one; every
    coarse triangle is then a union of fine triangles and Lagrange
    interpolation at the fine nodes is exact.
    """
    cm, fm = coarse_dofmap.mesh, fine_dofmap.mesh
    if coarse_dofmap.space is not fine_dofmap.space:
        raise ValueError("prolongation needs the same space on both meshes")
    if (fm.n_side % cm.n_side) or not math.isclose(fm.period_L, cm.period_L):
        raise ValueError(f"meshes are not nested: n_side {cm.n_side} -> {fm.n_side}")
    key = (id(coarse_dofmap), id(fine_dofmap))
    hit = _PROLONG_CACHE.get(key)
    if hit is not None and hit[1] is coarse_dofmap and hit[2] is fine_dofmap:
        return hit[0]
    xy = fine_dofmap.node_coords()
    tri, ref = cm.locate(xy)
    vals, _ = evaluate_basis(coarse_dofmap.space, ref)
    vals = np.where(np.abs(vals) < 1e-14, 0.0, vals)
    cols = coarse_dofmap.cell_dofs[tri]
    rows = np.broadcast_to(np.arange(xy.shape[0])[:, None], cols.shape)
    P = sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(fine_dofmap.n_scalar, coarse_dofmap.n_scalar))
    P.eliminate_zeros()
    if coarse_dofmap.n_components > 1:
        P = sp.block_diag([P] * coarse_dofmap.n_components, format="csr")
    if len(_PROLONG_CACHE) > 32:
        _PROLONG_CACHE.clear()
    _PROLONG_CACHE[key] = (P, coarse_dofmap, fine_dofmap)
    return P


def prolong(coarse_field, coarse_dofmap, fine_dofmap):
    """Exact representation of a coarse field on a nested fine mesh."""
    values = coarse_field.values if isinstance(coarse_field, FieldCoefficients) else np.asarray(coarse_field)
    out = prolongation_matrix(coarse_dofmap, fine_dofmap) @ values
    return FieldCoefficients(coarse_dofmap.space, out)


# ---------------------------------------------------------------- level checks

def steps_for(T, k):
    """Number of steps of size ``k`` in [0, T]; rejects non-integer ratios."""
    n = T / k
    N = int(round(n))
    if N < 1 or abs(n - N) > 1e-9 * max(1.0, n):
        raise ValueError(f"time step {k!r} does not divide T={T!r}")
    return N


def sides_for(period_L, h):
    """Cells per side for mesh level ``h`` (cell size)."""
    n = period_L / h
    N = int(round(n))
    if N < 2 or abs(n - N) > 1e-9 * max(1.0, n):
        raise ValueError(f"mesh level h={h!r} does not divide the period {period_L!r}")
    return N


def check_time_levels(T, k_levels):
    """Steps per level (coarse and halved) and the finest path length."""
    if len(k_levels) < 1:
        raise ValueError("need at least one time level")
    counts = sorted({steps_for(T, k) for k in k_levels})
    finest = 2 * counts[-1]
    for N in counts:
        if finest % N:
            raise ValueError(f"time level with {N} steps does not divide the finest level ({finest} steps)")
    return counts, finest


def check_space_levels(period_L, h_levels):
    """Cells per side per level; every coarser mesh must nest in every finer one."""
    if len(h_levels) < 1:
        raise ValueError("need at least one space level")
    sides = sorted({sides_for(period_L, h) for h in h_levels})
    for a, b in zip(sides, sides[1:]):
        if b % a:
            raise ValueError(f"space levels are not nested: n_side {a} does not divide {b}")
    return sides


# ---------------------------------------------------------------- path workers

def _norms_sq(d, du, dp):
    return (float(du @ (d.M @ du)), float(du @ (d.K @ du)), float(dp @ (d.pressure_mass @ dp)))


def _time_path(config, counts, finest, index, seed):
    path = WienerPath.for_spec(config.noise, seed, finest, config.T, index)
    finals = {}
    for N in sorted(set(counts) | {2 * N for N in counts}):
        s = run_path(config.with_(n_steps=N), path)
        finals[N] = (s.final.u.values, s.pressure_time_integral_p.values)
    d = discretization(config)
    out = []
    for N in counts:
        (ua, pa), (ub, pb) = finals[N], finals[2 * N]
        out.append(_norms_sq(d, ua - ub, pa - pb))
    return out


def _space_path(config, sides, index, seed):
    N = config.n_steps
    path = WienerPath.for_spec(config.noise, seed, N, config.T, index)
    finals = {}
    for n in sorted(set(sides) | {2 * n for n in sides}):
        s = run_path(config.with_(n_side=n), path)
        finals[n] = (s.final.u.values, s.pressure_time_integral_p.values)
    out = []
    for n in sides:
        coarse = discretization(config.with_(n_side=n))
        fine = discretization(config.with_(n_side=2 * n))
        ua = prolongation_matrix(coarse.V, fine.V) @ finals[n][0]
        pa = prolongation_matrix(coarse.P, fine.P) @ finals[n][1]
        out.append(_norms_sq(fine, ua - finals[2 * n][0], pa - finals[2 * n][1]))
    return out


def _guarded(fn, index, *args):
    try:
        res = fn(*args)
    except (PicardError, LinearSolveError, FloatingPointError, ValueError) as exc:
        return index, None, f"{type(exc).__name__}: {exc}"
    flat = list(res.values()) if isinstance(res, dict) else res
    flat = np.asarray([v for v in np.ravel(np.asarray(flat, dtype=object)) if v is not None], dtype=float)
    if not np.all(np.isfinite(flat)):
        return index, None, "non-finite result"
    return index, res, None


_WORKER = {}


def _worker_init(fn, args):
    _WORKER["fn"] = fn
    _WORKER["args"] = args


def _worker_call(index):
    fn, args = _WORKER["fn"], _WORKER["args"]
    return _guarded(fn, index, *args(index))


def map_paths(fn, args, n_paths, parallel=1):
    """Run ``fn(*args(i))`` for i in range(n_paths); returns results in index order.

    Each entry is ``(index, result or None, error message or None)``.
    Workers are forked so configurations holding closures need no pickling.
    """
    if parallel is None or parallel <= 1 or n_paths <= 1:
        return [_guarded(fn, i, *args(i)) for i in range(n_paths)]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=int(parallel), mp_context=ctx,
                             initializer=_worker_init, initargs=(fn, args)) as pool:
        return list(pool.map(_worker_call, range(n_paths), chunksize=1))


def _reduce(axis, levels, results, n_requested, master_seed):
    failures = [(i, msg) for i, res, msg in results if res is None]
    if len(failures) > MAX_FAILURE_RATE * n_requested:
        raise StudyError(f"{len(failures)} of {n_requested} paths failed "
                         f"(limit {MAX_FAILURE_RATE:.0%}); first: {failures[0][1]}", failures)
    for i, msg in failures:
        log.warning("path %d excluded: %s", i, msg)
    good = [res for _, res, _ in results if res is not None]
    index = np.array([i for i, res, _ in results if res is not None], dtype=int)
    if not good:
        raise StudyError("no successful paths", failures)
    # (paths, levels, estimators); summed in path-index order
    sq = np.array(good, dtype=float)
    n = sq.shape[0]
    mean = np.zeros(sq.shape[1:])
    for row in sq:
        mean += row
    mean /= n
    value = np.sqrt(mean)
    std = sq.std(axis=0, ddof=1) if n > 1 else np.zeros_like(mean)
    # delta method for the root mean square
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.where(value > 0, std / (2.0 * value * math.sqrt(n)), 0.0)
    return ErrorTable(axis, list(levels),
                      {name: value[:, j] for j, name in enumerate(ESTIMATORS)},
                      {name: se[:, j] for j, name in enumerate(ESTIMATORS)},
                      n, int(master_seed), failures, sq, index)


def time_convergence_study(config_base, k_levels, n_paths, master_seed, parallel=1):
    """Time-step study at fixed mesh: each k level is compared with k / 2."""
    counts, finest = check_time_levels(config_base.T, k_levels)
    levels = [config_base.T / N for N in counts]
    log.info("time study: k=%s, %d paths, finest %d steps", levels, n_paths, finest)
    results = map_paths(_time_path, lambda i: (config_base, counts, finest, i, master_seed),
                        int(n_paths), parallel)
    table = _reduce("time", levels, results, int(n_paths), master_seed)
    return _descending(table)


def space_convergence_study(config_base, h_levels, n_paths, master_seed, parallel=1):
    """Mesh study at fixed k: each h level is compared with h / 2 on the fine mesh."""
    sides = check_space_levels(config_base.period_L, h_levels)
    levels = [config_base.period_L / n for n in sides]
    log.info("space study: h=%s, %d paths, k=%g", levels, n_paths, config_base.k)
    results = map_paths(_space_path, lambda i: (config_base, sides, i, master_seed),
                        int(n_paths), parallel)
    return _descending(_reduce("space", levels, results, int(n_paths), master_seed))


def _descending(table):
    order = np.argsort(table.levels)[::-1]
    table.levels = [table.levels[i] for i in order]
    table.estimates = {k: v[order] for k, v in table.estimates.items()}
    table.stderr = {k: v[order] for k, v in table.stderr.items()}
    if table.samples is not None:
        table.samples = table.samples[:, order]
    return table


# ---------------------------------------------------------------- rates

def fit_slope(levels, values):
    """(slope, intercept, rms residual) of log(values) against log(levels)."""
    x = np.log(np.asarray(levels, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(resid**2)))


def fit_rate(table):
    """RateFit per estimator; estimators with a nonpositive value are skipped."""
    if len(table.levels) < 3:
        raise ValueError(f"rate fits need at least 3 levels, got {len(table.levels)}")
    fits = {}
    for name, vals in table.estimates.items():
        if np.any(~(vals > 0)):
            log.warning("estimator %s skipped: nonpositive estimate", name)
            continue
        slope, icpt, res = fit_slope(table.levels, vals)
        fits[name] = RateFit(name, slope, icpt, res, len(table.levels))
    return fits


def bootstrap_slopes(table, n_boot=2000, seed=0, level=0.95):
    """Percentile intervals for the fitted slopes, resampling whole paths.

    Resampling paths (not levels) keeps the coupling between levels, so the
    interval reflects the Monte Carlo uncertainty of the slope itself.
    """
    if table.samples is None:
        raise ValueError("table carries no per-path samples")
    rng = np.random.default_rng(seed)
    n = table.samples.shape[0]
    x = np.log(np.asarray(table.levels))
    A = np.column_stack([x, np.ones_like(x)])
    pinv = np.linalg.pinv(A)[0]
    out = {}
    for j, name in enumerate(ESTIMATORS):
        sq = table.samples[:, :, j]
        if np.any(~(sq.mean(0) > 0)):
            continue
        picks = rng.integers(0, n, size=(n_boot, n))
        rms = np.sqrt(sq[picks].mean(axis=1))  # (n_boot, levels)
        slopes = np.log(np.maximum(rms, 1e-300)) @ pinv
        lo, hi = np.quantile(slopes, [(1 - level) / 2, (1 + level) / 2])
        out[name] = (float(lo), float(hi))
    return out


def write_samples_csv(table, path):
    """Per-path squared differences, one row per (path, level, estimator)."""
    import csv
    if table.samples is None:
        raise ValueError("table carries no per-path samples")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("path_index", "level", "estimator", "squared_difference"))
        for p, idx in enumerate(table.path_index):
            for i, level in enumerate(table.levels):
                for j, name in enumerate(ESTIMATORS):
                    w.writerow((int(idx), repr(level), name, repr(float(table.samples[p, i, j]))))


# ---------------------------------------------------------------- deterministic check

DETERMINISTIC_BANDS = {"velocity_L2": (3.0, 0.2), "velocity_H1": (2.0, 0.2), "pressure_L2": (2.0, 0.3)}


@dataclass
class VerificationReport:
    n_sides: list
    errors: dict  # name -> list over n_sides
    rates: dict  # name -> RateFit
    bands: dict = field(default_factory=lambda: dict(DETERMINISTIC_BANDS))

    def in_band(self, name):
        centre, width = self.bands[name]
        return abs(self.rates[name].slope - centre) <= width

    @property
    def passed(self):
        return all(self.in_band(name) for name in self.bands)


def taylor_green_problem(nu=1.0):
    """Closed-form steady solution and the forcing that sustains it.

    Velocity (sin 2pi x cos 2pi y, -cos 2pi x sin 2pi y), pressure
    cos(2pi x) sin(4pi y); the forcing -nu Lap u + (u.grad)u + grad p is
    derived symbolically.  Returns numpy callables (u, grad_u, p, f).
    """
    import sympy as sy

    x, y = sy.symbols("x y", real=True)
    tp = 2 * sy.pi
    u = sy.Matrix([sy.sin(tp * x) * sy.cos(tp * y), -sy.cos(tp * x) * sy.sin(tp * y)])
    p = sy.cos(tp * x) * sy.sin(2 * tp * y)
    grad = u.jacobian([x, y])
    lap = sy.Matrix([sy.diff(c, x, 2) + sy.diff(c, y, 2) for c in u])
    f = sy.simplify(-nu * lap + grad * u + sy.Matrix([sy.diff(p, x), sy.diff(p, y)]))

    def vec(expr):
        fn = sy.lambdify((x, y), list(expr), "numpy")
        return lambda X, Y: tuple(np.broadcast_to(np.asarray(c, dtype=float), np.shape(X)) for c in fn(X, Y))

    grad_fn = sy.lambdify((x, y), [list(grad.row(0)), list(grad.row(1))], "numpy")

    def grad_u(X, Y):
        g = grad_fn(X, Y)
        return np.stack([np.stack([np.broadcast_to(np.asarray(c, dtype=float), np.shape(X)) for c in row], -1)
                         for row in g], -2)

    p_fn = sy.lambdify((x, y), p, "numpy")
    return vec(u), grad_u, (lambda X, Y: np.broadcast_to(np.asarray(p_fn(X, Y), dtype=float), np.shape(X))), vec(f)


def error_norms(d, u, r, exact_u, exact_grad, exact_p, quad_degree=8):
    """L2 and H1-seminorm velocity errors and L2 pressure error against closed forms."""
    ev = element_data(d.mesh, 2, quad_degree)
    X, Y = ev.x[..., 0], ev.x[..., 1]
    uq = values_at_quadrature(d.V, u, quad_degree)
    gq = gradients_at_quadrature(d.V, u, quad_degree)
    pq = values_at_quadrature(d.P, r, quad_degree)
    ue = np.stack(exact_u(X, Y), -1)
    e_l2 = np.sum(np.sum((uq - ue) ** 2, -1) * ev.dx)
    e_h1 = np.sum(np.sum((gq - exact_grad(X, Y)) ** 2, axis=(-1, -2)) * ev.dx)
    e_p = np.sum((pq - exact_p(X, Y)) ** 2 * ev.dx)
    return math.sqrt(e_l2), math.sqrt(e_h1), math.sqrt(e_p)


def deterministic_verify(config, n_sides=(8, 16, 32), T=8.0, n_steps=8):
    """Noise-free Taylor-Green run per mesh; errors at the final time and fitted orders.

    Large implicit steps drive the discrete solution to its steady state
    starting from the projected exact velocity, so the remaining error is
    spatial.
    """
    exact_u, exact_grad, exact_p, forcing = taylor_green_problem(config.nu)
    errors = {name: [] for name in DETERMINISTIC_BANDS}
    for n in n_sides:
        cfg = config.with_(n_side=int(n), T=float(T), n_steps=int(n_steps), diffusion=zero_diffusion(),
                           forcing=forcing, body_force=(0.0, 0.0))
        path = WienerPath.for_spec(cfg.noise, 0, cfg.n_steps, cfg.T)
        s = run_path(cfg, path, u0_rule=exact_u)
        d = discretization(cfg)
        el2, eh1, ep = error_norms(d, s.final.u.values, s.final.r.values, exact_u, exact_grad, exact_p)
        log.info("deterministic n=%d: |u|_L2=%.3e |u|_H1=%.3e |p|_L2=%.3e", n, el2, eh1, ep)
        errors["velocity_L2"].append(el2)
        errors["velocity_H1"].append(eh1)
        errors["pressure_L2"].append(ep)
    h = [config.period_L / n for n in n_sides]
    rates = {}
    for name, vals in errors.items():
        slope, icpt, res = fit_slope(h, vals)
        rates[name] = RateFit(name, slope, icpt, res, len(h))
    return VerificationReport([int(n) for n in n_sides], errors, rates)


# ---------------------------------------------------------------- inf-sup

def inf_sup_constant(n_side, period_L=1.0):
    """Smallest nonzero sqrt(eig) of B K^+ B^T against the pressure mass matrix.

    This is the discrete inf-sup constant with the H1 seminorm on the
    velocity.  Constants lie in the kernels of K and B; adding a rank-one
    term per component removes them without changing the Schur complement.
    """
    mesh = build_periodic_uniform_mesh(n_side, period_L)
    V, P, _ = taylor_hood_spaces(mesh)
    K = assemble_stiffness(mesh, V).toarray()
    B = assemble_divergence(mesh, V, P).toarray()
    Mp = assemble_mass(mesh, P).toarray()
    w = np.asarray(assemble_mass(mesh, build_dof_map(mesh, SpaceKind.VelocityP2Vector)).sum(axis=0)).ravel()
    ns = V.n_scalar
    for c in range(2):
        wc = np.zeros_like(w)
        wc[c * ns:(c + 1) * ns] = w[c * ns:(c + 1) * ns]
        K += np.outer(wc, wc)
    S = B @ np.linalg.solve(K, B.T)
    S = 0.5 * (S + S.T)
    ev = sla.eigh(S, Mp, eigvals_only=True)
    ev = np.sort(ev)
    # the constant pressure is the single zero mode
    return float(math.sqrt(max(ev[1], 0.0)))


# ---------------------------------------------------------------- moments and indicators

def _max_l2_path(config, index, seed, finest):
    path = WienerPath.for_spec(config.noise, seed, finest, config.T, index)
    return [run_path(config, path).max_l2_sq]


def moment_stability(config, n_paths, master_seed, parallel=1):
    """Monte Carlo E[max_n ||u^n||^2] at (h, k), (h/2, k) and (h, k/2) on coupled paths."""
    variants = {"base": config, "h_refined": config.with_(n_side=2 * config.n_side),
                "k_refined": config.with_(n_steps=2 * config.n_steps)}
    finest = 2 * config.n_steps
    out = {}
    for name, cfg in variants.items():
        res = map_paths(_max_l2_path, lambda i, c=cfg: (c, i, master_seed, finest), int(n_paths), parallel)
        bad = [msg for _, r, msg in res if r is None]
        if len(bad) > MAX_FAILURE_RATE * n_paths:
            raise StudyError(f"moment study ({name}): {len(bad)} failed paths", bad)
        vals = np.array([r[0] for _, r, _ in res if r is not None])
        out[name] = float(np.mean(vals))
    out["h_change"] = abs(out["h_refined"] - out["base"]) / out["base"] if out["base"] > 0 else 0.0
    out["k_change"] = abs(out["k_refined"] - out["base"]) / out["base"] if out["base"] > 0 else 0.0
    return out


@dataclass(frozen=True)
class PathStatistics:
    """Trajectory maxima of one path, as consumed by indicator_diagnostics."""

    max_l2_sq: float
    max_h1_sq: float
    max_lap_sq: float
    max_err_l2_sq: Optional[float] = None
    max_err_h1_sq: Optional[float] = None


def _indicator_path(config, index, seed, reference):
    N = config.n_steps
    path = WienerPath.for_spec(config.noise, seed, 2 * N, config.T, index)
    s = run_path(config, path, store_trajectory=reference)
    if not reference:
        return asdict(PathStatistics(s.max_l2_sq, s.max_h1_sq, s.max_lap_sq))
    ref_cfg = config.with_(n_side=2 * config.n_side, n_steps=2 * N)
    r = run_path(ref_cfg, path, store_trajectory=True)
    coarse, fine = discretization(config), discretization(ref_cfg)
    P = prolongation_matrix(coarse.V, fine.V)
    diff = (P @ s.trajectory[1:].T) - r.trajectory[2::2].T
    err_l2 = np.einsum("in,in->n", diff, fine.M @ diff)
    err_h1 = np.einsum("in,in->n", diff, fine.K @ diff)
    return asdict(PathStatistics(s.max_l2_sq, s.max_h1_sq, s.max_lap_sq,
                                 float(err_l2.max()), float(err_h1.max())))


def indicator_study(config, n_paths, master_seed, epsilons, kappa0=1.0, kappa=1.0,
                    reference=True, parallel=1):
    """Sample-set membership fractions for each epsilon.

    With ``reference`` every path is also run at (h/2, k/2) and the
    difference stands in for the unknown exact solution in the kappa sets.
    """
    res = map_paths(_indicator_path, lambda i: (config, i, master_seed, reference), int(n_paths), parallel)
    bad = [msg for _, r, msg in res if r is None]
    if len(bad) > MAX_FAILURE_RATE * n_paths:
        raise StudyError(f"indicator study: {len(bad)} failed paths", bad)
    stats = [PathStatistics(**r) for _, r, _ in res if r is not None]
    h = config.period_L / config.n_side
    return {float(e): indicator_diagnostics(stats, e, kappa0, kappa, h=h, k=config.k) for e in epsilons}


# ---------------------------------------------------------------- output

CSV_COLUMNS = ("axis", "level", "estimator", "value", "stderr", "n_paths", "seed")
RATE_COLUMNS = ("axis", "estimator", "slope", "intercept", "residual", "n_levels", "ci95_low", "ci95_high")


def write_table_csv(table, path):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in table.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_rates_csv(axis, fits, path, intervals=None):
    """Rate fits, with bootstrap slope intervals when given (empty otherwise)."""
    import csv
    intervals = intervals or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RATE_COLUMNS)
        for f in fits.values():
            lo, hi = intervals.get(f.estimator, ("", ""))
            w.writerow([axis, f.estimator, repr(f.slope), repr(f.intercept), repr(f.residual), f.n_levels,
                        repr(lo) if lo != "" else "", repr(hi) if hi != "" else ""])


def write_loglog_svg(table, path, reference_slopes=(0.5, 1.0, 2.0), width=480, height=360):
    """Log-log plot of every estimator with dashed reference order lines."""
    series = {k: v for k, v in table.estimates.items() if np.all(v > 0)}
    lv = np.log10(np.asarray(table.levels))
    if not series or lv.size < 2:
        raise ValueError("nothing to plot: need positive estimates on at least two levels")
    ys = np.log10(np.concatenate(list(series.values())))
    x0, x1 = lv.min(), lv.max()
    y0, y1 = ys.min() - 0.3, ys.max() + 0.3
    pad = 50

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
             'fill="none" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">log10 {table.axis} level</text>',
             f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" '
             'text-anchor="middle">log10 error</text>']
    anchor = np.log10(next(iter(series.values())))[np.argmax(lv)]
    for s in reference_slopes:
        ya, yb = anchor, anchor - s * (x1 - x0)
        parts.append(f'<line x1="{px(x1):.1f}" y1="{py(ya):.1f}" x2="{px(x0):.1f}" y2="{py(yb):.1f}" '
                     'stroke="gray" stroke-dasharray="4 3"/>')
        parts.append(f'<text x="{px(x0) + 4:.1f}" y="{py(yb) - 4:.1f}" font-size="10" fill="gray">'
                     f'slope {s:g}</text>')
    for c, (name, vals) in enumerate(series.items()):
        col = colours[c % len(colours)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(lv, np.log10(vals)))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{col}"/>')
        for x, y in zip(lv, np.log10(vals)):
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{col}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * (c + 1)}" font-size="11" fill="{col}">{name}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
