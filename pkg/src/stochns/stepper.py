"""Time stepping: Helmholtz split, implicit Taylor-Hood step, pressure update.

Per step n (k = T / N):

* Step I   split F = G(u^{n-1}) Delta W_n into grad xi_h + eta;
* Step II  solve for (u^n, r^n)
               (u^n, v) + k nu (grad u^n, grad v) + k b(u^n, u^n, v) - k (div v, r^n)
                   = (u^{n-1}, v) + (eta, v) + k (f, v)
               (div u^n, q) = 0;
* Step III p^n = r^n + xi_h / k.

The potential xi_h is computed for the realised increment field, so Step III
needs no further product with Delta W.
"""
from dataclasses import dataclass, field, replace
import logging
import math
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (
    apply_trilinear,
    assemble_divergence,
    assemble_mass,
    assemble_stiffness,
    load_vector,
    taylor_hood_spaces,
    trilinear_jacobian,
)
from .helmholtz import split_field
from .linsolve import LinearSolveError, PeriodicBlockSolver, PoissonSolver
from .mesh import build_periodic_uniform_mesh
from .noise import (
    DiffusionOperator,
    NoiseSpec,
    increment_field,
    noise_field_at_quadrature,
    sqrt_diffusion,
)
from .spaces import DEFAULT_DEGREE, FieldCoefficients, SpaceKind, element_data, values_at_quadrature

log = logging.getLogger(__name__)

NONLINEAR_SOLVERS = ("picard", "newton", "fixed_point")


class PicardError(RuntimeError):
    """Nonlinear iteration did not reach its tolerance."""

    def __init__(self, message, residual=None, step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step


@dataclass(frozen=True)
class SchemeConfig:
    nu: float = 1.0
    T: float = 1.0
    n_steps: int = 16
    n_side: int = 8
    period_L: float = 1.0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    diffusion: DiffusionOperator = field(default_factory=sqrt_diffusion)
    body_force: tuple = (0.0, 0.0)
    picard_tol: float = 1e-10
    picard_max: int = 50
    linear_tol: float = 1e-10
    nonlinear_solver: str = "fixed_point"
    forcing: Optional[Callable] = None  # f(x, y) -> (f1, f2), time independent
    quad_degree: int = DEFAULT_DEGREE
    observe_stride: int = 1
    check_invariants: bool = False

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        for name in ("picard_tol", "linear_tol"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.nonlinear_solver not in NONLINEAR_SOLVERS:
            raise ValueError(f"nonlinear_solver must be one of {NONLINEAR_SOLVERS}")

    @property
    def k(self):
        return self.T / self.n_steps

    def with_(self, **kw):
        return replace(self, **kw)


class Discretization:
    """Mesh, spaces and the operators shared by every path at one (h, k).

    The Stokes part of the Step II operator is translation invariant on the
    uniform periodic mesh and is inverted exactly with the FFT block solver;
    the P1 Poisson factorization of Step I is shared the same way.
    """

    _cache = {}

    def __new__(cls, n_side, period_L, nu, k):
        key = (int(n_side), float(period_L), float(nu), float(k))
        hit = cls._cache.get(key)
        if hit is not None:
            return hit
        self = super().__new__(cls)
        self._build(*key)
        if len(cls._cache) > 24:
            cls._cache.clear()
        cls._cache[key] = self
        return self

    def __init__(self, n_side, period_L, nu, k):
        pass

    def _build(self, n_side, period_L, nu, k):
        self.n_side, self.period_L, self.nu, self.k = n_side, period_L, nu, k
        self.mesh = build_periodic_uniform_mesh(n_side, period_L)
        self.V, self.P, self.S = taylor_hood_spaces(self.mesh)
        self.M = assemble_mass(self.mesh, self.V)
        self.K = assemble_stiffness(self.mesh, self.V)
        self.B = assemble_divergence(self.mesh, self.V, self.P)
        self.pressure_mass = assemble_mass(self.mesh, self.P)
        self.pressure_weights = np.asarray(self.pressure_mass.sum(axis=0)).ravel()
        self.A0 = (self.M + (k * nu) * self.K).tocsr()
        self.kB = (-k * self.B).tocsr()
        self.stokes = sp.bmat([[self.A0, self.kB.T], [self.kB, None]], format="csr")
        self.stokes_solver = PeriodicBlockSolver(self.stokes, n_side, null_types=(8,))
        self.mass_solver = PeriodicBlockSolver(self.M, n_side)
        self.poisson = PoissonSolver(self.mesh, self.S)
        self.nu_ = self.V.n_global
        self.np_ = self.P.n_global

    def split(self, x):
        return x[:self.nu_], x[self.nu_:]

    def l2_sq(self, u):
        return float(u @ (self.M @ u))

    def h1_sq(self, u):
        return float(u @ (self.K @ u))

    def laplacian_l2_sq(self, u):
        """||Delta_h u||^2 with Delta_h the discrete (vector) Laplacian."""
        z = self.mass_solver.solve(self.K @ u)
        return float(z @ (self.M @ z))


def discretization(config):
    return Discretization(config.n_side, config.period_L, config.nu, config.k)


@dataclass
class StepState:
    n: int
    u: FieldCoefficients
    r: FieldCoefficients
    p: FieldCoefficients
    pressure_time_integral_r: FieldCoefficients
    pressure_time_integral_p: FieldCoefficients
    picard_iterations: int = 0
    diagnostics: dict = field(default_factory=dict)


def _zero(space, n):
    return FieldCoefficients(space, np.zeros(n))


def initial_state(config, u0_rule=None):
    """L2 projection of ``u0_rule(x, y) -> (u1, u2)`` (zero if None)."""
    d = discretization(config)
    if u0_rule is None:
        u = np.zeros(d.nu_)
    else:
        ed = element_data(d.mesh, 2, config.quad_degree)
        vals = u0_rule(ed.x[..., 0], ed.x[..., 1])
        fq = np.stack([np.broadcast_to(np.asarray(v, dtype=float), ed.x.shape[:-1]) for v in vals], -1)
        rhs = load_vector(d.mesh, d.V, fq, config.quad_degree)
        u = d.mass_solver.solve(rhs)
        res = np.linalg.norm(d.M @ u - rhs)
        if res > config.linear_tol * max(np.linalg.norm(rhs), 1e-300):
            raise LinearSolveError(f"initial projection residual {res:.2e}")
    return StepState(0, FieldCoefficients(SpaceKind.VelocityP2Vector, u),
                     _zero(SpaceKind.PressureP1ZeroMean, d.np_), _zero(SpaceKind.PressureP1ZeroMean, d.np_),
                     _zero(SpaceKind.PressureP1ZeroMean, d.np_), _zero(SpaceKind.PressureP1ZeroMean, d.np_))


def _force_load(config, d):
    key = (id(d), config.body_force, config.forcing, config.quad_degree)
    cache = _force_load.__dict__.setdefault("cache", {})
    hit = cache.get(key)
    if hit is not None:
        return hit
    ed = element_data(d.mesh, 2, config.quad_degree)
    fq = np.zeros(ed.x.shape)
    fq += np.asarray(config.body_force, dtype=float)
    if config.forcing is not None:
        vals = config.forcing(ed.x[..., 0], ed.x[..., 1])
        fq += np.stack([np.broadcast_to(np.asarray(v, dtype=float), ed.x.shape[:-1]) for v in vals], -1)
    out = None if not np.any(fq) else load_vector(d.mesh, d.V, fq, config.quad_degree)
    if len(cache) > 32:
        cache.clear()
    cache[key] = out
    return out


def nonlinear_residual(d, u, r, rhs):
    """Residual of the Step II equations at (u, r): (momentum, continuity)."""
    k = d.k
    mom = d.A0 @ u + k * apply_trilinear(d.mesh, d.V, u, u) + d.kB.T @ r - rhs
    return mom, d.kB @ u


def _rel(res_mom, res_div, scale):
    return math.sqrt(res_mom @ res_mom + res_div @ res_div) / scale


class _Anderson:
    """Anderson mixing with a ring buffer of differences and their Gram matrix."""

    def __init__(self, n, depth):
        self.depth = depth
        self.dF = np.empty((depth, n))
        self.dG = np.empty((depth, n))
        self.gram = np.zeros((depth, depth))
        self.count = 0
        self.prev = None

    def mix(self, x, g):
        f = g - x
        if self.prev is not None:
            slot = self.count % self.depth
            self.dF[slot] = f - self.prev[0]
            self.dG[slot] = g - self.prev[1]
            m = min(self.count + 1, self.depth)
            row = self.dF[:m] @ self.dF[slot]
            self.gram[slot, :m] = row
            self.gram[:m, slot] = row
            self.count += 1
        self.prev = (f, g)
        m = min(self.count, self.depth)
        if m == 0:
            return g
        gram = self.gram[:m, :m]
        scale = np.sqrt(np.diag(gram))
        scale[scale == 0.0] = 1.0
        rhs = (self.dF[:m] @ f) / scale
        gamma = np.linalg.lstsq(gram / np.outer(scale, scale), rhs, rcond=1e-13)[0] / scale
        return g - gamma @ self.dG[:m]


def _solve_fixed_point(d, rhs, u0, config, scale, depth=20):
    """Convection-lagged iteration with Anderson mixing on the pair (u, r).

    Each sweep evaluates the convection once: the same vector gives the true
    Step II residual of the current iterate and the next Stokes solve.
    Mixing velocity and pressure together keeps the pair consistent.
    """
    k = d.k
    nu_ = d.nu_
    x = np.concatenate([u0, np.zeros(d.np_)])
    b = np.concatenate([rhs, np.zeros(d.np_)])
    acc = _Anderson(x.size, depth)
    rel = math.inf
    for it in range(config.picard_max + 1):
        conv = k * apply_trilinear(d.mesh, d.V, x[:nu_], x[:nu_])
        res = d.stokes @ x - b
        res[:nu_] += conv
        rel = math.sqrt(res @ res) / scale
        if rel <= config.picard_tol or it == config.picard_max:
            break
        rhs_it = b.copy()
        rhs_it[:nu_] -= conv
        x = acc.mix(x, d.stokes_solver.solve(rhs_it))
    u, r = d.split(x)
    return u, r, it, rel


def _krylov_solve(d, matrix, b, x0, tol, strict=True):
    """GMRES on the full saddle system, preconditioned by the exact Stokes solve."""
    n = matrix.shape[0]
    pre = spla.LinearOperator((n, n), matvec=d.stokes_solver.solve)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros(n)
    x, info = spla.gmres(matrix, b, x0=x0, rtol=tol, atol=0.0, restart=60, maxiter=20, M=pre)
    res = np.linalg.norm(b - matrix @ x)
    if strict and info != 0 and res > tol * nb:
        raise LinearSolveError(f"gmres failed: relative residual {res / nb:.2e}", residual=res / nb)
    return x


def _solve_linearized(d, rhs, u0, config, scale, newton, r0=None):
    k = d.k
    u = u0.copy()
    r = np.zeros(d.np_) if r0 is None else r0.copy()
    zero_p = sp.csr_matrix((d.np_, d.np_))
    mom, div = nonlinear_residual(d, u, r, rhs)
    rel = _rel(mom, div, scale)
    it = 0
    # GMRES cannot certify residuals much below round-off
    lin_tol = max(min(config.linear_tol, 0.1 * config.picard_tol), 1e-14)
    while rel > config.picard_tol and it < config.picard_max:
        it += 1
        N1, N2 = trilinear_jacobian(d.mesh, d.V, u)
        if newton:
            A = d.A0 + k * (N1 + N2)
            mat = sp.bmat([[A, d.kB.T], [d.kB, zero_p]], format="csr")
            # inexact Newton: the outer residual test controls the accuracy
            dx = _krylov_solve(d, mat, -np.concatenate([mom, div]), None, 1e-8, strict=False)
            du, dr = d.split(dx)
            u, r = u + du, r + dr
        else:
            A = d.A0 + k * N1
            mat = sp.bmat([[A, d.kB.T], [d.kB, zero_p]], format="csr")
            x = _krylov_solve(d, mat, np.concatenate([rhs, np.zeros(d.np_)]),
                              np.concatenate([u, r]), lin_tol)
            u, r = d.split(x)
        mom, div = nonlinear_residual(d, u, r, rhs)
        rel = _rel(mom, div, scale)
    return u, r, it, rel


def solve_step_two(d, rhs, u_guess, config):
    """Nonlinear Step II solve; returns (u, r, iterations, relative residual)."""
    scale = max(np.linalg.norm(rhs), 1e-300)
    if not np.any(rhs):
        return np.zeros(d.nu_), np.zeros(d.np_), 0, 0.0
    if config.nonlinear_solver == "fixed_point":
        u, r, it, rel = _solve_fixed_point(d, rhs, u_guess, config, scale)
        if not rel <= config.picard_tol:
            # rare stiff steps: finish with Newton from the best available iterate
            log.info("fixed-point stalled at %.2e after %d sweeps; switching to Newton", rel, it)
            u, r, it2, rel = _solve_linearized(d, rhs, u, config, scale, True, r0=r)
            it += it2
    else:
        u, r, it, rel = _solve_linearized(d, rhs, u_guess, config, scale,
                                          config.nonlinear_solver == "newton")
    # pressure representative with zero mean
    r = r - (d.pressure_weights @ r) / d.pressure_weights.sum()
    return u, r, it, rel


def advance(state, path, config, level=None):
    """One step of the scheme driven by ``path`` at coarsening ``level``.

    ``level`` defaults to path.n_steps // config.n_steps.
    """
    d = discretization(config)
    if level is None:
        if path.n_steps % config.n_steps:
            raise ValueError(f"path with {path.n_steps} steps cannot drive {config.n_steps} steps")
        level = path.n_steps // config.n_steps
    k = config.k
    u_prev = state.u.values
    dW = increment_field(path, config.noise, state.n, level)

    # Step I
    field_q = noise_field_at_quadrature(d.mesh, d.V, config.diffusion, u_prev, dW, config.quad_degree)
    split = split_field(d.mesh, d.S, field_q, config.linear_tol, config.quad_degree)

    # Step II
    eta_load = load_vector(d.mesh, d.V, split.eta_q, config.quad_degree)
    rhs = d.M @ u_prev + eta_load
    fl = _force_load(config, d)
    if fl is not None:
        rhs = rhs + k * fl
    u, r, iters, rel = solve_step_two(d, rhs, u_prev, config)
    if not rel <= config.picard_tol:
        raise PicardError(f"step {state.n + 1}: nonlinear residual {rel:.2e} after {iters} iterations",
                          residual=rel, step=state.n + 1)

    # Step III
    p = r + split.xi.values / k
    new = StepState(
        state.n + 1,
        FieldCoefficients(SpaceKind.VelocityP2Vector, u),
        FieldCoefficients(SpaceKind.PressureP1ZeroMean, r),
        FieldCoefficients(SpaceKind.PressureP1ZeroMean, p),
        FieldCoefficients(SpaceKind.PressureP1ZeroMean, state.pressure_time_integral_r.values + k * r),
        FieldCoefficients(SpaceKind.PressureP1ZeroMean, state.pressure_time_integral_p.values + k * p),
        iters,
    )
    if config.check_invariants:
        new.diagnostics = step_invariants(d, config, u_prev, new, split, rhs)
    return new


def step_invariants(d, config, u_prev, state, split, rhs=None):
    """Structural residuals of one completed step.

    The energy identity is evaluated with quadrature norms and a direct
    quadrature of (eta, u^n), independent of the assembled matrices.
    """
    from .spaces import compute_norm
    k, nu = config.k, config.nu
    u = state.u.values
    l2_new = compute_norm(d.mesh, d.V, u, "L2") ** 2
    l2_old = compute_norm(d.mesh, d.V, u_prev, "L2") ** 2
    l2_diff = compute_norm(d.mesh, d.V, u - u_prev, "L2") ** 2
    h1_new = compute_norm(d.mesh, d.V, u, "H1") ** 2
    ed = element_data(d.mesh, 2, config.quad_degree)
    uq = values_at_quadrature(d.V, u, config.quad_degree)
    forcing = float(np.sum(np.sum(split.eta_q * uq, -1) * ed.dx))
    fl = _force_load(config, d)
    if fl is not None:
        forcing += k * float(fl @ u)
    energy = 0.5 * (l2_new - l2_old + l2_diff) + k * nu * h1_new - forcing
    scale = 0.5 * (l2_new + l2_old + l2_diff) + k * nu * h1_new + abs(forcing)
    r = state.r.values
    return {
        "energy_residual": abs(energy) / scale if scale > 0 else 0.0,
        "divergence_residual": float(np.max(np.abs(d.B @ u))) if u.size else 0.0,
        "pressure_mean_r": abs(float(d.pressure_weights @ r)),
        "pressure_mean_p": abs(float(d.pressure_weights @ state.p.values)),
        "helmholtz_residual": split.orthogonality_residual(),
        "helmholtz_stability": split.grad_xi_norm() - split.field_norm(),
    }


@dataclass
class PathSummary:
    """Outcome of one simulated path."""

    final: StepState
    l2_history: np.ndarray  # ||u^n||_{L2}, n = 1..N
    h1_history: np.ndarray  # ||grad u^n||_{L2}
    lap_history: np.ndarray  # ||Delta_h u^n||_{L2}
    picard_iterations: np.ndarray
    invariants: list = field(default_factory=list)
    trajectory: Optional[np.ndarray] = None  # (N + 1, n_velocity) when stored

    @property
    def max_l2_sq(self):
        return float(np.max(self.l2_history**2)) if self.l2_history.size else 0.0

    @property
    def max_h1_sq(self):
        return float(np.max(self.h1_history**2)) if self.h1_history.size else 0.0

    @property
    def max_lap_sq(self):
        return float(np.max(self.lap_history**2)) if self.lap_history.size else 0.0

    @property
    def pressure_time_integral_r(self):
        return self.final.pressure_time_integral_r

    @property
    def pressure_time_integral_p(self):
        return self.final.pressure_time_integral_p


def run_path(config, path, observers=(), u0_rule=None, store_trajectory=False):
    """Run all N steps; returns a PathSummary.

    ``observers`` are callables ``obs(state)`` invoked every
    ``config.observe_stride`` steps.  Step failures are re-raised with the
    step index attached.
    """
    d = discretization(config)
    state = initial_state(config, u0_rule)
    N = config.n_steps
    l2 = np.empty(N)
    h1 = np.empty(N)
    lap = np.empty(N)
    iters = np.empty(N, dtype=int)
    invariants = []
    traj = np.empty((N + 1, d.nu_)) if store_trajectory else None
    if traj is not None:
        traj[0] = state.u.values
    for n in range(N):
        try:
            state = advance(state, path, config)
        except (PicardError, LinearSolveError) as exc:
            if getattr(exc, "step", None) is None:
                exc.step = n + 1
            raise
        u = state.u.values
        l2[n] = math.sqrt(max(d.l2_sq(u), 0.0))
        h1[n] = math.sqrt(max(d.h1_sq(u), 0.0))
        lap[n] = math.sqrt(max(d.laplacian_l2_sq(u), 0.0))
        iters[n] = state.picard_iterations
        if traj is not None:
            traj[n + 1] = u
        if config.check_invariants:
            invariants.append(state.diagnostics)
        if observers and (n + 1) % config.observe_stride == 0:
            for obs in observers:
                obs(state)
    return PathSummary(state, l2, h1, lap, iters, invariants, traj)


def indicator_diagnostics(summaries, epsilon, kappa0=1.0, kappa=1.0, h=None, k=None):
    """Fraction of paths inside each sample set.

    Discrete trajectory norms stand in for the continuous ones: max ||grad u||^4,
    max ||u||^2 and the discrete Laplacian norm.  The kappa sets need
    reference-difference maxima (``max_err_l2_sq`` / ``max_err_h1_sq``
    attributes, set by the coupled diagnostics run); paths lacking them are
    excluded from those two fractions.
    """
    if h is None or k is None:
        raise ValueError("indicator_diagnostics needs the mesh size h and time step k")
    eps = float(epsilon)
    out = {}
    n = len(summaries)
    if n == 0:
        return out
    h1_4 = np.array([s.max_h1_sq ** 2 for s in summaries])
    l2_2 = np.array([s.max_l2_sq for s in summaries])
    lap_4 = np.array([s.max_lap_sq ** 2 for s in summaries])

    def frac(mask):
        return float(np.mean(mask))

    big = math.isinf(eps)
    out["Omega_k"] = 1.0 if big else frac(h1_4 <= -eps * math.log(k))
    out["Omega_h"] = 1.0 if big else frac(h1_4 + l2_2 <= -eps * math.log(h * h + k))
    out["Omega_hh"] = 1.0 if big else frac(lap_4 + h1_4 <= (h * h + k) ** (-eps))
    out["Omega_kh"] = 1.0 if big else frac(lap_4 + h1_4 <= -eps * math.log(h**4 + k))
    err_l2 = [getattr(s, "max_err_l2_sq", None) for s in summaries]
    err_h1 = [getattr(s, "max_err_h1_sq", None) for s in summaries]
    if all(e is not None for e in err_l2):
        e = np.array(err_l2)
        thr = kappa0 * (h ** (2 - 2 * eps) + k ** (1 - 2 * eps)) if not big else math.inf
        out["Omega_kappa0"] = frac(e <= thr)
    if all(e is not None for e in err_h1):
        e = np.array(err_h1)
        thr = kappa * (h ** (2 - 4 * eps) + k ** (1 - 2 * eps)) if not big else math.inf
        out["Omega_kappa"] = frac(e <= thr)
    return out
