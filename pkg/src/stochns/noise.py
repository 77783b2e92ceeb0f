"""Truncated Q-Wiener noise, the diffusion operator G, and the noise load.

Increments are drawn from a counter-based generator (Philox) keyed by
``(master_seed, path_index)`` with the fine step index in the counter, so any
step of any path can be regenerated independently of scheduling.  Coarser
time levels sum consecutive fine increments, which couples every time
resolution to the same Brownian path.
"""
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from .assembly import load_vector
from .spaces import DEFAULT_DEGREE, element_data, values_at_quadrature


@dataclass(frozen=True)
class NoiseSpec:
    """Spectrum and basis of the truncated noise.

    ``W(t_n) - W(t_{n-1}) = sum_{j,k<=M} sqrt(lambda_jk) g_jk beta^n_jk`` with
    ``g_jk = amplitude * sin(j pi x / L) sin(k pi y / L)`` and
    ``lambda_jk = 1 / (j^2 + k^2)``; ``beta^n_jk`` are N(0, dt) increments.
    """

    M: int = 10
    basis_amplitude: float = 5.0
    period_L: float = 1.0
    vector_valued: bool = False

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"noise truncation M must be >= 1, got {self.M}")

    @property
    def n_components(self):
        return 2 if self.vector_valued else 1

    def lambdas(self):
        j = np.arange(1, self.M + 1)
        return 1.0 / (j[:, None] ** 2 + j[None, :] ** 2)

    def basis_tables(self, x, y):
        """sin(j pi x / L) and sin(k pi y / L), each (..., M)."""
        modes = np.arange(1, self.M + 1) * np.pi / self.period_L
        return np.sin(np.asarray(x)[..., None] * modes), np.sin(np.asarray(y)[..., None] * modes)


def _philox_normals(master_seed, path_index, step, size):
    key = np.array([master_seed & 0xFFFFFFFFFFFFFFFF, path_index & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    counter = np.array([0, 0, step, 0], dtype=np.uint64)
    bg = np.random.Philox(key=key, counter=counter)
    return np.random.Generator(bg).standard_normal(size)


@dataclass(frozen=True)
class WienerPath:
    """One realisation of the noise on the finest time grid.

    ``increments[n]`` holds the standard normals xi^n_jk of fine step ``n``
    (shape (M, M), or (2, M, M) for vector-valued noise).
    """

    master_seed: int
    n_steps: int
    dt_fine: float
    M: int = 10
    path_index: int = 0
    n_components: int = 1

    def __post_init__(self):
        if self.n_steps < 1 or not self.dt_fine > 0:
            raise ValueError("WienerPath needs n_steps >= 1 and dt_fine > 0")

    @classmethod
    def for_spec(cls, spec, master_seed, n_steps, T, path_index=0):
        return cls(int(master_seed), int(n_steps), T / n_steps, spec.M, int(path_index),
                   spec.n_components)

    @cached_property
    def increments(self):
        shape = (self.M, self.M) if self.n_components == 1 else (self.n_components, self.M, self.M)
        out = np.empty((self.n_steps,) + shape)
        for n in range(self.n_steps):
            out[n] = _philox_normals(self.master_seed, self.path_index, n, shape)
        out.flags.writeable = False
        return out

    def brownian_increments(self, level=1):
        """sqrt(dt) * xi summed over blocks of ``level`` fine steps.

        Sums are accumulated left to right so coarse increments are exactly
        the floating-point sums of the fine ones.
        """
        level = int(level)
        if level < 1 or self.n_steps % level:
            raise ValueError(f"coarsening level {level} does not divide n_steps={self.n_steps}")
        fine = np.sqrt(self.dt_fine) * self.increments
        if level == 1:
            return fine
        blocks = fine.reshape((self.n_steps // level, level) + fine.shape[1:])
        out = blocks[:, 0].copy()
        for i in range(1, level):
            out += blocks[:, i]
        return out

    def n_steps_at(self, level):
        if self.n_steps % level:
            raise ValueError(f"coarsening level {level} does not divide n_steps={self.n_steps}")
        return self.n_steps // level


@dataclass(frozen=True)
class IncrementField:
    """Pointwise evaluator of one increment Delta W_n.

    ``coefficients[j, k] = sqrt(lambda_jk) * beta_jk`` (leading component axis
    for vector-valued noise).
    """

    spec: NoiseSpec
    coefficients: np.ndarray

    def __call__(self, x, y):
        sx, sy = self.spec.basis_tables(x, y)
        return self.from_tables(sx, sy)

    def from_tables(self, sx, sy):
        a = self.spec.basis_amplitude
        if self.coefficients.ndim == 2:
            return a * np.sum((sx @ self.coefficients) * sy, axis=-1)
        return a * np.stack([np.sum((sx @ c) * sy, axis=-1) for c in self.coefficients], -1)


def increment_coefficients(path, spec, level=1):
    """All increment coefficient arrays sqrt(lambda) * beta at a time level."""
    return np.sqrt(spec.lambdas()) * path.brownian_increments(level)


def increment_field(path, spec, step, level=1):
    """Delta W over coarse step ``step`` (0-based) of the level-``level`` grid."""
    n = path.n_steps_at(level)
    if not 0 <= step < n:
        raise IndexError(f"step {step} outside 0..{n - 1} at level {level}")
    fine = np.sqrt(path.dt_fine) * path.increments[step * level:(step + 1) * level]
    beta = fine[0].copy()
    for i in range(1, level):
        beta += fine[i]
    return IncrementField(spec, np.sqrt(spec.lambdas()) * beta)


@dataclass(frozen=True)
class DiffusionOperator:
    """Pointwise diffusion coefficient u -> G(u) with a Lipschitz bound."""

    rule: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    name: str = "custom"

    def __call__(self, u):
        return self.rule(np.asarray(u, dtype=float))


def _sqrt_rule(u):
    return np.sqrt(u * u + 1.0)


def sqrt_diffusion():
    """G(u) = (sqrt(u1^2 + 1), sqrt(u2^2 + 1)), 1-Lipschitz componentwise."""
    return DiffusionOperator(_sqrt_rule, 1.0, "sqrt")


def constant_diffusion(value=(1.0, 1.0)):
    c = np.asarray(value, dtype=float)
    return DiffusionOperator(lambda u: np.broadcast_to(c, u.shape).copy(), 0.0, "constant")


def zero_diffusion():
    return DiffusionOperator(lambda u: np.zeros_like(u), 0.0, "zero")


DIFFUSIONS = {"sqrt": sqrt_diffusion, "constant": constant_diffusion, "zero": zero_diffusion}


def apply_G(diffusion, u_value):
    return diffusion(u_value)


class NoiseQuadrature:
    """Noise basis tables at the quadrature points of one mesh (cached)."""

    _cache = {}

    def __new__(cls, mesh, spec, quad_degree=DEFAULT_DEGREE):
        key = (id(mesh), spec, quad_degree)
        hit = cls._cache.get(key)
        if hit is not None and hit.mesh is mesh:
            return hit
        self = super().__new__(cls)
        ed = element_data(mesh, 1, quad_degree)
        self.mesh = mesh
        self.sx, self.sy = spec.basis_tables(ed.x[..., 0], ed.x[..., 1])
        if len(cls._cache) > 32:
            cls._cache.clear()
        cls._cache[key] = self
        return self

    def __init__(self, mesh, spec, quad_degree=DEFAULT_DEGREE):
        pass

    def increment(self, dW):
        """Delta W at quadrature points, (nt, nq) or (nt, nq, 2)."""
        return dW.from_tables(self.sx, self.sy)


def noise_field_at_quadrature(mesh, velocity_dofmap, diffusion, u_prev, dW, quad_degree=DEFAULT_DEGREE):
    """G(u_prev) * Delta W at quadrature points, shape (nt, nq, 2)."""
    uq = values_at_quadrature(velocity_dofmap, u_prev, quad_degree)
    g = diffusion(uq)
    if isinstance(dW, IncrementField):
        w = NoiseQuadrature(mesh, dW.spec, quad_degree).increment(dW)
    else:
        ed = element_data(mesh, 1, quad_degree)
        w = np.asarray(dW(ed.x[..., 0], ed.x[..., 1]), dtype=float)
    if w.ndim == g.ndim - 1:
        w = w[..., None]
    return g * w


def noise_load_vector(mesh, velocity_dofmap, diffusion, u_prev, dW, quad_degree=DEFAULT_DEGREE):
    """Load vector (G(u_prev) Delta W, v) over all velocity basis functions."""
    f = noise_field_at_quadrature(mesh, velocity_dofmap, diffusion, u_prev, dW, quad_degree)
    return load_vector(mesh, velocity_dofmap, f, quad_degree)
