"""Discrete Helmholtz splitting of the noise field (Step I of the scheme).

Given the realised noise field F = G(u_prev) * Delta W, find the zero-mean
P1 potential xi_h with

    (grad xi_h, grad phi) = (F, grad phi)   for all P1 phi,

and expose eta = F - grad xi_h as a quadrature-point evaluator.  eta is never
projected into a discrete space, which keeps (eta, grad phi) = 0 exact up to
the Poisson solve.
"""
from dataclasses import dataclass

import numpy as np

from .assembly import gradient_load_vector
from .linsolve import PoissonSolver
from .noise import noise_field_at_quadrature
from .spaces import (
    DEFAULT_DEGREE,
    FieldCoefficients,
    SpaceKind,
    build_dof_map,
    element_data,
    gradients_at_quadrature,
)


@dataclass
class HelmholtzSplit:
    xi: FieldCoefficients
    field_q: np.ndarray  # F at quadrature points (nt, nq, 2)
    grad_xi_q: np.ndarray  # grad xi_h at quadrature points
    load: np.ndarray  # (F, grad phi_i)
    potential_dofmap: object

    @property
    def eta_q(self):
        """eta = F - grad xi_h at quadrature points."""
        return self.field_q - self.grad_xi_q

    def orthogonality_residual(self):
        """Discrete dual norm of phi -> (eta, grad phi), relative to 1 + ||F||."""
        solver = PoissonSolver(self.potential_dofmap.mesh, self.potential_dofmap)
        r = self.load - solver.stiffness @ self.xi.values
        r = r - r.mean()
        z = solver.solve(r, tol=1e-12) if np.any(r) else np.zeros_like(r)
        dual = float(np.sqrt(max(r @ z, 0.0)))
        return dual / (1.0 + self.field_norm())

    def field_norm(self):
        ed = element_data(self.potential_dofmap.mesh, 1, self._qdeg)
        return float(np.sqrt(np.sum(np.sum(self.field_q**2, -1) * ed.dx)))

    def grad_xi_norm(self):
        ed = element_data(self.potential_dofmap.mesh, 1, self._qdeg)
        return float(np.sqrt(np.sum(np.sum(self.grad_xi_q**2, -1) * ed.dx)))

    def eta_norm(self):
        ed = element_data(self.potential_dofmap.mesh, 1, self._qdeg)
        return float(np.sqrt(np.sum(np.sum(self.eta_q**2, -1) * ed.dx)))

    _qdeg = DEFAULT_DEGREE


def split_field(mesh, potential_dofmap, field_q, tol=1e-10, quad_degree=DEFAULT_DEGREE):
    """Helmholtz split of a vector field given at quadrature points."""
    field_q = np.asarray(field_q, dtype=float)
    b = gradient_load_vector(mesh, potential_dofmap, field_q, quad_degree)
    solver = PoissonSolver(mesh, potential_dofmap)
    xi = solver.solve(b, tol) if np.any(b) else np.zeros(potential_dofmap.n_scalar)
    xi_f = FieldCoefficients(potential_dofmap.space, xi)
    grad = gradients_at_quadrature(potential_dofmap, xi_f, quad_degree)
    split = HelmholtzSplit(xi_f, field_q, grad, b, potential_dofmap)
    split._qdeg = quad_degree
    return split


def helmholtz_step(mesh, potential_dofmap, diffusion, u_prev, tol=1e-10, increment=None,
                   velocity_dofmap=None, quad_degree=DEFAULT_DEGREE):
    """Split G(u_prev) (times the increment Delta W when given).

    With ``increment`` the potential includes the realised noise, so the
    Step III pressure correction is simply xi_h / k.
    """
    if velocity_dofmap is None:
        velocity_dofmap = build_dof_map(mesh, SpaceKind.VelocityP2Vector)
    if increment is None:
        ones = lambda x, y: np.ones_like(x)  # noqa: E731
        field_q = noise_field_at_quadrature(mesh, velocity_dofmap, diffusion, u_prev, ones, quad_degree)
    else:
        field_q = noise_field_at_quadrature(mesh, velocity_dofmap, diffusion, u_prev, increment, quad_degree)
    return split_field(mesh, potential_dofmap, field_q, tol, quad_degree)
