"""Sparse assembly of the mass, stiffness, divergence and convection forms,
plus the L2 and Ritz projections.

Operators are ``scipy.sparse.csr_matrix``.  Viscosity is not baked into the
stiffness matrix; callers scale it.
"""
import numpy as np
import scipy.sparse as sp

from . import _kernels
from .spaces import (
    DEFAULT_DEGREE,
    FieldCoefficients,
    SpaceKind,
    build_dof_map,
    element_data,
)


# b(w, u, v) on P2 fields is a degree-5 polynomial per triangle
CONVECTION_DEGREE = 5


class Scatter:
    """Precomputed local-to-global map for one (row space, column space) pair.

    ``assemble`` turns a stack of local matrices into a CSR matrix by a single
    ``bincount`` against the fixed sparsity pattern, so repeated assembly
    (convection matrices inside the nonlinear loop) is cheap and
    deterministic.
    """

    def __init__(self, rows, cols, shape):
        nt, a = rows.shape
        b = cols.shape[1]
        R = np.broadcast_to(rows[:, :, None], (nt, a, b)).ravel()
        C = np.broadcast_to(cols[:, None, :], (nt, a, b)).ravel()
        key = R.astype(np.int64) * shape[1] + C
        uniq, inv = np.unique(key, return_inverse=True)
        self.shape = shape
        self.local_shape = (a, b)
        self.map = inv
        self.indices = (uniq % shape[1]).astype(np.int32)
        r = uniq // shape[1]
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=shape[0]))]).astype(np.int32)
        self.nnz = uniq.size

    def assemble(self, local):
        data = np.bincount(self.map, weights=np.asarray(local).ravel(), minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


def vector_cell_dofs(dofmap):
    """Cell dofs of all components: (nt, ncomp * nl)."""
    return np.concatenate([c * dofmap.component_stride + dofmap.cell_dofs
                           for c in range(dofmap.n_components)], axis=1)


_SCATTERS = {}


def _scatter(row_dm, col_dm, vector_rows=True, vector_cols=True):
    key = (id(row_dm), id(col_dm), vector_rows, vector_cols)
    hit = _SCATTERS.get(key)
    if hit is not None:
        return hit[0]
    rows = vector_cell_dofs(row_dm) if vector_rows else row_dm.cell_dofs
    cols = vector_cell_dofs(col_dm) if vector_cols else col_dm.cell_dofs
    nr = row_dm.n_global if vector_rows else row_dm.n_scalar
    nc = col_dm.n_global if vector_cols else col_dm.n_scalar
    s = Scatter(rows, cols, (nr, nc))
    if len(_SCATTERS) > 64:
        _SCATTERS.clear()
    _SCATTERS[key] = (s, row_dm, col_dm)
    return s


def _scalar_mass(mesh, dofmap):
    deg = dofmap.space.degree
    ed = element_data(mesh, deg, 2 * deg)
    local = np.einsum("tq,qi,qj->tij", ed.dx, ed.phi, ed.phi)
    return _scatter(dofmap, dofmap, False, False).assemble(local)


def _scalar_stiffness(mesh, dofmap):
    deg = dofmap.space.degree
    ed = element_data(mesh, deg, max(1, 2 * deg - 2))
    local = np.einsum("tq,tqid,tqjd->tij", ed.dx, ed.dphi, ed.dphi)
    return _scatter(dofmap, dofmap, False, False).assemble(local)


def _blockdiag(m, ncomp):
    if ncomp == 1:
        return m
    return sp.block_diag([m] * ncomp, format="csr")


def assemble_mass(mesh, dofmap):
    """Mass matrix of the L2 inner product (block diagonal for vectors)."""
    return _blockdiag(_scalar_mass(mesh, dofmap), dofmap.n_components)


def assemble_stiffness(mesh, dofmap):
    """Matrix of (grad u, grad v), without viscosity."""
    return _blockdiag(_scalar_stiffness(mesh, dofmap), dofmap.n_components)


def assemble_divergence(mesh, velocity_dofmap, pressure_dofmap):
    """B with (B u)_i = (div u, q_i); shape (n_pressure, n_velocity)."""
    ev = element_data(mesh, velocity_dofmap.space.degree, 2)
    ep = element_data(mesh, pressure_dofmap.space.degree, 2)
    # local (t, i_p, c, j_v)
    local = np.einsum("tq,qi,tqjc->ticj", ev.dx, ep.phi, ev.dphi)
    nt = local.shape[0]
    local = local.reshape(nt, ep.phi.shape[1], -1)
    s = _scatter(pressure_dofmap, velocity_dofmap, False, True)
    return s.assemble(local)


def _local_coeffs(dofmap, values):
    """(nt, nl, 2) local coefficients of a vector field."""
    stride = dofmap.component_stride
    cd = dofmap.cell_dofs
    return np.stack([values[cd], values[stride + cd]], axis=-1)


def _vals(f):
    return f.values if isinstance(f, FieldCoefficients) else np.asarray(f, dtype=float)


def apply_trilinear(mesh, dofmap, w, u, backend=None, quad_degree=CONVECTION_DEGREE):
    """Vector N(w, u) with N(w, u) . v = b(w, u, v) for every discrete v."""
    ed = element_data(mesh, dofmap.space.degree, quad_degree)
    return _kernels.trilinear_residual_global(ed.phi, ed.dphi, ed.dx, dofmap.cell_dofs,
                                              dofmap.component_stride, _vals(w), _vals(u), backend)


def trilinear_jacobian(mesh, dofmap, w, backend=None, quad_degree=CONVECTION_DEGREE):
    """Sparse (N1, N2) with N1 u = N(w, u) and N2 u = N(u, w).

    N1 + N2 is the derivative of u -> N(u, u) at w.
    """
    ed = element_data(mesh, dofmap.space.degree, quad_degree)
    wl = _local_coeffs(dofmap, _vals(w))
    m1, m2 = _kernels.trilinear_jacobian_local(ed.phi, ed.dphi, ed.dx, wl, backend)
    nt, nl = m1.shape[0], m1.shape[1]
    s = _scatter(dofmap, dofmap, True, True)
    z = np.zeros_like(m1)
    l1 = np.concatenate([np.concatenate([m1, z], 2), np.concatenate([z, m1], 2)], 1)
    l2 = m2.transpose(0, 1, 3, 2, 4).reshape(nt, 2 * nl, 2 * nl)
    return s.assemble(l1), s.assemble(l2)


def load_vector(mesh, dofmap, values_q, quad_degree=DEFAULT_DEGREE):
    """Vector of (f, phi_i) from values of f at quadrature points.

    ``values_q`` is (nt, nq) for scalar spaces and (nt, nq, 2) for vectors.
    """
    ed = element_data(mesh, dofmap.space.degree, quad_degree)
    fq = np.asarray(values_q, dtype=float)
    cd = dofmap.cell_dofs.ravel()
    if dofmap.n_components == 1:
        loc = (fq * ed.dx) @ ed.phi
        return np.bincount(cd, weights=loc.ravel(), minlength=dofmap.n_scalar)
    loc = (fq * ed.dx[..., None]).transpose(0, 2, 1) @ ed.phi
    return np.concatenate([
        np.bincount(cd, weights=loc[:, c].ravel(), minlength=dofmap.n_scalar)
        for c in range(dofmap.n_components)
    ])


def gradient_load_vector(mesh, dofmap, vec_q, quad_degree=DEFAULT_DEGREE):
    """Vector of (F, grad phi_i) for a scalar space, F given at quadrature points (nt, nq, 2)."""
    ed = element_data(mesh, dofmap.space.degree, quad_degree)
    w = np.asarray(vec_q, dtype=float) * ed.dx[..., None]
    nt, nq, nl, _ = ed.dphi.shape
    loc = (ed.dphi_flat @ w.reshape(nt, 2 * nq, 1))[..., 0]
    return np.bincount(dofmap.cell_dofs.ravel(), weights=loc.ravel(), minlength=dofmap.n_scalar)


def _eval_rule(f, x, ncomp):
    vals = f(x[..., 0], x[..., 1])
    if ncomp == 1:
        return np.broadcast_to(np.asarray(vals, dtype=float), x.shape[:-1])
    return np.stack([np.broadcast_to(np.asarray(v, dtype=float), x.shape[:-1]) for v in vals], -1)


def l2_project(mesh, dofmap, f, tol=1e-10, quad_degree=DEFAULT_DEGREE):
    """L2 projection of a pointwise function ``f(x, y)`` (tuple for vectors)."""
    from .linsolve import solve_spd
    ed = element_data(mesh, dofmap.space.degree, quad_degree)
    rhs = load_vector(mesh, dofmap, _eval_rule(f, ed.x, dofmap.n_components), quad_degree)
    M = assemble_mass(mesh, dofmap)
    return FieldCoefficients(dofmap.space, solve_spd(M, rhs, tol))


def ritz_project(mesh, potential_dofmap, grad_f, tol=1e-10, quad_degree=DEFAULT_DEGREE):
    """Zero-mean solution of (grad s, grad chi) = (grad f, grad chi).

    ``grad_f(x, y)`` returns the two components of the gradient of f.
    """
    from .linsolve import PoissonSolver
    ed = element_data(mesh, potential_dofmap.space.degree, quad_degree)
    g = _eval_rule(grad_f, ed.x, 2)
    rhs = gradient_load_vector(mesh, potential_dofmap, g, quad_degree)
    solver = PoissonSolver(mesh, potential_dofmap)
    return FieldCoefficients(potential_dofmap.space, solver.solve(rhs, tol))


def taylor_hood_spaces(mesh):
    """(velocity, pressure, potential) dof maps on one mesh."""
    return (build_dof_map(mesh, SpaceKind.VelocityP2Vector),
            build_dof_map(mesh, SpaceKind.PressureP1ZeroMean),
            build_dof_map(mesh, SpaceKind.PotentialP1Scalar))
