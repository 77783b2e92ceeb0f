"""Sparse direct solvers for the mass, Poisson and saddle-point systems."""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import assemble_mass, assemble_stiffness


class LinearSolveError(RuntimeError):
    """Raised when a solve fails or misses its residual tolerance."""

    def __init__(self, message, residual=None, block=None):
        super().__init__(message)
        self.residual = residual
        self.block = block


class Factorization:
    """LU factors of a square sparse matrix with residual-checked solves."""

    def __init__(self, matrix, name="matrix"):
        self.matrix = sp.csc_matrix(matrix)
        self.name = name
        try:
            self.lu = spla.splu(self.matrix, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise LinearSolveError(f"{name}: factorization failed ({exc})", block=name) from exc

    def solve(self, rhs, tol=1e-10, refine=2):
        rhs = np.asarray(rhs, dtype=float)
        x = self.lu.solve(rhs)
        nb = np.linalg.norm(rhs)
        if nb == 0.0:
            return np.zeros_like(rhs)
        res = np.linalg.norm(rhs - self.matrix @ x)
        for _ in range(refine):
            if res <= tol * nb:
                break
            x = x + self.lu.solve(rhs - self.matrix @ x)
            res = np.linalg.norm(rhs - self.matrix @ x)
        if not np.isfinite(res) or res > tol * nb:
            raise LinearSolveError(
                f"{self.name}: relative residual {res / nb:.3e} exceeds {tol:.1e}",
                residual=res / nb, block=self.name)
        return x


def factorize(matrix, name="matrix"):
    return Factorization(matrix, name)


def solve_spd(op, rhs, tol=1e-10):
    """Solve a symmetric positive definite system to relative residual ``tol``."""
    return Factorization(op, "spd").solve(rhs, tol)


class PoissonSolver:
    """Zero-mean Poisson solves on a scalar P1 space.

    The pure-Neumann (periodic) stiffness matrix is bordered by one
    mean-value multiplier row/column; the factorization is cached per
    dof map and shared by every caller.
    """

    _cache = {}

    def __new__(cls, mesh, dofmap):
        key = id(dofmap)
        hit = cls._cache.get(key)
        if hit is not None and hit.dofmap is dofmap:
            return hit
        self = super().__new__(cls)
        K = assemble_stiffness(mesh, dofmap)
        m = np.asarray(assemble_mass(mesh, dofmap).sum(axis=0)).ravel()
        n = K.shape[0]
        aug = sp.bmat([[K, sp.csr_matrix(m[:, None])], [sp.csr_matrix(m[None, :]), None]], format="csc")
        self.mesh = mesh
        self.dofmap = dofmap
        self.stiffness = K
        self.mean_weights = m
        self.n = n
        self.factor = Factorization(aug, "poisson")
        if len(cls._cache) > 32:
            cls._cache.clear()
        cls._cache[key] = self
        return self

    def __init__(self, mesh, dofmap):
        pass

    def solve(self, rhs, tol=1e-10):
        # Neumann compatibility: drop the constant component of the load
        rhs = np.asarray(rhs, dtype=float)
        b = np.concatenate([rhs - rhs.mean(), [0.0]])
        x = self.factor.solve(b, tol)
        return x[:self.n]


@dataclass
class SaddleSystem:
    """Block system

        [A  B^T  0] [u]   [f]
        [B  0    m] [r] = [g]
        [0  m^T  0] [l]   [0]

    with ``m`` the integrals of the pressure basis, so that the pressure has
    zero mean.  Step II passes B_block = -k * divergence.
    """

    A_block: sp.spmatrix
    B_block: sp.spmatrix
    mean_row: np.ndarray
    rhs: np.ndarray  # stacked (f, g), length n_u + n_p

    @property
    def n_velocity(self):
        return self.A_block.shape[0]

    @property
    def n_pressure(self):
        return self.B_block.shape[0]

    def matrix(self):
        m = sp.csr_matrix(self.mean_row[:, None])
        return sp.bmat([[self.A_block, self.B_block.T, None],
                        [self.B_block, None, m],
                        [None, m.T, None]], format="csc")


class SaddleFactorization:
    """Reusable factorization of a SaddleSystem matrix."""

    def __init__(self, sys):
        nu, npr = sys.n_velocity, sys.n_pressure
        if sys.A_block.shape != (nu, nu):
            raise LinearSolveError("A_block is not square", block="A_block")
        if sys.B_block.shape[1] != nu or sys.mean_row.shape != (npr,):
            raise LinearSolveError("B_block / mean_row dimensions inconsistent", block="B_block")
        self.n_velocity, self.n_pressure = nu, npr
        try:
            self.factor = Factorization(sys.matrix(), "saddle")
        except LinearSolveError as exc:
            diag = sys.A_block.diagonal()
            block = "A_block" if np.any(diag == 0) else "B_block"
            raise LinearSolveError(f"singular saddle system (check {block}): {exc}", block=block) from exc

    def solve(self, rhs, tol=1e-10):
        b = np.concatenate([np.asarray(rhs, dtype=float), [0.0]])
        x = self.factor.solve(b, tol)
        nu = self.n_velocity
        return x[:nu], x[nu:nu + self.n_pressure]


def solve_saddle(sys, tol=1e-10):
    """Solve a SaddleSystem; returns (velocity, pressure) coefficients."""
    return SaddleFactorization(sys).solve(sys.rhs, tol)


class PeriodicBlockSolver:
    """Exact solver for translation-invariant systems on a periodic mesh.

    On the uniform periodic mesh every dof belongs to one of a few "types"
    (vertex / horizontal edge / vertical edge / diagonal edge per velocity
    component, vertex per pressure), each forming an n x n lattice.  A
    translation-invariant operator is then block circulant and the 2D FFT
    reduces it to one small dense block per wavenumber.

    ``matrix`` is the (n_types * n^2)-square operator in type-major order.
    ``null_types`` lists types whose constant (zero wavenumber) mode is
    removed, e.g. the pressure of a periodic Stokes system; the solve returns
    the zero-sum representative for them.
    """

    def __init__(self, matrix, n_side, null_types=(), check=True):
        matrix = sp.csr_matrix(matrix)
        n = int(n_side)
        nn = n * n
        ntypes, rem = divmod(matrix.shape[0], nn)
        if rem or matrix.shape[0] != matrix.shape[1]:
            raise LinearSolveError("matrix size is not a multiple of the lattice size")
        self.n, self.ntypes = n, ntypes
        rows = matrix[np.arange(ntypes) * nn].toarray().reshape(ntypes, ntypes, n, n)
        # stencil s_ab(d) = A[a, 0; b, d]; convolution kernel t_ab(d) = s_ab(-d)
        t = np.roll(rows[:, :, ::-1, ::-1], shift=(1, 1), axis=(2, 3))
        sym = np.fft.fft2(t).transpose(2, 3, 0, 1)  # (n, n, a, b)
        if check:
            x = np.random.default_rng(0).standard_normal(matrix.shape[0])
            y = self._apply_symbol(sym, x)
            if np.linalg.norm(y - matrix @ x) > 1e-10 * max(1.0, np.linalg.norm(matrix @ x)):
                raise LinearSolveError("operator is not translation invariant on the lattice")
        self.null_types = tuple(null_types)
        for a in self.null_types:
            sym[0, 0, a, :] = 0.0
            sym[0, 0, :, a] = 0.0
            sym[0, 0, a, a] = 1.0
        cond = np.linalg.cond(sym.reshape(-1, ntypes, ntypes))
        if not np.all(np.isfinite(cond)) or cond.max() > 1e14:
            raise LinearSolveError(f"periodic symbol is singular (max cond {cond.max():.2e})")
        self.max_cond = float(cond.max())
        self.inverse = np.linalg.inv(sym)
        self.matrix = matrix

    def _apply_symbol(self, sym, x):
        n, nt = self.n, self.ntypes
        X = np.fft.fft2(x.reshape(nt, n, n)).transpose(1, 2, 0)
        Y = np.einsum("ijab,ijb->ija", sym, X)
        return np.fft.ifft2(Y.transpose(2, 0, 1)).real.ravel()

    def solve(self, rhs):
        """Solve for one right-hand side (or columns of a 2D array)."""
        rhs = np.asarray(rhs, dtype=float)
        n, nt = self.n, self.ntypes
        if rhs.ndim == 2:
            return np.column_stack([self.solve(c) for c in rhs.T])
        F = np.fft.fft2(rhs.reshape(nt, n, n)).transpose(1, 2, 0)
        for a in self.null_types:
            F[0, 0, a] = 0.0
        X = (self.inverse @ F[..., None])[..., 0]
        return np.fft.ifft2(X.transpose(2, 0, 1)).real.ravel()
