"""Lagrange P1/P2 spaces on periodic meshes: dofs, bases, quadrature, norms."""
from dataclasses import dataclass
import enum
from functools import cached_property, lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .mesh import MeshTopology


class SpaceKind(enum.Enum):
    VelocityP2Vector = "velocity_p2_vector"
    PressureP1ZeroMean = "pressure_p1_zero_mean"
    PotentialP1Scalar = "potential_p1_scalar"

    @property
    def degree(self):
        return 2 if self is SpaceKind.VelocityP2Vector else 1

    @property
    def n_components(self):
        return 2 if self is SpaceKind.VelocityP2Vector else 1

    @property
    def n_local(self):
        return 6 if self.degree == 2 else 3


@dataclass(frozen=True)
class DofMap:
    """Global dof layout of one space.

    ``cell_dofs`` are scalar dof indices per triangle; vector fields use the
    block-by-component layout, so component ``c`` of scalar dof ``i`` lives at
    ``c * component_stride + i``.
    """

    space: SpaceKind
    mesh: MeshTopology
    n_scalar: int
    cell_dofs: np.ndarray
    component_stride: int

    @property
    def n_global(self):
        return self.n_scalar * self.space.n_components

    @property
    def n_components(self):
        return self.space.n_components

    def node_coords(self):
        """Physical coordinates of every scalar dof, wrapped into [0, L)^2."""
        ref = _LAGRANGE_NODES[self.space.degree]
        c = self.mesh.tri_coords
        J = self.mesh.jacobians()
        pts = c[:, None, 0, :] + np.einsum("tij,qj->tqi", J, ref)
        out = np.empty((self.n_scalar, 2))
        out[self.cell_dofs.ravel()] = pts.reshape(-1, 2)
        return np.mod(out, self.mesh.period_L)


@dataclass
class FieldCoefficients:
    """Coefficient vector of a discrete field (block layout for vectors)."""

    space: SpaceKind
    values: np.ndarray

    def copy(self):
        return FieldCoefficients(self.space, self.values.copy())

    def component(self, c):
        n = self.values.size // self.space.n_components
        return self.values[c * n:(c + 1) * n]


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (nq, 2) reference coordinates
    weights: np.ndarray  # (nq,), sum to 1/2
    degree: int


_DOFMAPS = {}


def build_dof_map(mesh, space):
    """Dof map of ``space`` on ``mesh`` (cached: same inputs, same object)."""
    key = (id(mesh), space)
    hit = _DOFMAPS.get(key)
    if hit is not None and hit.mesh is mesh:
        return hit
    if len(_DOFMAPS) > 96:
        _DOFMAPS.clear()
    dm = _build_dof_map(mesh, space)
    _DOFMAPS[key] = dm
    return dm


def _build_dof_map(mesh, space):
    n2 = mesh.n_side**2
    if space.degree == 1:
        return DofMap(space, mesh, n2, mesh.triangles.copy(), n2)
    cell = np.concatenate([mesh.triangles, n2 + mesh.tri_edges], axis=1)
    return DofMap(space, mesh, 4 * n2, cell, 4 * n2)


# reference nodes: vertices, then midpoints of edges (0,1), (1,2), (2,0)
_LAGRANGE_NODES = {
    1: np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    2: np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.5, 0.0], [0.5, 0.5], [0.0, 0.5]]),
}


def lagrange_nodes(degree):
    return _LAGRANGE_NODES[degree].copy()


def _basis(degree, pts):
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0], pts[:, 1]
    l0, l1, l2 = 1.0 - x - y, x, y
    one = np.ones_like(x)
    zero = np.zeros_like(x)
    if degree == 1:
        vals = np.stack([l0, l1, l2], 1)
        grads = np.stack([np.stack([-one, -one], 1), np.stack([one, zero], 1),
                          np.stack([zero, one], 1)], 1)
        return vals, grads
    vals = np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                     4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0], 1)
    d0 = np.stack([-one, -one], 1)
    d1 = np.stack([one, zero], 1)
    d2 = np.stack([zero, one], 1)
    grads = np.stack([
        (4 * l0 - 1)[:, None] * d0,
        (4 * l1 - 1)[:, None] * d1,
        (4 * l2 - 1)[:, None] * d2,
        4 * (l1[:, None] * d0 + l0[:, None] * d1),
        4 * (l2[:, None] * d1 + l1[:, None] * d2),
        4 * (l0[:, None] * d2 + l2[:, None] * d0),
    ], 1)
    return vals, grads


def evaluate_basis(space, ref_point):
    """Basis values (nloc,) and reference gradients (nloc, 2) at one point.

    Accepts a batch of points too, returning (npts, nloc) and (npts, nloc, 2).
    """
    deg = space.degree if isinstance(space, SpaceKind) else int(space)
    p = np.asarray(ref_point, dtype=float)
    vals, grads = _basis(deg, p)
    if p.ndim == 1:
        return vals[0], grads[0]
    return vals, grads


# Dunavant's 12-point rule, exact to degree 6; weights normalised to 1
_DUNAVANT6 = (
    (0.116786275726379, (0.501426509658179, 0.249286745170910, 0.249286745170910)),
    (0.050844906370207, (0.873821971016996, 0.063089014491502, 0.063089014491502)),
    (0.082851075618374, (0.053145049844817, 0.310352451033784, 0.636502499121399)),
)


def _orbit(bary):
    a, b, c = bary
    perms = {(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)}
    return sorted(perms)


def _dunavant6_points(params):
    w1, a1, w2, a2, w3, b3, c3 = params
    pts, wts = [], []
    for w, bary in ((w1, (1 - 2 * a1, a1, a1)), (w2, (1 - 2 * a2, a2, a2)), (w3, (1 - b3 - c3, b3, c3))):
        for l0, l1, l2 in _orbit(bary):
            pts.append((l1, l2))
            wts.append(0.5 * w)
    return np.array(pts), np.array(wts)


def _dunavant6():
    # tabulated values carry 15 digits; polish them against the exact
    # monomial moments so the rule is exact to round-off
    from math import factorial
    (w1, (_, a1, _)), (w2, (_, a2, _)), (w3, (_, b3, c3)) = _DUNAVANT6
    p = np.array([w1, a1, w2, a2, w3, b3, c3])
    exps = [(i, j) for i in range(7) for j in range(7 - i)]
    exact = np.array([factorial(i) * factorial(j) / factorial(i + j + 2) for i, j in exps])

    def resid(q):
        pts, wts = _dunavant6_points(q)
        return np.array([wts @ (pts[:, 0]**i * pts[:, 1]**j) for i, j in exps]) - exact

    for _ in range(4):
        r = resid(p)
        J = np.empty((r.size, p.size))
        for k in range(p.size):
            dp = np.zeros_like(p)
            dp[k] = 1e-7
            J[:, k] = (resid(p + dp) - resid(p - dp)) / 2e-7
        p = p - np.linalg.lstsq(J, r, rcond=None)[0]
    return _dunavant6_points(p)


def _collapsed_gauss(degree):
    n = (degree + 2) // 2
    xs, ws = roots_legendre(n)
    s, ws = 0.5 * (xs + 1.0), 0.5 * ws
    xt, wt = roots_jacobi(n, 1.0, 0.0)
    t, wt = 0.5 * (xt + 1.0), 0.25 * wt
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(ws, wt)
    pts = np.stack([(S * (1.0 - T)).ravel(), T.ravel()], 1)
    return pts, W.ravel()


def _radon7():
    """Seven-point degree-5 rule with closed-form nodes."""
    s = np.sqrt(15.0)
    pts = [[1.0 / 3.0, 1.0 / 3.0]]
    wts = [9.0 / 80.0]
    for b, w in (((6.0 - s) / 21.0, (155.0 - s) / 2400.0), ((6.0 + s) / 21.0, (155.0 + s) / 2400.0)):
        a = 1.0 - 2.0 * b
        pts += [[b, b], [a, b], [b, a]]
        wts += [w] * 3
    return np.array(pts), np.array(wts)


@lru_cache(maxsize=None)
def quadrature_rule(min_degree):
    """Triangle rule exact for polynomials of total degree ``min_degree``."""
    if int(min_degree) != min_degree or not 1 <= min_degree <= 10:
        raise ValueError(f"unsupported quadrature degree {min_degree!r}; use 1..10")
    if min_degree == 1:
        pts, wts = np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([0.5])
    elif min_degree == 2:
        pts = np.array([[1.0 / 6.0, 1.0 / 6.0], [2.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 2.0 / 3.0]])
        wts = np.full(3, 1.0 / 6.0)
    elif min_degree == 5:
        pts, wts = _radon7()
    elif min_degree == 6:
        pts, wts = _dunavant6()
    else:
        pts, wts = _collapsed_gauss(min_degree)
    pts.flags.writeable = False
    wts.flags.writeable = False
    return QuadratureRule(pts, wts, int(min_degree))


DEFAULT_DEGREE = 6


class ElementData:
    """Basis tables of a space at the quadrature points of every triangle.

    ``dx`` are quadrature weights times |det J| (ntri, nq); ``phi`` the
    reference basis values (nq, nloc); ``dphi`` physical gradients
    (ntri, nq, nloc, 2); ``x`` physical (unwrapped) quadrature points.
    """

    def __init__(self, mesh, degree, quad_degree=DEFAULT_DEGREE):
        rule = quadrature_rule(quad_degree)
        J = mesh.jacobians()
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        Jinv_T = np.empty_like(J)
        Jinv_T[:, 0, 0] = J[:, 1, 1] / det
        Jinv_T[:, 0, 1] = -J[:, 1, 0] / det
        Jinv_T[:, 1, 0] = -J[:, 0, 1] / det
        Jinv_T[:, 1, 1] = J[:, 0, 0] / det
        vals, grads = _basis(degree, rule.points)
        self.rule = rule
        self.degree = degree
        self.phi = vals
        self.dphi = np.einsum("tij,qlj->tqli", Jinv_T, grads)
        self.dx = np.abs(det)[:, None] * rule.weights[None, :]
        self.x = mesh.tri_coords[:, None, 0, :] + np.einsum("tij,qj->tqi", J, rule.points)

    @cached_property
    def dphi_flat(self):
        """dphi laid out (ntri, nloc, nq * 2) for batched contractions."""
        nt, nq, nl, _ = self.dphi.shape
        return np.ascontiguousarray(self.dphi.transpose(0, 2, 1, 3)).reshape(nt, nl, 2 * nq)


_ELEMENT_CACHE = {}


def element_data(mesh, degree, quad_degree=DEFAULT_DEGREE):
    key = (id(mesh), mesh.n_side, mesh.period_L, degree, quad_degree)
    ed = _ELEMENT_CACHE.get(key)
    if ed is None:
        if len(_ELEMENT_CACHE) > 64:
            _ELEMENT_CACHE.clear()
        ed = ElementData(mesh, degree, quad_degree)
        _ELEMENT_CACHE[key] = (ed, mesh)
        return ed
    return ed[0]


def values_at_quadrature(dofmap, field, quad_degree=DEFAULT_DEGREE):
    """Field values at quadrature points: (ntri, nq) or (ntri, nq, 2)."""
    ed = element_data(dofmap.mesh, dofmap.space.degree, quad_degree)
    vals = field.values if isinstance(field, FieldCoefficients) else np.asarray(field)
    ncomp = dofmap.n_components
    out = []
    for c in range(ncomp):
        loc = vals[c * dofmap.component_stride + dofmap.cell_dofs]
        out.append(loc @ ed.phi.T)
    return out[0] if ncomp == 1 else np.stack(out, -1)


def gradients_at_quadrature(dofmap, field, quad_degree=DEFAULT_DEGREE):
    """Physical gradients at quadrature points: (ntri, nq, 2) or (ntri, nq, 2, 2).

    For vectors the last two axes are (component, derivative direction).
    """
    ed = element_data(dofmap.mesh, dofmap.space.degree, quad_degree)
    vals = field.values if isinstance(field, FieldCoefficients) else np.asarray(field)
    out = []
    for c in range(dofmap.n_components):
        loc = vals[c * dofmap.component_stride + dofmap.cell_dofs]
        out.append((loc[:, None, None, :] @ ed.dphi)[:, :, 0, :])
    return out[0] if dofmap.n_components == 1 else np.stack(out, -2)


def interpolate(dofmap, f):
    """Nodal interpolant of ``f(x, y)``; vector spaces expect a 2-tuple return."""
    xy = dofmap.node_coords()
    vals = f(xy[:, 0], xy[:, 1])
    if dofmap.n_components == 1:
        v = np.broadcast_to(np.asarray(vals, dtype=float), (dofmap.n_scalar,))
        return FieldCoefficients(dofmap.space, np.array(v))
    parts = [np.broadcast_to(np.asarray(c, dtype=float), (dofmap.n_scalar,)) for c in vals]
    return FieldCoefficients(dofmap.space, np.concatenate(parts))


def evaluate_field(mesh, dofmap, field, point):
    """Evaluate a discrete field at physical point(s).

    Returns a scalar / 2-vector for one point, arrays for a batch.
    """
    p = np.asarray(point, dtype=float)
    tri, ref = mesh.locate(p)
    vals, _ = _basis(dofmap.space.degree, ref)
    values = field.values if isinstance(field, FieldCoefficients) else np.asarray(field)
    dofs = dofmap.cell_dofs[tri]
    comps = [np.sum(values[c * dofmap.component_stride + dofs] * vals, axis=1)
             for c in range(dofmap.n_components)]
    out = comps[0] if dofmap.n_components == 1 else np.stack(comps, -1)
    return out[0] if p.ndim == 1 else out


def compute_norm(mesh, dofmap, field, which="L2"):
    """L2 norm or H1 seminorm of a discrete field (exact quadrature)."""
    qdeg = 2 * dofmap.space.degree if which == "L2" else max(1, 2 * dofmap.space.degree - 2)
    ed = element_data(mesh, dofmap.space.degree, qdeg)
    if which == "L2":
        v = values_at_quadrature(dofmap, field, qdeg)
        sq = v**2 if v.ndim == 2 else np.sum(v**2, -1)
    elif which in ("H1", "H1seminorm"):
        g = gradients_at_quadrature(dofmap, field, qdeg)
        sq = np.sum(g**2, axis=-1)
        if sq.ndim == 3:
            sq = sq.sum(-1)
    else:
        raise ValueError(f"unknown norm {which!r}")
    return float(np.sqrt(max(np.sum(sq * ed.dx), 0.0)))


def integrate(mesh, f, quad_degree=DEFAULT_DEGREE):
    """Quadrature of a pointwise function ``f(x, y)`` over the torus."""
    ed = element_data(mesh, 1, quad_degree)
    return float(np.sum(f(ed.x[..., 0], ed.x[..., 1]) * ed.dx))
