"""Uniform right-triangle meshes of the periodic square (0, L)^2."""
from dataclasses import dataclass, field
import math

import numpy as np


@dataclass(frozen=True)
class MeshTopology:
    """Periodic triangulation with two triangles per square cell.

    ``vertices`` holds the owned lattice points only; ``triangles`` index into
    them through the periodic identification.  ``tri_coords`` keeps the
    unwrapped corner coordinates of every triangle so the geometry stays
    single valued across the seam.
    """

    n_side: int
    period_L: float
    vertices: np.ndarray  # (n_side**2, 2)
    triangles: np.ndarray  # (2 n_side**2, 3), counter-clockwise
    tri_coords: np.ndarray  # (2 n_side**2, 3, 2)
    tri_edges: np.ndarray  # (2 n_side**2, 3), edge ids of (v0v1, v1v2, v2v0)
    periodic_vertex_map: dict = field(repr=False)

    @property
    def h(self):
        """Longest edge length."""
        return math.sqrt(2.0) * self.period_L / self.n_side

    @property
    def cell_size(self):
        return self.period_L / self.n_side

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    def vertex_index(self, i, j):
        """Owned vertex of lattice position (i, j), any integers."""
        n = self.n_side
        return (j % n) * n + (i % n)

    def areas(self):
        c = self.tri_coords
        e1 = c[:, 1] - c[:, 0]
        e2 = c[:, 2] - c[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def jacobians(self):
        """Affine map Jacobians J (ntri, 2, 2) with columns v1-v0, v2-v0."""
        c = self.tri_coords
        return np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]], axis=-1)

    def locate(self, points):
        """Containing triangle and reference coordinates of physical points.

        Points are wrapped into [0, L)^2; a point on the cell diagonal goes to
        the lower-index triangle.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n, L = self.n_side, self.period_L
        s = np.mod(pts, L) * (n / L)
        # wrap tolerance at the upper seam
        s[s >= n - 1e-12 * n] = 0.0
        i = np.minimum(np.floor(s[:, 0]).astype(np.int64), n - 1)
        j = np.minimum(np.floor(s[:, 1]).astype(np.int64), n - 1)
        a = s[:, 0] - i
        b = s[:, 1] - j
        lower = a >= b
        tri = 2 * (j * n + i) + np.where(lower, 0, 1)
        # reference coords: T0 = (0,0),(1,0),(1,1); T1 = (0,0),(1,1),(0,1)
        ref = np.where(lower[:, None], np.stack([a - b, b], 1), np.stack([a, b - a], 1))
        return tri, ref

    def dump(self, path):
        """Write ``v x y`` / ``t i j k`` rows for debugging."""
        with open(path, "w") as fh:
            for x, y in self.vertices:
                fh.write(f"v {x!r} {y!r}\n")
            for a, b, c in self.triangles:
                fh.write(f"t {a} {b} {c}\n")


def build_periodic_uniform_mesh(n_side, period_L=1.0):
    """Build the periodic uniform mesh with ``n_side`` cells per side."""
    if int(n_side) != n_side or n_side < 2:
        raise ValueError(f"n_side must be an integer >= 2, got {n_side!r}")
    if not period_L > 0:
        raise ValueError(f"period_L must be positive, got {period_L!r}")
    n = int(n_side)
    hc = period_L / n
    jj, ii = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    vertices = np.stack([ii.ravel() * hc, jj.ravel() * hc], axis=1)

    ii = ii.ravel()
    jj = jj.ravel()

    def vid(a, b):
        return (b % n) * n + (a % n)

    v00, v10, v11, v01 = vid(ii, jj), vid(ii + 1, jj), vid(ii + 1, jj + 1), vid(ii, jj + 1)
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = np.stack([v00, v10, v11], 1)
    triangles[1::2] = np.stack([v00, v11, v01], 1)

    x0, y0 = ii * hc, jj * hc
    p00 = np.stack([x0, y0], 1)
    p10 = np.stack([x0 + hc, y0], 1)
    p11 = np.stack([x0 + hc, y0 + hc], 1)
    p01 = np.stack([x0, y0 + hc], 1)
    tri_coords = np.empty((2 * n * n, 3, 2))
    tri_coords[0::2] = np.stack([p00, p10, p11], 1)
    tri_coords[1::2] = np.stack([p00, p11, p01], 1)

    # edge ids: horizontal H(i,j) = c, vertical V(i,j) = n^2 + c, diagonal D(i,j) = 2n^2 + c
    c = jj * n + ii
    c_right = jj * n + (ii + 1) % n
    c_up = ((jj + 1) % n) * n + ii
    nn = n * n
    tri_edges = np.empty((2 * nn, 3), dtype=np.int64)
    tri_edges[0::2] = np.stack([c, nn + c_right, 2 * nn + c], 1)
    tri_edges[1::2] = np.stack([2 * nn + c, c_up, nn + c], 1)

    pmap = {}
    for a in range(n + 1):
        for b in range(n + 1):
            if a == n or b == n:
                pmap[(a, b)] = vid(a, b)
    return MeshTopology(n, float(period_L), vertices, triangles, tri_coords, tri_edges, pmap)


def reference_map(mesh, tri_index, ref_point):
    """Map a reference point of triangle ``tri_index`` to physical space.

    Returns ``(x, J, |det J|)``.
    """
    if not 0 <= tri_index < mesh.n_triangles:
        raise IndexError(f"triangle index {tri_index} out of range")
    c = mesh.tri_coords[tri_index]
    J = np.column_stack([c[1] - c[0], c[2] - c[0]])
    x = c[0] + J @ np.asarray(ref_point, dtype=float)
    return x, J, abs(np.linalg.det(J))


def edge_incidence(mesh):
    """Number of triangles sharing each periodic edge, indexed by edge id."""
    return np.bincount(mesh.tri_edges.ravel(), minlength=3 * mesh.n_side**2)
