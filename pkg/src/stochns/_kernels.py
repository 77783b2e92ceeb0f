"""
Element kernels for the convection form

    b(w, u, v) = (w . grad u, v) + 1/2 ((div w) u, v)

on P2 vector fields.  Each kernel exists twice: an explicit loop version
compiled with numba, and a vectorized numpy version.  The public functions
pick the compiled one unless numba is disabled (``STOCHNS_DISABLE_NUMBA=1``)
or ``backend="numpy"`` is requested.

Shapes: ``phi`` (nq, nl), ``dphi`` (nt, nq, nl, 2), ``dx`` (nt, nq),
local coefficient arrays ``wl``/``ul`` (nt, nl, 2).
"""
import numpy as np

from ._jit import njit, use_numba


@njit(cache=True)
def _residual_loop(phi, dphi, dx, wl, ul):
    nt, nq, nl = dphi.shape[0], dphi.shape[1], dphi.shape[2]
    out = np.zeros((nt, nl, 2))
    for t in range(nt):
        for q in range(nq):
            w0 = 0.0
            w1 = 0.0
            u0 = 0.0
            u1 = 0.0
            divw = 0.0
            g00 = 0.0
            g01 = 0.0
            g10 = 0.0
            g11 = 0.0
            for l in range(nl):
                p = phi[q, l]
                dxl = dphi[t, q, l, 0]
                dyl = dphi[t, q, l, 1]
                w0 += wl[t, l, 0] * p
                w1 += wl[t, l, 1] * p
                u0 += ul[t, l, 0] * p
                u1 += ul[t, l, 1] * p
                divw += wl[t, l, 0] * dxl + wl[t, l, 1] * dyl
                g00 += ul[t, l, 0] * dxl
                g01 += ul[t, l, 0] * dyl
                g10 += ul[t, l, 1] * dxl
                g11 += ul[t, l, 1] * dyl
            c = dx[t, q]
            f0 = c * (w0 * g00 + w1 * g01 + 0.5 * divw * u0)
            f1 = c * (w0 * g10 + w1 * g11 + 0.5 * divw * u1)
            for i in range(nl):
                out[t, i, 0] += f0 * phi[q, i]
                out[t, i, 1] += f1 * phi[q, i]
    return out


@njit(cache=True)
def _residual_global_loop(phi, dphi, dx, cell_dofs, stride, w, u, out):
    # gather, evaluate and scatter in one pass; triangles visited in order
    nt, nq, nl = dphi.shape[0], dphi.shape[1], dphi.shape[2]
    wl = np.empty((nl, 2))
    ul = np.empty((nl, 2))
    loc = np.empty((nl, 2))
    for t in range(nt):
        for l in range(nl):
            g = cell_dofs[t, l]
            wl[l, 0] = w[g]
            wl[l, 1] = w[stride + g]
            ul[l, 0] = u[g]
            ul[l, 1] = u[stride + g]
            loc[l, 0] = 0.0
            loc[l, 1] = 0.0
        for q in range(nq):
            w0 = 0.0
            w1 = 0.0
            u0 = 0.0
            u1 = 0.0
            divw = 0.0
            g00 = 0.0
            g01 = 0.0
            g10 = 0.0
            g11 = 0.0
            for l in range(nl):
                p = phi[q, l]
                dxl = dphi[t, q, l, 0]
                dyl = dphi[t, q, l, 1]
                w0 += wl[l, 0] * p
                w1 += wl[l, 1] * p
                u0 += ul[l, 0] * p
                u1 += ul[l, 1] * p
                divw += wl[l, 0] * dxl + wl[l, 1] * dyl
                g00 += ul[l, 0] * dxl
                g01 += ul[l, 0] * dyl
                g10 += ul[l, 1] * dxl
                g11 += ul[l, 1] * dyl
            c = dx[t, q]
            f0 = c * (w0 * g00 + w1 * g01 + 0.5 * divw * u0)
            f1 = c * (w0 * g10 + w1 * g11 + 0.5 * divw * u1)
            for i in range(nl):
                loc[i, 0] += f0 * phi[q, i]
                loc[i, 1] += f1 * phi[q, i]
        for l in range(nl):
            g = cell_dofs[t, l]
            out[g] += loc[l, 0]
            out[stride + g] += loc[l, 1]
    return out


def _residual_numpy(phi, dphi, dx, wl, ul):
    w = np.einsum("ql,tlc->tqc", phi, wl)
    u = np.einsum("ql,tlc->tqc", phi, ul)
    divw = np.einsum("tqld,tld->tq", dphi, wl)
    gu = np.einsum("tqld,tlc->tqcd", dphi, ul)
    f = np.einsum("tqd,tqcd->tqc", w, gu) + 0.5 * divw[..., None] * u
    f *= dx[..., None]
    return np.einsum("tqc,qi->tic", f, phi)


@njit(cache=True)
def _jacobian_loop(phi, dphi, dx, wl):
    nt, nq, nl = dphi.shape[0], dphi.shape[1], dphi.shape[2]
    m1 = np.zeros((nt, nl, nl))
    m2 = np.zeros((nt, 2, 2, nl, nl))
    for t in range(nt):
        for q in range(nq):
            w0 = 0.0
            w1 = 0.0
            divw = 0.0
            g00 = 0.0
            g01 = 0.0
            g10 = 0.0
            g11 = 0.0
            for l in range(nl):
                p = phi[q, l]
                dxl = dphi[t, q, l, 0]
                dyl = dphi[t, q, l, 1]
                w0 += wl[t, l, 0] * p
                w1 += wl[t, l, 1] * p
                divw += wl[t, l, 0] * dxl + wl[t, l, 1] * dyl
                g00 += wl[t, l, 0] * dxl
                g01 += wl[t, l, 0] * dyl
                g10 += wl[t, l, 1] * dxl
                g11 += wl[t, l, 1] * dyl
            c = dx[t, q]
            for i in range(nl):
                ci = c * phi[q, i]
                for j in range(nl):
                    pj = phi[q, j]
                    dxj = dphi[t, q, j, 0]
                    dyj = dphi[t, q, j, 1]
                    m1[t, i, j] += ci * (w0 * dxj + w1 * dyj + 0.5 * divw * pj)
                    m2[t, 0, 0, i, j] += ci * (pj * g00 + 0.5 * dxj * w0)
                    m2[t, 0, 1, i, j] += ci * (pj * g01 + 0.5 * dyj * w0)
                    m2[t, 1, 0, i, j] += ci * (pj * g10 + 0.5 * dxj * w1)
                    m2[t, 1, 1, i, j] += ci * (pj * g11 + 0.5 * dyj * w1)
    return m1, m2


def _jacobian_numpy(phi, dphi, dx, wl):
    w = np.einsum("ql,tlc->tqc", phi, wl)
    divw = np.einsum("tqld,tld->tq", dphi, wl)
    gw = np.einsum("tqld,tlc->tqcd", dphi, wl)
    wphi = dx[..., None] * phi[None]  # (t, q, i)
    conv = np.einsum("tqd,tqjd->tqj", w, dphi) + 0.5 * divw[..., None] * phi[None]
    m1 = np.einsum("tqi,tqj->tij", wphi, conv)
    m2 = (np.einsum("tqi,qj,tqcd->tcdij", wphi, phi, gw)
          + 0.5 * np.einsum("tqi,tqjd,tqc->tcdij", wphi, dphi, w))
    return m1, m2


def _backend(backend):
    if backend is None:
        return "numba" if use_numba() else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {backend!r}")
    if backend == "numba" and not use_numba():
        raise RuntimeError("numba backend requested but numba is disabled")
    return backend


def trilinear_residual_local(phi, dphi, dx, wl, ul, backend=None):
    """Local vectors of v -> b(w, u, v), shape (nt, nl, 2)."""
    if _backend(backend) == "numba":
        return _residual_loop(phi, dphi, dx, np.ascontiguousarray(wl), np.ascontiguousarray(ul))
    return _residual_numpy(phi, dphi, dx, wl, ul)


def trilinear_residual_global(phi, dphi, dx, cell_dofs, stride, w, u, backend=None):
    """Global vector of v -> b(w, u, v) for block-by-component P2 coefficients."""
    if _backend(backend) == "numba":
        out = np.zeros(2 * stride)
        return _residual_global_loop(phi, dphi, dx, cell_dofs, stride,
                                     np.ascontiguousarray(w, dtype=float),
                                     np.ascontiguousarray(u, dtype=float), out)
    wl = np.stack([w[cell_dofs], w[stride + cell_dofs]], axis=-1)
    ul = np.stack([u[cell_dofs], u[stride + cell_dofs]], axis=-1)
    loc = _residual_numpy(phi, dphi, dx, wl, ul)
    cd = cell_dofs.ravel()
    return np.concatenate([np.bincount(cd, weights=loc[..., c].ravel(), minlength=stride)
                           for c in range(2)])


def trilinear_jacobian_local(phi, dphi, dx, wl, backend=None):
    """Local matrices of u -> b(w, u, .) (nt, nl, nl, same for both
    components) and u -> b(u, w, .) (nt, 2, 2, nl, nl)."""
    if _backend(backend) == "numba":
        return _jacobian_loop(phi, dphi, dx, np.ascontiguousarray(wl))
    return _jacobian_numpy(phi, dphi, dx, wl)
