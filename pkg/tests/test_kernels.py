"""The numba kernels and the pure-numpy fallback must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest

from stochns import _kernels
from stochns._jit import HAVE_NUMBA, use_numba
from stochns.assembly import _local_coeffs
from stochns.mesh import build_periodic_uniform_mesh
from stochns.spaces import SpaceKind, build_dof_map, element_data

needs_numba = pytest.mark.skipif(not (HAVE_NUMBA and use_numba()), reason="numba disabled")


@pytest.fixture(scope="module")
def data():
    mesh = build_periodic_uniform_mesh(4)
    V = build_dof_map(mesh, SpaceKind.VelocityP2Vector)
    ed = element_data(mesh, 2, 5)
    rng = np.random.default_rng(3)
    w, u = rng.standard_normal((2, V.n_global))
    return V, ed, w, u


@needs_numba
def test_residual_local_backends_agree(data):
    V, ed, w, u = data
    wl, ul = _local_coeffs(V, w), _local_coeffs(V, u)
    a = _kernels.trilinear_residual_local(ed.phi, ed.dphi, ed.dx, wl, ul, "numba")
    b = _kernels.trilinear_residual_local(ed.phi, ed.dphi, ed.dx, wl, ul, "numpy")
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@needs_numba
def test_residual_global_backends_agree(data):
    V, ed, w, u = data
    args = (ed.phi, ed.dphi, ed.dx, V.cell_dofs, V.component_stride, w, u)
    np.testing.assert_allclose(_kernels.trilinear_residual_global(*args, backend="numba"),
                               _kernels.trilinear_residual_global(*args, backend="numpy"),
                               rtol=1e-12, atol=1e-12)


@needs_numba
def test_jacobian_backends_agree(data):
    V, ed, w, _ = data
    wl = _local_coeffs(V, w)
    for a, b in zip(_kernels.trilinear_jacobian_local(ed.phi, ed.dphi, ed.dx, wl, "numba"),
                    _kernels.trilinear_jacobian_local(ed.phi, ed.dphi, ed.dx, wl, "numpy")):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_unknown_backend(data):
    V, ed, w, u = data
    with pytest.raises(ValueError):
        _kernels.trilinear_residual_local(ed.phi, ed.dphi, ed.dx, w, u, "cuda")


def test_env_flag_disables_numba():
    code = "from stochns._jit import use_numba; from stochns import _kernels; print(use_numba(), _kernels._backend(None))"
    env = dict(os.environ, STOCHNS_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "numpy"]
