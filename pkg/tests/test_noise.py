import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochns.assembly import taylor_hood_spaces
from stochns.mesh import build_periodic_uniform_mesh
from stochns.noise import (
    IncrementField,
    NoiseSpec,
    WienerPath,
    constant_diffusion,
    increment_coefficients,
    increment_field,
    noise_field_at_quadrature,
    noise_load_vector,
    sqrt_diffusion,
    zero_diffusion,
)
from stochns.spaces import FieldCoefficients, SpaceKind, element_data, integrate


def test_lambdas():
    lam = NoiseSpec(M=3).lambdas()
    assert lam[0, 0] == 0.5
    assert lam[1, 2] == pytest.approx(1 / 13)
    np.testing.assert_array_equal(lam, lam.T)


def test_invalid_spec_and_path():
    with pytest.raises(ValueError):
        NoiseSpec(M=0)
    with pytest.raises(ValueError):
        WienerPath(1, 0, 0.1)
    with pytest.raises(ValueError):
        WienerPath(1, 4, 0.0)


def test_reproducible_and_order_independent():
    a = WienerPath(7, 16, 1 / 16, M=4, path_index=3)
    b = WienerPath(7, 16, 1 / 16, M=4, path_index=3)
    assert np.array_equal(a.increments, b.increments)
    # a longer path shares its prefix: the step lives in the counter
    c = WienerPath(7, 32, 1 / 32, M=4, path_index=3)
    assert np.array_equal(a.increments, c.increments[:16])
    d = WienerPath(7, 16, 1 / 16, M=4, path_index=4)
    assert not np.array_equal(a.increments, d.increments)


def test_increments_read_only():
    p = WienerPath(1, 4, 0.25, M=2)
    with pytest.raises(ValueError):
        p.increments[0, 0, 0] = 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**40), st.sampled_from([1, 2, 4, 8]))
def test_coarsening_is_exact_sum(seed, level):
    p = WienerPath(seed, 16, 1 / 16, M=3)
    fine = p.brownian_increments(1)
    coarse = p.brownian_increments(level)
    expect = fine.reshape((16 // level, level, 3, 3))
    acc = expect[:, 0].copy()
    for i in range(1, level):
        acc += expect[:, i]
    assert np.array_equal(coarse, acc)


def test_coarsening_rejects_non_divisor():
    p = WienerPath(1, 12, 1 / 12, M=2)
    with pytest.raises(ValueError):
        p.brownian_increments(5)
    with pytest.raises(ValueError):
        p.n_steps_at(7)


def test_increment_field_matches_coefficients():
    spec = NoiseSpec(M=4)
    p = WienerPath(3, 8, 1 / 8, M=4)
    coeffs = increment_coefficients(p, spec, level=2)
    for step in range(4):
        np.testing.assert_array_equal(increment_field(p, spec, step, level=2).coefficients, coeffs[step])
    with pytest.raises(IndexError):
        increment_field(p, spec, 4, level=2)


def test_variance_single_mode():
    spec = NoiseSpec(M=2)
    dt = 0.01
    p = WienerPath(11, 10_000, dt, M=2)
    c = increment_coefficients(p, spec)
    var = c.var(axis=0, ddof=1)
    np.testing.assert_allclose(var, dt * spec.lambdas(), rtol=0.05)


def test_single_mode_field_integral(oracle):
    spec = NoiseSpec(M=1, basis_amplitude=1.0)
    field = IncrementField(spec, np.ones((1, 1)))
    mesh = build_periodic_uniform_mesh(16)
    assert integrate(mesh, field) == pytest.approx(oracle["noise_single_mode_integral"], rel=1e-5)


def test_vector_noise_shape():
    spec = NoiseSpec(M=3, vector_valued=True)
    p = WienerPath.for_spec(spec, 0, 4, 1.0)
    f = increment_field(p, spec, 0)
    assert f(np.array([0.2, 0.3]), np.array([0.5, 0.1])).shape == (2, 2)


def test_diffusions():
    u = np.array([[3.0, -4.0], [0.0, 0.0]])
    np.testing.assert_allclose(sqrt_diffusion()(u), [[np.sqrt(10), np.sqrt(17)], [1, 1]])
    np.testing.assert_array_equal(zero_diffusion()(u), 0.0)
    np.testing.assert_array_equal(constant_diffusion((2.0, 3.0))(u), [[2, 3], [2, 3]])
    assert sqrt_diffusion().lipschitz == 1.0


def test_noise_load_zero_diffusion_and_constant():
    mesh = build_periodic_uniform_mesh(4)
    V, _, _ = taylor_hood_spaces(mesh)
    u = FieldCoefficients(SpaceKind.VelocityP2Vector, np.zeros(V.n_global))
    ones = lambda x, y: np.ones_like(x)  # noqa: E731
    assert not np.any(noise_load_vector(mesh, V, zero_diffusion(), u, ones))
    b = noise_load_vector(mesh, V, sqrt_diffusion(), u, ones)
    # G(0) = (1, 1): each component integrates to the area
    assert b[:V.n_scalar].sum() == pytest.approx(1.0, rel=1e-13)
    assert b[V.n_scalar:].sum() == pytest.approx(1.0, rel=1e-13)


def test_noise_field_uses_cached_tables():
    spec = NoiseSpec(M=3)
    mesh = build_periodic_uniform_mesh(4)
    V, _, _ = taylor_hood_spaces(mesh)
    p = WienerPath.for_spec(spec, 5, 4, 1.0)
    dW = increment_field(p, spec, 1)
    u = np.zeros(V.n_global)
    fast = noise_field_at_quadrature(mesh, V, sqrt_diffusion(), u, dW)
    slow = noise_field_at_quadrature(mesh, V, sqrt_diffusion(), u, lambda x, y: dW(x, y))
    np.testing.assert_allclose(fast, slow, atol=1e-13)
    assert fast.shape == element_data(mesh, 1).x.shape


def test_increment_vanishes_on_x_zero():
    spec = NoiseSpec()
    f = increment_field(WienerPath.for_spec(spec, 1, 4, 1.0), spec, 2)
    np.testing.assert_array_equal(f(np.zeros(5), np.linspace(0.1, 0.9, 5)), 0.0)


def test_sqrt_diffusion_examples(rng):
    G = sqrt_diffusion()
    np.testing.assert_array_equal(G(np.array([0.0, 0.0])), [1.0, 1.0])
    np.testing.assert_allclose(G(np.array([np.sqrt(3.0), 0.0])), [2.0, 1.0], rtol=1e-15)
    a, b = rng.standard_normal((2, 1000, 2)) * 5
    assert np.all(np.abs(G(a) - G(b)) <= np.abs(a - b) + 1e-15)


def test_noise_load_single_mode_and_linearity():
    spec = NoiseSpec(M=1)
    dt, xi = 1 / 16, 0.8
    mesh = build_periodic_uniform_mesh(32)
    V, _, _ = taylor_hood_spaces(mesh)
    u = np.zeros(V.n_global)
    dW = IncrementField(spec, np.sqrt(dt * spec.lambdas()) * xi)
    b = noise_load_vector(mesh, V, sqrt_diffusion(), u, dW)
    expect = 5 * np.sqrt(dt / 2) * xi * 4 / np.pi**2
    assert abs(b[:V.n_scalar].sum() - expect) <= 1e-4
    b2 = noise_load_vector(mesh, V, sqrt_diffusion(), u, IncrementField(spec, 2 * dW.coefficients))
    np.testing.assert_allclose(b2, 2 * b, rtol=1e-14, atol=1e-18)
    zero = IncrementField(spec, np.zeros((1, 1)))
    assert not np.any(noise_load_vector(mesh, V, sqrt_diffusion(), u, zero))
