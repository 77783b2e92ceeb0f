import math

import numpy as np
import pytest

from stochns.assembly import load_vector
from stochns.helmholtz import split_field
from stochns.noise import NoiseSpec, WienerPath, increment_field, noise_field_at_quadrature, zero_diffusion
from stochns.stepper import (
    PicardError,
    SchemeConfig,
    advance,
    discretization,
    indicator_diagnostics,
    initial_state,
    nonlinear_residual,
    run_path,
)


def _tg(x, y):
    a = 2 * np.pi
    return np.sin(a * x) * np.cos(a * y), -np.cos(a * x) * np.sin(a * y)


@pytest.fixture(scope="module")
def cfg():
    return SchemeConfig(n_side=8, n_steps=8, T=0.25, check_invariants=True)


def _path(cfg, seed=1, index=0, refine=1):
    return WienerPath.for_spec(cfg.noise, seed, cfg.n_steps * refine, cfg.T, index)


@pytest.mark.parametrize("kw", [dict(nu=0), dict(T=-1), dict(n_steps=0), dict(picard_tol=2.0),
                                dict(nonlinear_solver="bogus")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SchemeConfig(**kw)


def test_discretization_cached(cfg):
    assert discretization(cfg) is discretization(cfg.with_(check_invariants=False))


def test_zero_data_stays_zero(cfg):
    s = run_path(cfg.with_(diffusion=zero_diffusion()), _path(cfg))
    assert not np.any(s.final.u.values) and not np.any(s.final.p.values)


def test_initial_projection_energy(cfg):
    st = initial_state(cfg, _tg)
    d = discretization(cfg)
    assert d.l2_sq(st.u.values) == pytest.approx(0.5, rel=1e-3)


def test_deterministic_energy_decay(cfg):
    c = cfg.with_(diffusion=zero_diffusion())
    s = run_path(c, _path(c), u0_rule=_tg)
    assert np.all(np.diff(s.l2_history) < 0)
    # Stokes-like decay rate exp(-8 pi^2 nu t) bounds the implicit scheme from below
    assert s.l2_history[-1] > math.sqrt(0.5) * math.exp(-8 * math.pi**2 * c.T)


def test_invariants_every_step(cfg):
    s = run_path(cfg, _path(cfg, seed=9), u0_rule=_tg)
    assert len(s.invariants) == cfg.n_steps
    for inv in s.invariants:
        assert inv["energy_residual"] <= 1e-8
        assert inv["divergence_residual"] <= 1e-9
        assert inv["pressure_mean_r"] <= 1e-9 and inv["pressure_mean_p"] <= 1e-9
        assert inv["helmholtz_residual"] <= 1e-9
        assert inv["helmholtz_stability"] <= 1e-12


@pytest.mark.parametrize("solver", ["picard", "newton"])
def test_nonlinear_solvers_agree(cfg, solver):
    base = run_path(cfg, _path(cfg, seed=4), u0_rule=_tg)
    other = run_path(cfg.with_(nonlinear_solver=solver), _path(cfg, seed=4), u0_rule=_tg)
    np.testing.assert_allclose(other.final.u.values, base.final.u.values, atol=1e-8)
    np.testing.assert_allclose(other.final.p.values, base.final.p.values, atol=1e-6)


def test_bitwise_reproducible(cfg):
    a = run_path(cfg, _path(cfg, seed=123, index=5))
    b = run_path(cfg, _path(cfg, seed=123, index=5))
    assert np.array_equal(a.final.u.values, b.final.u.values)
    assert np.array_equal(a.final.p.values, b.final.p.values)


def test_coarse_run_on_fine_path(cfg):
    fine_path = _path(cfg, seed=3, refine=4)
    s = run_path(cfg, fine_path)
    assert s.final.n == cfg.n_steps
    with pytest.raises(ValueError):
        advance(initial_state(cfg), _path(cfg.with_(n_steps=6), seed=3), cfg)


def test_picard_failure_reports_step(cfg):
    c = cfg.with_(picard_max=1, picard_tol=1e-15, nonlinear_solver="picard", check_invariants=False)
    with pytest.raises(PicardError) as err:
        run_path(c, _path(c, seed=2), u0_rule=_tg)
    assert err.value.step == 1


def test_pressure_reconstruction(cfg):
    s = run_path(cfg.with_(n_steps=1, T=cfg.k), _path(cfg.with_(n_steps=1, T=cfg.k), seed=8), u0_rule=_tg)
    assert not np.array_equal(s.final.p.values, s.final.r.values)
    np.testing.assert_allclose(s.pressure_time_integral_p.values, cfg.k * s.final.p.values)


def test_trajectory_storage(cfg):
    s = run_path(cfg, _path(cfg), store_trajectory=True, u0_rule=_tg)
    assert s.trajectory.shape == (cfg.n_steps + 1, discretization(cfg).nu_)
    np.testing.assert_array_equal(s.trajectory[-1], s.final.u.values)


def test_observers(cfg):
    seen = []
    run_path(cfg.with_(observe_stride=4), _path(cfg), observers=[lambda st: seen.append(st.n)])
    assert seen == [4, 8]


class _S:
    def __init__(self, l2, h1, lap):
        self.max_l2_sq, self.max_h1_sq, self.max_lap_sq = l2, h1, lap


def test_indicators_monotone_and_limit():
    rng = np.random.default_rng(0)
    sums = [_S(*rng.uniform(0.1, 3.0, 3)) for _ in range(50)]
    eps = [0.1, 0.5, 1.0, 5.0, 50.0]
    fr = [indicator_diagnostics(sums, e, h=1 / 16, k=1 / 64) for e in eps]
    for key in ("Omega_k", "Omega_h", "Omega_kh"):
        vals = [f[key] for f in fr]
        assert vals == sorted(vals)
    assert all(v == 1.0 for v in indicator_diagnostics(sums, math.inf, h=0.1, k=0.1).values())
    with pytest.raises(ValueError):
        indicator_diagnostics(sums, 1.0)


def test_vector_noise_runs(cfg):
    c = cfg.with_(noise=NoiseSpec(M=4, vector_valued=True))
    s = run_path(c, WienerPath.for_spec(c.noise, 1, c.n_steps, c.T))
    assert np.isfinite(s.max_l2_sq) and s.max_l2_sq > 0


def test_constant_initial_field(cfg):
    st = initial_state(cfg, lambda x, y: (0.3 + 0 * x, -1.1 + 0 * x))
    d = discretization(cfg)
    np.testing.assert_allclose(st.u.values[:d.V.n_scalar], 0.3, atol=1e-12)
    np.testing.assert_allclose(st.u.values[d.V.n_scalar:], -1.1, atol=1e-12)


def test_single_step_one_mode_energy():
    c = SchemeConfig(n_side=8, n_steps=1, T=1 / 16, noise=NoiseSpec(M=1), picard_tol=1e-12,
                     check_invariants=True)
    s = run_path(c, WienerPath.for_spec(c.noise, 5, 1, c.T), u0_rule=_tg)
    assert s.invariants[0]["energy_residual"] <= 1e-10


def test_single_step_matches_advance(cfg):
    c = cfg.with_(n_steps=1, T=cfg.k, check_invariants=False)
    path = _path(c, seed=6)
    s = run_path(c, path, u0_rule=_tg)
    manual = advance(initial_state(c, _tg), path, c)
    assert np.array_equal(s.final.u.values, manual.u.values)
    assert s.l2_history.shape == (1,)


def test_history_length(cfg):
    s = run_path(cfg.with_(check_invariants=False), _path(cfg))
    assert s.l2_history.size == s.h1_history.size == s.lap_history.size == cfg.n_steps


def test_zero_noise_indicators_all_one(cfg):
    s = run_path(cfg.with_(diffusion=zero_diffusion(), check_invariants=False), _path(cfg))
    fr = indicator_diagnostics([s], 0.3, h=1 / 8, k=cfg.k)
    assert all(v == 1.0 for v in fr.values())


def test_fixed_point_consistency(cfg):
    # the converged step satisfies the Step II equations to picard_tol
    c = cfg.with_(check_invariants=False)
    d = discretization(c)
    state = initial_state(c, _tg)
    path = _path(c, seed=12)
    new = advance(state, path, c)
    dW = increment_field(path, c.noise, 0)
    fq = noise_field_at_quadrature(d.mesh, d.V, c.diffusion, state.u.values, dW, c.quad_degree)
    split = split_field(d.mesh, d.S, fq, c.linear_tol, c.quad_degree)
    rhs = d.M @ state.u.values + load_vector(d.mesh, d.V, split.eta_q, c.quad_degree)
    mom, div = nonlinear_residual(d, new.u.values, new.r.values, rhs)
    assert math.hypot(np.linalg.norm(mom), np.linalg.norm(div)) <= c.picard_tol * np.linalg.norm(rhs)
