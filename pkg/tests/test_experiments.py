import csv
import math

import numpy as np
import pytest

from stochns.experiments import (
    ErrorTable,
    StudyError,
    _reduce,
    bootstrap_slopes,
    check_space_levels,
    check_time_levels,
    fit_rate,
    fit_slope,
    indicator_study,
    inf_sup_constant,
    map_paths,
    prolong,
    prolongation_matrix,
    space_convergence_study,
    steps_for,
    taylor_green_problem,
    time_convergence_study,
    write_loglog_svg,
    write_rates_csv,
    write_samples_csv,
    write_table_csv,
)
from stochns.mesh import build_periodic_uniform_mesh
from stochns.noise import zero_diffusion
from stochns.spaces import FieldCoefficients, SpaceKind, build_dof_map, compute_norm, evaluate_field
from stochns.stepper import SchemeConfig


def _dm(n, space=SpaceKind.VelocityP2Vector):
    return build_dof_map(build_periodic_uniform_mesh(n), space)


@pytest.mark.parametrize("space", list(SpaceKind))
def test_prolongation_is_exact(space, rng):
    c, f = _dm(4, space), _dm(8, space)
    vals = rng.standard_normal(c.n_global)
    fine = prolong(vals, c, f)
    pts = rng.random((40, 2))
    coarse = FieldCoefficients(space, vals)
    np.testing.assert_allclose(evaluate_field(f.mesh, f, fine, pts),
                               evaluate_field(c.mesh, c, coarse, pts), atol=1e-12)


def test_prolongation_rejects_non_nested():
    with pytest.raises(ValueError):
        prolongation_matrix(_dm(4), _dm(6))
    with pytest.raises(ValueError):
        prolongation_matrix(_dm(4), _dm(8, SpaceKind.PressureP1ZeroMean))


def test_level_checks():
    assert steps_for(1.0, 2**-3) == 8
    with pytest.raises(ValueError):
        steps_for(1.0, 0.3)
    counts, finest = check_time_levels(1.0, [2**-3, 2**-5, 2**-4])
    assert counts == [8, 16, 32] and finest == 64
    assert check_space_levels(1.0, [0.25, 0.125]) == [4, 8]
    with pytest.raises(ValueError):
        check_space_levels(1.0, [1 / 4, 1 / 6])
    with pytest.raises(ValueError):
        check_time_levels(1.0, [])


def test_fit_slope_exact():
    h = np.array([0.5, 0.25, 0.125, 0.0625])
    slope, icpt, res = fit_slope(h, 3.0 * h**2)
    assert slope == pytest.approx(2.0, abs=1e-12)
    assert icpt == pytest.approx(math.log(3.0), abs=1e-12)
    assert res < 1e-12


def test_fit_rate_requires_three_levels_and_skips_zero():
    est = {"EAu": np.array([1.0, 0.5]), "EBu": np.array([1.0, 0.5]), "Ep": np.array([1.0, 0.5])}
    t = ErrorTable("time", [0.5, 0.25], est, est, 4, 0, [])
    with pytest.raises(ValueError):
        fit_rate(t)
    est = {"EAu": np.array([1.0, 0.5, 0.25]), "EBu": np.array([1.0, 0.0, 0.25]), "Ep": np.array([4.0, 1.0, 0.25])}
    fits = fit_rate(ErrorTable("time", [0.5, 0.25, 0.125], est, est, 4, 0, []))
    assert set(fits) == {"EAu", "Ep"}
    assert fits["Ep"].slope == pytest.approx(2.0)


def test_map_paths_serial_equals_parallel():
    serial = map_paths(lambda i: [[float(i), 1.0, 2.0]], lambda i: (i,), 5, 1)
    par = map_paths(lambda i: [[float(i), 1.0, 2.0]], lambda i: (i,), 5, 2)
    assert serial == par
    assert [r[0] for r in par] == list(range(5))


def _flaky(i):
    if i == 3:
        raise ValueError("boom")
    return [[1.0, 1.0, 1.0]]


def test_failure_policy():
    res = map_paths(_flaky, lambda i: (i,), 200, 1)
    table = _reduce("time", [0.1], res, 200, 0)
    assert table.n_paths == 199 and table.failures[0][0] == 3
    assert table.failure_rate == pytest.approx(1 / 200)
    res = map_paths(_flaky, lambda i: (i,), 10, 1)
    with pytest.raises(StudyError):
        _reduce("time", [0.1], res, 10, 0)


def test_reduce_delta_method():
    rows = [[[1.0, 4.0, 9.0]], [[3.0, 4.0, 9.0]]]
    t = _reduce("space", [0.5], [(i, r, None) for i, r in enumerate(rows)], 2, 7)
    assert t.estimates["EAu"][0] == pytest.approx(math.sqrt(2.0))
    assert t.estimates["EBu"][0] == 2.0
    assert t.stderr["EBu"][0] == 0.0
    assert t.stderr["EAu"][0] == pytest.approx(np.std([1, 3], ddof=1) / (2 * math.sqrt(2) * math.sqrt(2)))


def test_taylor_green_forcing_matches_hand_derivation(oracle):
    _, _, _, f = taylor_green_problem(1.0)
    pts = np.array(oracle["taylor_green_points"])
    got = np.stack(f(pts[:, 0], pts[:, 1]), -1)
    np.testing.assert_allclose(got, oracle["taylor_green_forcing"], atol=1e-10)


def test_taylor_green_velocity_divergence_free():
    u, grad, p, _ = taylor_green_problem()
    g = grad(np.array([0.3, 0.7]), np.array([0.1, 0.45]))
    np.testing.assert_allclose(g[..., 0, 0] + g[..., 1, 1], 0.0, atol=1e-14)


@pytest.mark.parametrize("n", [4, 8])
def test_inf_sup_oracle(n, oracle):
    assert inf_sup_constant(n) == pytest.approx(oracle["inf_sup"][str(n)], rel=1e-9)


@pytest.fixture(scope="module")
def small_cfg():
    return SchemeConfig(n_side=4, n_steps=4, T=0.25)


def test_small_time_study_reproducible(small_cfg):
    a = time_convergence_study(small_cfg, [2**-4, 2**-5, 2**-6], 3, 11)
    b = time_convergence_study(small_cfg, [2**-4, 2**-5, 2**-6], 3, 11, parallel=2)
    assert a.levels == sorted(a.levels, reverse=True)
    for name in a.estimates:
        assert np.array_equal(a.estimates[name], b.estimates[name])
        assert np.all(a.estimates[name] > 0)


def test_small_space_study(small_cfg, tmp_path):
    t = space_convergence_study(small_cfg, [0.5, 0.25, 0.125], 2, 5)
    assert t.levels == [0.5, 0.25, 0.125]
    write_table_csv(t, tmp_path / "e.csv")
    rows = list(csv.DictReader(open(tmp_path / "e.csv")))
    assert len(rows) == 9 and rows[0]["axis"] == "space"
    write_rates_csv("space", fit_rate(t), tmp_path / "r.csv")
    assert len(open(tmp_path / "r.csv").read().splitlines()) == 4
    write_loglog_svg(t, tmp_path / "p.svg")
    svg = (tmp_path / "p.svg").read_text()
    assert svg.startswith("<svg") and "slope 2" in svg


def test_indicator_study_limits(small_cfg):
    out = indicator_study(small_cfg, 3, 1, [0.1, 1.0, 10.0, math.inf])
    assert all(v == 1.0 for v in out[math.inf].values())
    for key in out[0.1]:
        vals = [out[e][key] for e in (0.1, 1.0, 10.0)]
        assert vals == sorted(vals)


def test_prolong_constant_and_norm(rng):
    c, f = _dm(4), _dm(16)
    const = np.ones(c.n_global)
    np.testing.assert_allclose(prolong(const, c, f).values, 1.0, atol=1e-14)
    vals = rng.standard_normal(c.n_global)
    assert compute_norm(f.mesh, f, prolong(vals, c, f)) == pytest.approx(compute_norm(c.mesh, c, vals), rel=1e-12)


def test_fit_slope_examples(rng):
    assert fit_slope([1 / 4, 1 / 8, 1 / 16], [0.01, 0.0025, 0.000625])[0] == pytest.approx(2.0, abs=1e-12)
    assert fit_slope([1 / 4, 1 / 8, 1 / 16], [0.3, 0.3, 0.3])[0] == pytest.approx(0.0, abs=1e-12)
    k = 2.0 ** -np.arange(3, 9)
    noisy = 0.7 * k**0.5 * np.exp(0.02 * rng.standard_normal(k.size))
    assert abs(fit_slope(k, noisy)[0] - 0.5) <= 0.05


def test_zero_noise_studies_vanish(small_cfg):
    quiet = small_cfg.with_(diffusion=zero_diffusion())
    t = time_convergence_study(quiet, [2**-3, 2**-4], 2, 0)
    assert all(not np.any(v) for v in t.estimates.values())


def test_picard_tolerance_robustness(small_cfg):
    levels = [2**-4, 2**-5]
    a = time_convergence_study(small_cfg, levels, 4, 3)
    b = time_convergence_study(small_cfg.with_(picard_tol=small_cfg.picard_tol / 2), levels, 4, 3)
    for name in a.estimates:
        assert np.all(np.abs(a.estimates[name] - b.estimates[name]) <= a.stderr[name] + 1e-12)


def test_stderr_shrinks_with_paths(small_cfg):
    few = time_convergence_study(small_cfg, [2**-3], 8, 1)
    many = time_convergence_study(small_cfg, [2**-3], 32, 1)
    ratio = few.stderr["EAu"][0] / many.stderr["EAu"][0]
    # sqrt(4) = 2 in expectation; wide band for an 8-path estimate
    assert 1.0 < ratio < 4.0


def test_bootstrap_and_samples(small_cfg, tmp_path):
    t = time_convergence_study(small_cfg, [2**-3, 2**-4, 2**-5], 6, 2)
    assert t.samples.shape == (6, 3, 3)
    np.testing.assert_allclose(np.sqrt(t.samples.mean(0)[:, 0]), t.estimates["EAu"], rtol=1e-14)
    ci = bootstrap_slopes(t, n_boot=200, seed=1)
    slope = fit_rate(t)["EAu"].slope
    assert ci["EAu"][0] <= slope <= ci["EAu"][1]
    assert bootstrap_slopes(t, n_boot=200, seed=1) == ci
    write_samples_csv(t, tmp_path / "s.csv")
    assert len(open(tmp_path / "s.csv").read().splitlines()) == 1 + 6 * 3 * 3
