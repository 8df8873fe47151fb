import json

import numpy as np
import pytest

from varldp.coeffs import CoefficientPair
from varldp.models import allen_cahn1d, heat1d_transport, linear_sde, ns2d_periodic, ou
from varldp.sde import (OVERFLOW_GUARD, NoiseConfig, ensemble_summary, ito_defects, ito_identity_check, simulate,
                        tightness_constant, tightness_probe, wilson_interval, write_paths_csv, write_summary)
from varldp.skeleton import Control, TimeGrid, march, solve_skeleton
from varldp.triple import SpectralTriple


def test_noise_config_validation_and_streams():
    with pytest.raises(ValueError):
        NoiseConfig(0)
    cfg = NoiseConfig(2, seed=9)
    g = TimeGrid(1.0, 8)
    a = cfg.increments(g, [0, 1, 2])
    b = cfg.increments(g, [2])
    np.testing.assert_array_equal(a[2], b[0])
    assert not np.allclose(a[0], a[1])


def test_coarsened_increments_are_sums():
    cfg = NoiseConfig(1, 4)
    g = TimeGrid(1.0, 5)
    fine = cfg.increments(g.refine(4), [0])
    coarse = cfg.increments(g, [0], refine=4)
    np.testing.assert_allclose(coarse[0], fine[0].reshape(5, 4, 1).sum(axis=1))


def test_reproducible_and_batch_equals_single_runs():
    pair, triple = heat1d_transport(1.0, 1.0, 0.5, m=8)
    g = TimeGrid(0.5, 20)
    x = np.eye(8)[0]
    noise = NoiseConfig(2, 123)
    a = simulate(triple, pair, 0.1, x, g, noise, n_paths=5)
    b = simulate(triple, pair, 0.1, x, g, noise, n_paths=5)
    np.testing.assert_array_equal(a.states, b.states)
    for p in range(5):
        single = simulate(triple, pair, 0.1, x, g, noise, n_paths=1, path_offset=p)
        # same stream per path; batched BLAS may reorder sums at the last bit
        np.testing.assert_allclose(single.states[0], a.states[p], rtol=0, atol=1e-14)


def test_deterministic_limits(rng):
    pair, triple = allen_cahn1d(16, noise_modes=4)
    g = TimeGrid(1.0, 100)
    x = 0.3 * np.eye(16)[0]
    psi = Control(g, rng.standard_normal((100, 4)))
    ens = simulate(triple, pair, 0.0, x, g, NoiseConfig(4, 0), psi, 2)
    skel = solve_skeleton(triple, pair, psi, x, g, tol=1e-10)
    assert np.abs(ens.states[0] - skel.states).max() <= 5e-10
    free = simulate(triple, pair, 0.0, x, g, NoiseConfig(4, 0), None, 1)
    np.testing.assert_allclose(free.states[0], march(triple, pair, Control.zeros(g, 4), x).states, atol=1e-14)


def test_ou_endpoint_variance():
    a, T, eps, n = 1.0, 1.0, 0.1, 10_000
    pair, triple = ou(a)
    ens = simulate(triple, pair, eps, [0.0], TimeGrid(T, 200), NoiseConfig(1, 2024), n_paths=n)
    y = ens.endpoints[:, 0]
    var = y.var(ddof=1)
    target = eps * (1 - np.exp(-2 * a * T)) / (2 * a)
    se = np.sqrt(np.mean((y - y.mean()) ** 4) - var ** 2) / np.sqrt(n)
    assert abs(var - target) <= 3 * se


def test_sqrt_eps_scaling_for_linear_dynamics():
    pair, triple = linear_sde(2, [[1.0, 0.5], [0.0, 2.0]], [[1.0, 0.0], [0.3, 0.7]])
    g = TimeGrid(1.0, 50)
    x = np.array([1.0, -1.0])
    u0 = march(triple, pair, Control.zeros(g, 2), x).states
    noise = NoiseConfig(2, 5)
    d1 = simulate(triple, pair, 0.1, x, g, noise, n_paths=20).sup_distance(u0)
    d2 = simulate(triple, pair, 0.4, x, g, noise, n_paths=20).sup_distance(u0)
    np.testing.assert_allclose(d2, 2.0 * d1, rtol=1e-12)


def test_ns2d_paths_stay_divergence_free(rng):
    pair, triple = ns2d_periodic(1.0, 4, [[0.5, 0.0], [0.0, 0.5]], 0.3)
    x = rng.standard_normal(triple.dim) / triple.eigenvalues
    ens = simulate(triple, pair, 0.1, x, TimeGrid(0.2, 20), NoiseConfig(pair.noise_dim, 1), n_paths=3)
    div = pair.torus.divergence(ens.states.reshape(-1, triple.dim))
    assert div.max() <= 1e-12


def test_overflow_guard_flags_paths():
    triple = SpectralTriple.from_eigenvalues([1.0])
    pair = CoefficientPair(dim=1, noise_dim=1, A0=lambda t, u: np.ones(1), F=lambda t, v: np.asarray(v) ** 3,
                           g=lambda t: np.ones((1, 1)), exponents_F=((2, 0.6),))
    g = TimeGrid(1.0, 20)
    with np.errstate(over="ignore", invalid="ignore"):
        ens = simulate(triple, pair, 0.01, [100.0], g, NoiseConfig(1, 0), n_paths=3)
    assert ens.flagged.all()
    assert np.all(ens.mr_norms() == OVERFLOW_GUARD)
    rows = tightness_probe(ens, [OVERFLOW_GUARD, 2 * OVERFLOW_GUARD], pair)
    assert all(r["p_hat"] == 0 for r in rows)


def test_control_checks():
    pair, triple = ou()
    g = TimeGrid(1.0, 10)
    with pytest.raises(ValueError):
        simulate(triple, pair, 0.1, [0.0], g, NoiseConfig(1), Control.zeros(TimeGrid(1.0, 5), 1))
    with pytest.raises(ValueError):
        simulate(triple, pair, 0.1, [0.0], g, NoiseConfig(2))
    with pytest.raises(ValueError):
        simulate(triple, pair, -0.1, [0.0], g, NoiseConfig(1))


def test_ito_defect_zero_noise_is_left_point_chain_rule():
    pair, triple = ou()
    g = TimeGrid(1.0, 100)
    ens = simulate(triple, pair, 0.0, [1.0], g, NoiseConfig(1), n_paths=1)
    D = ito_defects(ens, pair)[0]
    u = ens.states[0, :, 0]
    left = np.concatenate([[0.0], np.cumsum(-2 * u[:-1] ** 2 * g.dt)])
    np.testing.assert_allclose(D, u ** 2 - 1 - left, atol=1e-14)
    # first order in dt, like the deterministic check
    fine = simulate(triple, pair, 0.0, [1.0], g.refine(2), NoiseConfig(1), n_paths=1)
    assert np.abs(ito_defects(fine, pair)).max() < 0.6 * np.abs(D).max()


def test_ito_defect_unbiased_on_ou():
    pair, triple = ou()
    rep = ito_identity_check(triple, pair, 0.1, [0.0], TimeGrid(1.0, 2000), NoiseConfig(1, 11), 1000, levels=2)
    assert abs(rep.terminal_mean) <= 3 * rep.terminal_se


def test_pure_noise_identity():
    """A = 0, B = I: E ||Y(T)||^2 - eps T = x^2."""
    triple = SpectralTriple.from_eigenvalues([1.0])
    pair = CoefficientPair(dim=1, noise_dim=1, A0=lambda t, u: np.zeros(1), g=lambda t: np.ones((1, 1)),
                           theta=1.0, M=1.0)
    eps, T, x = 0.2, 1.0, 0.7
    ens = simulate(triple, pair, eps, [x], TimeGrid(T, 50), NoiseConfig(1, 8), n_paths=4000)
    val = ens.endpoints[:, 0] ** 2 - eps * T
    assert abs(val.mean() - x * x) <= 3 * val.std(ddof=1) / np.sqrt(len(val))
    D = ito_defects(ens, pair)
    # with A = 0 the discrete identity is exact except for the dW^2 - dt terms
    dW = ens.increments[:, :, 0]
    np.testing.assert_allclose(D[:, -1], eps * np.sum(dW ** 2 - T / 50, axis=1), atol=1e-12)


def test_wilson_interval():
    lo, hi = wilson_interval(0, 100)
    assert lo == 0 and 0 < hi < 0.05
    lo, hi = wilson_interval(50, 100)
    assert lo < 0.5 < hi


def test_tightness_envelope_with_and_without_control():
    pair, triple = ou()
    g = TimeGrid(1.0, 100)
    free = simulate(triple, pair, 0.1, [0.0], g, NoiseConfig(1, 3), n_paths=3000)
    rows = tightness_probe(free, [2.0, 4.0, 8.0], pair)
    assert all(r["within_envelope"] for r in rows)
    assert rows[0]["C"] == pytest.approx(tightness_constant(pair, [0.0], 1.0, 0.0))
    psi = Control.constant(g, [1.0])
    ctrl = simulate(triple, pair, 0.1, [0.0], g, NoiseConfig(1, 3), psi, 3000)
    rows_c = tightness_probe(ctrl, [2.0, 4.0, 8.0], pair)
    assert rows_c[0]["C"] == pytest.approx(rows[0]["C"] * np.exp(4.0))
    assert all(r["within_envelope"] for r in rows_c)


def test_summary_and_csv(tmp_path):
    pair, triple = ou()
    g = TimeGrid(1.0, 4)
    ens = simulate(triple, pair, 0.1, [0.0], g, NoiseConfig(1, 3), n_paths=3)
    s = ensemble_summary(ens, tightness_probe(ens, [2.0], pair))
    write_summary(s, tmp_path / "s.json")
    loaded = json.loads((tmp_path / "s.json").read_text())
    assert loaded["n_paths"] == 3 and loaded["exceedance"][0]["gamma"] == 2.0
    write_paths_csv(ens, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "path,t,u0" and len(lines) == 1 + 3 * 5
    assert len(ens.trajectories) == 3
