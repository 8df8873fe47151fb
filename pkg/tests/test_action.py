import json

import numpy as np
import pytest

from varldp.action import (OptConfig, TargetEvent, adjoint_gradient, endpoint_response, lq_oracle, minimize_functional,
                           minimize_rate, oscillating_family, penalized_objective, point_oracle, rate_along,
                           sublevel_sample, weak_continuity_probe)
from varldp.models import allen_cahn1d, heat1d_transport, linear_sde, ns2d_periodic, ou
from varldp.skeleton import Control, TimeGrid, march

# discrete optimum for OU (a = sigma = T = 1, 100 steps) reaching u(T) >= 1 from 0,
# from the closed-form geometric sum of the implicit step
OU_HALFSPACE_N100 = 1.164119246268252


def _fd(fun, v, h=1e-6):
    g = np.zeros_like(v)
    for j in np.ndindex(v.shape):
        e = np.zeros_like(v)
        e[j] = h
        g[j] = (fun(v + e) - fun(v - e)) / (2 * h)
    return g


# -- events -------------------------------------------------------------------


def test_event_validation():
    with pytest.raises(ValueError):
        TargetEvent.endpoint_ball([1.0], 0.0)
    with pytest.raises(ValueError):
        TargetEvent.endpoint_halfspace([0.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        TargetEvent.from_config({"kind": "path_functional"}, 1)


def test_event_distance_and_membership():
    S = np.array([[0.0, 0.0], [3.0, 4.0]])
    ball = TargetEvent.endpoint_ball([0.0, 0.0], 2.0)
    assert ball.distance(S) == pytest.approx(3.0)
    half = TargetEvent.endpoint_halfspace([0.0, 2.0], 10.0)
    assert half.distance(S) == pytest.approx(1.0)
    assert not ball.contains(S) and TargetEvent.endpoint_ball([3.0, 4.5], 1.0).contains(S)
    batch = np.stack([S, S * 0.1, np.full_like(S, np.nan)])
    np.testing.assert_array_equal(ball.contains(batch), [False, True, False])
    assert TargetEvent.whole_space().distance(S) == 0.0


def test_distance_sq_grad_matches_fd(rng):
    S = rng.standard_normal((4, 3))
    for ev in (TargetEvent.endpoint_ball(np.ones(3), 0.2), TargetEvent.endpoint_halfspace([1.0, -2.0, 0.5], 4.0),
               TargetEvent.path_functional(lambda s: float(np.sum(s[:, 0] ** 2)) - 0.1)):
        fd = _fd(lambda s: ev.distance(s) ** 2, S)
        np.testing.assert_allclose(ev.distance_sq_grad(S), fd, atol=1e-6)


def test_event_from_config_broadcasts():
    ev = TargetEvent.from_config({"kind": "endpoint_ball", "z": 1.0, "delta": 0.1}, 3)
    np.testing.assert_array_equal(ev.z, [1.0, 1.0, 1.0])
    assert ev.as_dict() == {"kind": "endpoint_ball", "z": [1.0, 1.0, 1.0], "delta": 0.1}


# -- action and gradients -----------------------------------------------------


def test_rate_along_elementary_controls():
    pair, triple = ou()
    g = TimeGrid(2.0, 40)
    assert rate_along(triple, pair, Control.zeros(g, 1), [0.0])[0] == 0.0
    val, traj = rate_along(triple, pair, Control.constant(g, [1.5]), [0.0])
    assert val == pytest.approx(0.5 * 1.5 ** 2 * 2.0)
    assert traj.states.shape == (41, 1)


def test_action_only_gradient_is_control_times_dt(rng):
    pair, triple = ou()
    g = TimeGrid(1.0, 20)
    psi = Control(g, rng.standard_normal((20, 1)))
    np.testing.assert_allclose(adjoint_gradient(triple, pair, psi, None, [0.3]), psi.values * g.dt, rtol=1e-14)


@pytest.mark.parametrize("build, x, tol", [
    (lambda: ou(), [0.2], 1e-5),
    (lambda: linear_sde(2, [[1.0, 0.4], [0.0, 2.0]], [[1.0, 0.2], [0.0, 0.5]]), [0.2, -0.3], 1e-5),
    (lambda: allen_cahn1d(8, noise_modes=3), 0.4 * np.eye(8)[0], 1e-4),
    (lambda: heat1d_transport(1.0, 0.8, 0.5, m=8), 0.5 * np.eye(8)[1], 1e-4),
])
def test_adjoint_matches_finite_differences(build, x, tol, rng):
    pair, triple = build()
    g = TimeGrid(0.5, 8)
    psi = Control(g, rng.standard_normal((8, pair.noise_dim)))
    ev = TargetEvent.endpoint_ball(np.full(triple.dim, 1.0), 0.1)
    grad = adjoint_gradient(triple, pair, psi, ev, x, penalty=3.0)
    fd = _fd(lambda v: penalized_objective(triple, pair, Control(g, v), ev, x, 3.0), psi.values)
    assert np.abs(grad - fd).max() / max(1.0, np.abs(fd).max()) <= tol


def test_ns2d_adjoint_matches_finite_differences(rng):
    pair, triple = ns2d_periodic(1.0, 2, [[0.3, 0.2]], 0.3)
    g = TimeGrid(0.5, 5)
    x = rng.standard_normal(triple.dim) / triple.eigenvalues
    psi = Control(g, rng.standard_normal((5, pair.noise_dim)))
    ev = TargetEvent.endpoint_halfspace(np.eye(triple.dim)[0], 2.0)
    grad = adjoint_gradient(triple, pair, psi, ev, x, penalty=3.0)
    fd = _fd(lambda v: penalized_objective(triple, pair, Control(g, v), ev, x, 3.0), psi.values)
    assert np.abs(grad - fd).max() / max(1.0, np.abs(fd).max()) <= 1e-5


# -- oracle -------------------------------------------------------------------


def test_oracle_matches_frozen_geometric_sum():
    pair, triple = ou()
    g = TimeGrid(1.0, 100)
    ev = TargetEvent.endpoint_halfspace([1.0], 1.0)
    assert lq_oracle(triple, pair, ev, [0.0], g) == pytest.approx(OU_HALFSPACE_N100, rel=1e-12)
    assert point_oracle(triple, pair, [1.0], [0.0], g) == pytest.approx(OU_HALFSPACE_N100, rel=1e-12)


def test_oracle_scaling_and_ball_limits():
    pair, triple = linear_sde(2, [[1.0, 0.3], [0.0, 1.5]], [[1.0, 0.0], [0.4, 0.8]])
    g = TimeGrid(1.0, 50)
    x = np.zeros(2)
    z = np.array([0.7, -0.4])
    assert point_oracle(triple, pair, 2 * z, x, g) == pytest.approx(4 * point_oracle(triple, pair, z, x, g))
    tiny = lq_oracle(triple, pair, TargetEvent.endpoint_ball(z, 1e-9), x, g)
    assert tiny == pytest.approx(point_oracle(triple, pair, z, x, g), rel=1e-6)
    assert lq_oracle(triple, pair, TargetEvent.endpoint_ball(z, 2.0), x, g) == 0.0


def test_endpoint_response_is_affine(rng):
    pair, triple = linear_sde(2, [[1.0, 0.3], [0.0, 1.5]], [[1.0, 0.0], [0.4, 0.8]])
    g = TimeGrid(1.0, 10)
    a, L = endpoint_response(triple, pair, [1.0, 2.0], g)
    psi = Control(g, rng.standard_normal((10, 2)))
    np.testing.assert_allclose(march(triple, pair, psi, [1.0, 2.0]).endpoint, a + L @ psi.values.ravel(), atol=1e-13)
    with pytest.raises(ValueError):
        endpoint_response(*reversed(heat1d_transport(1.0, 1.0, m=8)), np.zeros(8), g)


# -- minimum action method ----------------------------------------------------


def test_minimizer_reaches_oracle_on_ou():
    pair, triple = ou()
    g = TimeGrid(1.0, 100)
    ev = TargetEvent.endpoint_halfspace([1.0], 1.0)
    res = minimize_rate(triple, pair, ev, [0.0], g)
    assert res.feasible and res.converged
    assert res.value == pytest.approx(OU_HALFSPACE_N100, rel=5e-3)
    assert res.certificate["global_bound_margin"] > 0


@pytest.mark.parametrize("build, x", [
    (lambda: ou(), [0.5]),
    (lambda: linear_sde(2, 2.0, 1.0), [0.5, 0.1]),
    (lambda: heat1d_transport(1.0, 1.0, 0.0, m=8), 0.5 * np.eye(8)[0]),
    (lambda: allen_cahn1d(8, noise_modes=4), 0.5 * np.eye(8)[0]),
    (lambda: ns2d_periodic(1.0, 2, [[0.3, 0.0]], 0.0), 0.2 * np.ones(24)),
])
def test_rate_vanishes_at_the_deterministic_path(build, x):
    pair, triple = build()
    g = TimeGrid(0.5, 20)
    u0 = march(triple, pair, Control.zeros(g, pair.noise_dim), x).endpoint
    res = minimize_rate(triple, pair, TargetEvent.endpoint_ball(u0, 1e-3), x, g)
    assert res.value <= 1e-6


def test_rate_decreases_as_the_ball_grows():
    pair, triple = allen_cahn1d(8, noise_modes=4)
    g = TimeGrid(0.5, 20)
    z = 0.5 * np.eye(8)[0]
    vals = [minimize_rate(triple, pair, TargetEvent.endpoint_ball(z, d), np.zeros(8), g).value
            for d in (0.05, 0.1, 0.2)]
    assert vals[0] > vals[1] > vals[2] > 0


def test_unreachable_event_gives_infinite_rate():
    # no noise at all: the path from 0 is frozen at 0
    pair, triple = heat1d_transport(1.0, 0.0, 0.0, m=8)
    g = TimeGrid(0.5, 10)
    res = minimize_rate(triple, pair, TargetEvent.endpoint_ball(np.eye(8)[0], 0.1), np.zeros(8), g,
                        OptConfig(stages=2, max_stages=4))
    assert res.value == np.inf and not res.feasible
    assert res.constraint_violation == pytest.approx(0.9)


def test_minimize_functional_linear_cost():
    # inf 1/2||psi||^2 - c u(T) on OU: optimum psi_i = c L_i / dt, value -c^2 W / 2
    pair, triple = ou()
    g = TimeGrid(1.0, 50)
    a, L = endpoint_response(triple, pair, [0.0], g)
    W = float((L @ L.T)[0, 0]) / g.dt
    c = 0.7
    val, psi, _ = minimize_functional(triple, pair, lambda s: -c * s[-1, 0], [0.0], g,
                                      cost_grad=lambda s: np.r_[np.zeros((50, 1)), [[-c]]])
    assert val == pytest.approx(-0.5 * c * c * W, rel=1e-8)
    np.testing.assert_allclose(psi.values.ravel(), c * L.ravel() / g.dt, rtol=1e-6)


def test_rate_result_json(tmp_path):
    pair, triple = ou()
    g = TimeGrid(1.0, 20)
    res = minimize_rate(triple, pair, TargetEvent.endpoint_halfspace([1.0], 0.5), [0.0], g)
    d = json.loads(res.to_json(tmp_path / "r.json").read_text())
    assert d["value"] == pytest.approx(res.value)
    assert {"mr_norm", "endpoint_distance", "skeleton_residual", "global_bound_margin"} <= set(d["certificate"])
    assert d["optimizer_trace"][0] == {"start": 0}


# -- probes -------------------------------------------------------------------


def test_oscillating_family_is_weakly_small():
    g = TimeGrid(1.0, 400)
    base = Control.zeros(g, 2)
    osc = oscillating_family(base, 7, 2.0, direction=1)
    assert np.all(osc.values[:, 0] == 0)
    assert abs(np.sum(osc.values[:, 1]) * g.dt) < 1e-12


def test_weak_continuity_scales_linearly_for_linear_dynamics():
    pair, triple = ou()
    g = TimeGrid(1.0, 512)
    psi = Control.constant(g, [0.5])
    r0 = weak_continuity_probe(triple, pair, psi, [1.0], [4], amplitude=0.0)
    assert r0[0]["mr_distance"] == 0.0
    r1 = weak_continuity_probe(triple, pair, psi, [1.0], [4, 32], amplitude=1.0)
    r2 = weak_continuity_probe(triple, pair, psi, [1.0], [4, 32], amplitude=2.0)
    for a, b in zip(r1, r2):
        assert b["mr_distance"] == pytest.approx(2 * a["mr_distance"], rel=1e-10)
    assert r1[1]["mr_distance"] < r1[0]["mr_distance"]


def test_sublevel_sample_spread(rng):
    pair, triple = allen_cahn1d(8, noise_modes=4)
    g = TimeGrid(0.5, 20)
    x = 0.3 * np.eye(8)[0]
    s0 = sublevel_sample(triple, pair, 0.0, x, g, 10, rng)
    assert s0["n_controls"] == 1 and s0["spread"] == 0.0
    small = sublevel_sample(triple, pair, 0.5, x, g, 10, rng)
    big = sublevel_sample(triple, pair, 2.0, x, g, 10, rng)
    assert small["min_global_margin"] >= 0 and big["min_global_margin"] >= 0
    assert big["max_pairwise_distance"] > small["max_pairwise_distance"]
    with pytest.raises(ValueError):
        sublevel_sample(triple, pair, -1.0, x, g, 3)
