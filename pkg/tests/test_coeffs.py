from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from varldp.coeffs import (AssumptionViolation, CoefficientPair, check_subcriticality, probe_coercivity_A0B0,
                           probe_coercivity_AB, probe_lipschitz, sample_directions)
from varldp.models import allen_cahn1d, heat1d_transport, linear_sde, ns2d_periodic
from varldp.triple import SpectralTriple


def test_subcriticality_exact_table():
    table = [(1, Fraction(3, 4)), (0, Fraction(9, 10)), (2, Fraction(7, 10)), (2, Fraction(2, 3))]
    assert check_subcriticality(table) == ["critical", "subcritical", "violated", "critical"]


def test_subcriticality_snaps_floats_and_strings():
    assert check_subcriticality([(2, 2 / 3), (1, 0.75), ("2", "2/3")]) == ["critical"] * 3


def test_subcriticality_rejects_out_of_range():
    with pytest.raises(ValueError):
        check_subcriticality([(1, 0.5)])
    with pytest.raises(ValueError):
        check_subcriticality([(-1, 0.75)])


@given(st.fractions(min_value=0, max_value=20), st.fractions(min_value=Fraction(1, 2), max_value=1))
def test_critical_line_is_exact(rho, beta):
    if not Fraction(1, 2) < beta < 1:
        return
    critical_beta = (1 + 1 / (1 + rho)) / 2
    verdict = check_subcriticality([(rho, beta)])[0]
    expected = "critical" if beta == critical_beta else "subcritical" if beta < critical_beta else "violated"
    assert verdict == expected


def test_pair_validation():
    with pytest.raises(AssumptionViolation):
        CoefficientPair(dim=1, noise_dim=1, A0=lambda t, u: np.ones(1), theta=0.0)
    with pytest.raises(AssumptionViolation):
        CoefficientPair(dim=1, noise_dim=1, A0=lambda t, u: np.ones(1), M=-1.0)
    with pytest.raises(AssumptionViolation) as exc:
        CoefficientPair(dim=1, noise_dim=1, A0=lambda t, u: np.ones(1), exponents_F=((2, 0.9),))
    assert exc.value.witness == (2, 0.9)


def test_sample_directions_are_unit(rng):
    t = SpectralTriple.dirichlet1d(16)
    V = sample_directions(t, 200, rng)
    np.testing.assert_allclose(np.linalg.norm(V, axis=1), 1.0)
    # the spike half hits single modes
    assert np.sum(np.count_nonzero(V, axis=1) == 1) > 50


@pytest.mark.parametrize("build, theta", [
    (lambda: linear_sde(1, 1.0, 1.0), 1.0),
    (lambda: linear_sde(2, np.diag([1.0, 2.0]), 1.0), 1.0),
    (lambda: heat1d_transport(1.0, 1.0, 0.0, m=16), 0.5),
    (lambda: heat1d_transport(1.0, 0.0, 0.0, m=16), 1.0),
])
def test_coercivity_probe_recovers_theta(build, theta, rng):
    pair, triple = build()
    p = probe_coercivity_AB(pair, triple, 1.0, 4000, rng)
    assert p.theta_hat == pytest.approx(theta, abs=1e-8)
    assert p.certified and not p.falsified


def test_every_shipped_pair_passes_its_declared_theta(rng):
    for pair, triple in (heat1d_transport(1.0, 1.0, 0.5, m=16), allen_cahn1d(16), ns2d_periodic(1.0, 4, [[0.5, 0.5]], 0.3)):
        p = probe_coercivity_AB(pair, triple, 1.0, 10_000, rng)
        assert p.theta_hat >= pair.theta - 1e-8, pair.name


def test_overclaimed_theta_is_caught(rng):
    pair, triple = heat1d_transport(1.0, 1.0, 0.0, m=16)
    bad = CoefficientPair(dim=pair.dim, noise_dim=pair.noise_dim, A0=pair.A0, B0=pair.B0, theta=0.9)
    p = probe_coercivity_AB(bad, triple, 1.0, 2000, rng)
    assert not p.certified
    # the witness is a high-frequency mode where transport noise eats the dissipation
    assert np.linalg.norm(p.witness_v) > 0


def test_a0b0_probe_transport_headroom(rng):
    pair, triple = heat1d_transport(1.0, 1.0, 0.0, m=16)
    out = probe_coercivity_A0B0(pair, triple, 1.0, 1.0, 2000, rng)
    assert out["theta_hat"] == pytest.approx(0.5, abs=1e-8)


def test_lipschitz_probe_stable_and_bounded(rng):
    pair, triple = allen_cahn1d(16)
    p = probe_lipschitz(pair, triple, "F", 1.0, 1.0, 2000, rng)
    assert np.isfinite(p.c_hat) and p.c_hat > 0
    q = probe_lipschitz(pair, triple, "A0", 1.0, 1.0, 500, rng)
    assert q.c_hat == 0.0  # A0 ignores the state


def test_lipschitz_probe_needs_exponents():
    t = SpectralTriple.dirichlet1d(4)
    pair = CoefficientPair(dim=4, noise_dim=1, A0=lambda s, u: t.eigenvalues, F=lambda s, v: np.sin(v))
    with pytest.raises(AssumptionViolation):
        probe_lipschitz(pair, t, "F", 1.0, 1.0, 10)


def test_drift_and_noise_batch_shapes(rng):
    pair, triple = heat1d_transport(1.0, 0.5, 0.5, m=8)
    V = rng.standard_normal((5, 8))
    assert pair.drift(0.0, V).shape == (5, 8)
    assert pair.noise(0.0, V).shape == (5, 8, 2)
    single = np.stack([pair.noise(0.0, v) for v in V])
    np.testing.assert_allclose(pair.noise(0.0, V), single)


def test_noise_scaling():
    pair, triple = linear_sde(2, 1.0, [[1.0, 0.0], [0.0, 2.0]])
    half = pair.with_noise_scale(0.5)
    np.testing.assert_allclose(half.noise(0.0, np.zeros(2)), 0.5 * pair.noise(0.0, np.zeros(2)))
    assert pair.phi_l2(2.0) == pytest.approx(np.sqrt(2.0 * 0.5 * 5.0))
