import numpy as np
import pytest

from varldp._spectral import FourierTransform1D, SineTransform, Torus2D
from varldp.coeffs import AssumptionViolation, check_subcriticality
from varldp.models import (MODELS, allen_cahn1d, build_model, heat1d_transport, linear_sde, ns2d_periodic,
                           transport_mu)


def test_linear_sde_rejects_noncoercive_drift():
    with pytest.raises(AssumptionViolation):
        linear_sde(1, 0.0)
    with pytest.raises(AssumptionViolation) as exc:
        linear_sde(2, [[1.0, 0.0], [0.0, -1.0]])
    np.testing.assert_allclose(np.abs(exc.value.witness), [0.0, 1.0])


def test_linear_sde_theta_is_min_symmetric_eigenvalue():
    pair, _ = linear_sde(2, [[1.0, 2.0], [-2.0, 3.0]])
    assert pair.theta == pytest.approx(1.0)  # the skew part drops out


def test_heat1d_headroom():
    assert heat1d_transport(1.0, 1.0)[0].theta == pytest.approx(0.5)
    assert heat1d_transport(2.0, 0.0)[0].theta == pytest.approx(2.0)
    with pytest.raises(AssumptionViolation):
        heat1d_transport(1.0, 1.5)


def test_heat1d_transport_is_skew():
    pair, triple = heat1d_transport(1.0, 1.0, m=8)
    D = np.asarray(pair.B0(0.0, None))[0]
    np.testing.assert_allclose(D, -D.T)


def test_fourier_derivative_matches_nodal_derivative(rng):
    tr = FourierTransform1D(8)
    v = rng.standard_normal(8)
    D = tr.derivative_matrix()
    # differentiate the synthesized series term by term
    x = tr.nodes
    c = np.sqrt(2 / tr.length)
    k = tr.wavenumbers[0::2]
    exact = c * (-(v[0::2] * k) @ np.sin(np.outer(k, x)) + (v[1::2] * k) @ np.cos(np.outer(k, x)))
    np.testing.assert_allclose(tr.synth(D @ v), exact, atol=1e-12)


def test_sine_transform_projects_cubic_exactly(rng):
    m = 6
    tr = SineTransform(m)
    v = rng.standard_normal(m)
    fine = SineTransform(m, n_nodes=4000)
    # a fine Riemann sum of the same projection
    ref = fine.analysis(fine.synth(v) ** 3)
    np.testing.assert_allclose(tr.analysis(tr.synth(v) ** 3), ref, atol=1e-6)


def test_allen_cahn_structure(rng):
    pair, triple = allen_cahn1d(16)
    assert check_subcriticality(pair.exponents_F) == ["critical"]
    np.testing.assert_array_equal(pair.F(0.0, np.zeros(16)), 0.0)
    tr = SineTransform(16)
    for _ in range(20):
        u = rng.standard_normal(16) / np.arange(1, 17)
        lhs = float(pair.F(0.0, u) @ u)
        # <F(u), u> = int u^2 - int u^4 <= ||u||_H^2
        quad = float(u @ u) - tr.weight * np.sum(tr.synth(u) ** 4)
        assert lhs == pytest.approx(quad, rel=1e-10, abs=1e-12)
        assert lhs <= float(u @ u) + 1e-12


def test_allen_cahn_rejects_tiny_m():
    with pytest.raises(ValueError):
        allen_cahn1d(4)


def test_torus_roundtrip_and_norm(rng):
    torus = Torus2D(4)
    v = rng.standard_normal(torus.m)
    np.testing.assert_allclose(torus.from_fourier(torus.to_fourier(v)), v, atol=1e-13)
    up = torus.physical(torus.to_fourier(v))
    l2 = np.sum(up ** 2) * (2 * np.pi / torus.M) ** 2
    assert l2 == pytest.approx(float(v @ v), rel=1e-12)


def test_torus_advection_vjp_matches_finite_differences(rng):
    torus = Torus2D(3)
    v, q, d = rng.standard_normal((3, torus.m))
    h = 1e-6
    fd = (q @ torus.advection(v + h * d, v + h * d) - q @ torus.advection(v - h * d, v - h * d)) / (2 * h)
    assert float(torus.advection_vjp(v, q) @ d) == pytest.approx(fd, rel=1e-7)


def test_transport_mu():
    mu, _ = transport_mu([[1.0, 0.0], [0.0, 1.0]])
    assert mu == pytest.approx(0.5)
    mu, direction = transport_mu([[2.0, 0.0]])
    assert mu == pytest.approx(2.0)
    np.testing.assert_allclose(np.abs(direction), [1.0, 0.0])


def test_ns2d_rejects_strong_transport_with_witness():
    with pytest.raises(AssumptionViolation) as exc:
        ns2d_periodic(1.0, 4, [[np.sqrt(2), 0.0]])
    w = exc.value.witness
    assert w["mu"] == pytest.approx(1.0)
    assert len(w["wavevector"]) == 2


def test_ns2d_energy_conserved_by_advection(rng):
    """RK4 on u' = Phi(u, u) alone: the skew pairing keeps ||u||_H fixed."""
    torus = Torus2D(4)
    u = rng.standard_normal(torus.m) / np.sqrt(torus.eigenvalues)
    u /= np.linalg.norm(u)
    dt, steps = 1e-4, 200
    e0 = float(u @ u)
    f = lambda w: torus.advection(w, w)
    for _ in range(steps):
        k1 = f(u)
        k2 = f(u + 0.5 * dt * k1)
        k3 = f(u + 0.5 * dt * k2)
        k4 = f(u + dt * k3)
        u = u + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert abs(float(u @ u) - e0) / (dt * steps) <= 1e-6


def test_ns2d_transport_columns_are_skew():
    pair, _ = ns2d_periodic(1.0, 3, [[0.3, 0.4], [0.1, -0.2]])
    B0 = np.asarray(pair.B0(0.0, None))
    for b in B0:
        np.testing.assert_allclose(b, -b.T)


def test_registry():
    assert set(MODELS) == {"ou", "linear_sde", "heat1d", "allen_cahn", "ns2d"}
    pair, triple = build_model("heat1d", nu=2.0, b=1.0, m=8)
    assert pair.theta == pytest.approx(1.5)
    with pytest.raises(ValueError):
        build_model("swift_hohenberg")
