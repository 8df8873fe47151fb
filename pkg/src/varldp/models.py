"""Shipped coefficient pairs.

Every constructor returns ``(pair, triple)`` and rejects parameter choices
that break coercivity, with the offending direction attached to the
exception.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np

from ._spectral import FourierTransform1D, SineTransform, Torus2D
from .coeffs import AssumptionViolation, CoefficientPair
from .triple import SpectralTriple


def _const(value):
    value = np.asarray(value, dtype=float)
    value.setflags(write=False)
    return lambda *args: value


def linear_sde(n: int = 1, a=1.0, sigma=1.0):
    """Finite-dimensional linear SDE ``dY = -a Y dt + sqrt(eps) sigma dW`` on R^n.

    The triple is trivial (all eigenvalues 1, so V = H = V*).  The constant
    diffusion ``sigma`` (shape ``(n, K)``) enters as the forcing term ``g``;
    its Hilbert-Schmidt norm is absorbed into ``phi``:
    ``theta = lambda_min(sym a)``, ``M = 0``, ``phi^2 = |||sigma|||^2 / 2``.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape == (1, 1) and n > 1:
        a = a[0, 0] * np.eye(n)
    if a.shape != (n, n):
        raise ValueError(f"drift matrix must be {n}x{n}")
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim < 2:
        sigma = sigma * np.eye(n) if sigma.ndim == 0 else np.diag(sigma)
    if sigma.shape[0] != n:
        raise ValueError("diffusion matrix must have n rows")
    sym = 0.5 * (a + a.T)
    evals, evecs = np.linalg.eigh(sym)
    if evals[0] <= 0:
        raise AssumptionViolation(
            f"symmetric part of the drift is not positive definite (min eigenvalue {evals[0]:g})",
            witness=evecs[:, 0])
    triple = SpectralTriple(np.ones(n), name="trivial", params={"n": n})
    A0 = _const(np.diag(a)) if np.allclose(a, np.diag(np.diag(a))) else _const(a)
    phi2 = 0.5 * float(np.sum(sigma ** 2))
    pair = CoefficientPair(
        dim=n, noise_dim=sigma.shape[1], A0=A0, g=_const(sigma),
        theta=float(evals[0]), M=0.0, phi=lambda t: np.sqrt(phi2),
        name="linear_sde", params={"n": n, "a": a.tolist(), "sigma": sigma.tolist()})
    return pair, triple


def ou(a: float = 1.0, sigma: float = 1.0):
    """Scalar Ornstein-Uhlenbeck process."""
    pair, triple = linear_sde(1, a, sigma)
    pair.params.update(model="ou")
    return pair, triple


def heat1d_transport(nu: float = 1.0, b: float = 1.0, g_lip: float = 0.0, m: int = 32,
                     length: float = 2 * np.pi):
    """Heat equation on the circle with transport noise ``b d/dx``.

    ``A0 = -nu d^2/dx^2``, noise column 0 is ``b u_x``.  With ``g_lip > 0`` a
    second column ``g_lip * P[sin(u)]`` is added (Lipschitz in H).  Declared
    ``theta = nu - b^2/2``, ``M = g_lip^2/2``, ``phi = 0``.
    """
    if not b * b < 2 * nu:
        raise AssumptionViolation(
            f"transport noise too strong: b^2 = {b * b:g} >= 2 nu = {2 * nu:g}",
            witness={"b": b, "nu": nu})
    triple = SpectralTriple.periodic1d(m, length)
    tr = FourierTransform1D(m, length)
    D = tr.derivative_matrix()
    K = 2 if g_lip > 0 else 1
    B0 = np.zeros((K, m, m))
    B0[0] = b * D
    kw = {}
    if g_lip > 0:
        def G(t, v):
            out = np.zeros(np.shape(v) + (K,))
            out[..., 1] = g_lip * tr.analysis(np.sin(tr.synth(v)))
            return out

        def G_vjp(t, v, q, psi):
            return g_lip * psi[1] * tr.analysis(np.cos(tr.synth(v)) * tr.synth(q))

        kw = dict(G=G, G_vjp=G_vjp, exponents_G=((0, Fraction(3, 4)),))
    pair = CoefficientPair(
        dim=m, noise_dim=K, A0=_const(nu * triple.eigenvalues), B0=_const(B0),
        theta=nu - 0.5 * b * b, M=0.5 * g_lip ** 2,
        name="heat1d", params={"nu": nu, "b": b, "g_lip": g_lip, "m": m, "length": length}, **kw)
    return pair, triple


def allen_cahn1d(m: int = 32, scale: float = 1.0, sigma: float = 1.0,
                 noise_modes: int | None = None, length: float = 1.0):
    """Allen-Cahn ``u' = u_xx + scale (u - u^3)`` with Dirichlet conditions.

    The cubic is evaluated on ``2m`` interior nodes, which projects ``u^3``
    onto the retained sine modes exactly.  Additive noise ``sigma`` acts on
    the first ``noise_modes`` modes.  Exponents ``(rho, beta) = (2, 2/3)``
    sit exactly on the critical line.
    """
    if m < 8:
        raise ValueError("allen_cahn1d needs m >= 8")
    K = min(m, 16) if noise_modes is None else int(noise_modes)
    triple = SpectralTriple.dirichlet1d(m, length)
    tr = SineTransform(m, length)
    g = np.zeros((m, K))
    g[np.arange(K), np.arange(K)] = sigma

    def F(t, v):
        return scale * (np.asarray(v) - tr.analysis(tr.synth(v) ** 3))

    def F_vjp(t, v, q):
        return scale * (np.asarray(q) - 3.0 * tr.analysis(tr.synth(v) ** 2 * tr.synth(q)))

    phi = np.sqrt(0.5 * sigma ** 2 * K)
    pair = CoefficientPair(
        dim=m, noise_dim=K, A0=_const(triple.eigenvalues), F=F, F_vjp=F_vjp, g=_const(g),
        exponents_F=((2, Fraction(2, 3)),), theta=1.0, M=float(scale), phi=lambda t: phi,
        name="allen_cahn", params={"m": m, "scale": scale, "sigma": sigma, "noise_modes": K,
                                   "length": length})
    return pair, triple


def transport_mu(b_fields) -> tuple[float, np.ndarray]:
    """Largest ``mu`` with ``1/2 sum_n (b_n . xi)^2 = mu |xi|^2`` over unit ``xi``."""
    b = np.atleast_2d(np.asarray(b_fields, dtype=float))
    Q = 0.5 * b.T @ b
    evals, evecs = np.linalg.eigh(Q)
    return float(evals[-1]), evecs[:, -1]


def ns2d_periodic(nu: float = 1.0, cutoff: int = 16, b_fields=None, g_lip: float = 0.0,
                  grid: int | None = None):
    """2D Navier-Stokes on the 2 pi torus with constant transport noise.

    ``A0 = -nu Delta``, ``F(u) = Phi(u, u) = -P div(u (x) u)``, noise columns
    ``P[(b_n . grad) u]`` and, when ``g_lip > 0``, one more column
    ``g_lip * u``.  The transport fields must satisfy
    ``1/2 sum_n (b_n . xi)^2 <= mu |xi|^2`` with ``mu < nu``; declared
    ``theta = nu - mu``.
    """
    b = np.zeros((0, 2)) if b_fields is None else np.atleast_2d(np.asarray(b_fields, dtype=float))
    mu, direction = transport_mu(b) if len(b) else (0.0, np.array([1.0, 0.0]))
    torus = Torus2D(cutoff, grid)
    if mu >= nu:
        kq = 0.5 * ((torus.kvec @ b.T) ** 2).sum(axis=1) / torus.ksq
        worst = torus.kvec[int(np.argmax(kq))]
        raise AssumptionViolation(
            f"transport noise violates mu < nu: mu = {mu:g}, nu = {nu:g}",
            witness={"direction": direction.tolist(), "wavevector": worst.tolist(), "mu": mu})
    labels = [(int(k[0]), int(k[1]), part) for k in torus.kvec for part in ("cos", "sin")]
    triple = SpectralTriple(torus.eigenvalues, labels=labels, name="ns2d", params={"cutoff": cutoff})
    m = torus.m
    K = len(b) + (1 if g_lip > 0 else 0)
    if K == 0:
        K = 1  # keep a (zero) noise direction so controls have a home
    B0 = np.zeros((K, m, m))
    for n, bn in enumerate(b):
        B0[n] = torus.transport_matrix(bn)
    kw = {}
    if g_lip > 0:
        B0[len(b)] = g_lip * np.eye(m)

    def F(t, v):
        return torus.advection(v, v)

    def F_vjp(t, v, q):
        return torus.advection_vjp(v, q)

    pair = CoefficientPair(
        dim=m, noise_dim=K, A0=_const(nu * torus.eigenvalues), B0=_const(B0), F=F, F_vjp=F_vjp,
        exponents_F=((1, Fraction(3, 4)),), theta=nu - mu, M=0.5 * g_lip ** 2,
        name="ns2d", params={"nu": nu, "cutoff": cutoff, "b_fields": b.tolist(), "g_lip": g_lip,
                             "mu": mu}, **kw)
    object.__setattr__(pair, "torus", torus)
    return pair, triple


MODELS = {
    "ou": ou,
    "linear_sde": linear_sde,
    "heat1d": heat1d_transport,
    "allen_cahn": allen_cahn1d,
    "ns2d": ns2d_periodic,
}


def build_model(name: str, **params):
    """Construct a shipped model by its config name."""
    try:
        ctor = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return ctor(**params)
