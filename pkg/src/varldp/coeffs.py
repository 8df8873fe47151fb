"""Coefficient pairs (A, B) in quasilinear split form and probes for their
structural conditions.

    A(t, v) = A0(t, v) v - F(t, v) - f(t)
    B(t, v) = B0(t, v) v + G(t, v) + g(t)

Vectors are coefficient arrays of length ``m`` in the eigenbasis of a
:class:`~varldp.triple.SpectralTriple`; noise matrices are ``(m, K)`` arrays
whose columns are the images of the ``K`` retained noise directions.

The conditions on (A, B) are universally quantified over V, so they cannot
be decided numerically.  The probes here sample adversarially (smooth
Gaussian directions plus single-mode spikes) and return the worst ratio seen
together with the sample that produced it: a value below the declared
constant is a falsification witness, anything else is empirical support.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

from .triple import SpectralTriple

SUBCRITICAL = "subcritical"
CRITICAL = "critical"
VIOLATED = "violated"


class AssumptionViolation(ValueError):
    """A coefficient pair fails one of the structural conditions.

    ``witness`` carries whatever made the check fail (a sample vector, a
    wavevector, an exponent pair).
    """

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


def _zero_scalar(t):
    return 0.0


@dataclass(frozen=True, eq=False)
class CoefficientPair:
    """Callables of the quasilinear split plus declared exponents/constants.

    Shapes (``...`` are optional leading batch axes, supported by every
    shipped model):

    * ``A0(t, u)`` -> ``(m,)`` diagonal or ``(m, m)`` matrix
    * ``B0(t, u)`` -> ``(K, m, m)``; column ``n`` of ``B0(t,u) v`` is ``B0[n] @ v``
    * ``F(t, v)`` -> ``(..., m)``,  ``G(t, v)`` -> ``(..., m, K)``
    * ``f(t)`` -> ``(m,)``,  ``g(t)`` -> ``(m, K)``

    ``None`` means the term is absent.  ``semilinear`` declares that ``A0``
    and ``B0`` ignore their state argument.  ``F_vjp(t, v, q)`` and
    ``G_vjp(t, v, q, psi)`` optionally return the gradients in ``v`` of
    ``<q, F(t, v)>`` and ``<q, G(t, v) psi>``; without them a
    finite-difference Jacobian is used.
    """

    dim: int
    noise_dim: int
    A0: Callable
    B0: Optional[Callable] = None
    F: Optional[Callable] = None
    G: Optional[Callable] = None
    f: Optional[Callable] = None
    g: Optional[Callable] = None
    exponents_F: tuple = ()
    exponents_G: tuple = ()
    theta: float = 1.0
    M: float = 0.0
    phi: Callable = _zero_scalar
    semilinear: bool = True
    F_vjp: Optional[Callable] = None
    G_vjp: Optional[Callable] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1 or self.noise_dim < 1:
            raise ValueError("dim and noise_dim must be positive")
        if not self.theta > 0:
            raise AssumptionViolation(f"declared theta must be > 0, got {self.theta}", witness=self.theta)
        if self.M < 0:
            raise AssumptionViolation(f"declared M must be >= 0, got {self.M}", witness=self.M)
        for rho, beta in tuple(self.exponents_F) + tuple(self.exponents_G):
            if check_subcriticality([(rho, beta)])[0] == VIOLATED:
                raise AssumptionViolation(f"exponent pair (rho={rho}, beta={beta}) is supercritical",
                                          witness=(rho, beta))

    @property
    def exponents(self):
        return tuple(self.exponents_F) + tuple(self.exponents_G)

    @property
    def is_linear(self) -> bool:
        """No state-dependent lower-order terms and no quasilinearity."""
        return self.semilinear and self.F is None and self.G is None

    # -- evaluation --------------------------------------------------------

    def apply_A0(self, t, u, v):
        a = np.asarray(self.A0(t, u), dtype=float)
        return a * v if a.ndim == 1 else v @ a.T

    def apply_B0(self, t, u, v):
        """``B0(t, u) v`` as a noise matrix of shape ``(..., m, K)``."""
        v = np.asarray(v, dtype=float)
        if self.B0 is None:
            return np.zeros(v.shape + (self.noise_dim,))
        b = np.asarray(self.B0(t, u), dtype=float)
        return np.einsum("kij,...j->...ik", b, v)

    def drift(self, t, v, u=None):
        """``-A(t, v)``; ``u`` overrides the quasilinear argument."""
        u = v if u is None else u
        out = -self.apply_A0(t, u, v)
        if self.F is not None:
            out = out + self.F(t, v)
        if self.f is not None:
            out = out + self.f(t)
        return out

    def noise(self, t, v, u=None):
        """``B(t, v)`` as an ``(..., m, K)`` noise matrix."""
        u = v if u is None else u
        out = self.apply_B0(t, u, v)
        if self.G is not None:
            out = out + self.G(t, v)
        if self.g is not None:
            out = out + self.g(t)
        return out

    def phi_l2(self, T: float) -> float:
        """``||phi||_{L^2(0,T)}``."""
        val, _ = integrate.quad(lambda s: float(self.phi(s)) ** 2, 0.0, T, limit=200)
        return float(np.sqrt(val))

    def with_noise_scale(self, s: float) -> "CoefficientPair":
        """The pair (A, s B): every noise term multiplied by ``s``."""
        def scaled(fn):
            return None if fn is None else (lambda *a: s * np.asarray(fn(*a)))
        return _replace(self, B0=scaled(self.B0), G=scaled(self.G), g=scaled(self.g),
                        G_vjp=None if self.G_vjp is None else (lambda t, v, q, p: s * self.G_vjp(t, v, q, p)),
                        name=f"{self.name}*{s:g}")


def _replace(pair, **kw):
    from dataclasses import replace
    return replace(pair, **kw)


# ---------------------------------------------------------------------------
# subcriticality


def _as_fraction(x) -> Fraction:
    if isinstance(x, Rational):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    x = float(x)
    # snap to the simplest rational with the same double, so 2/3 stays 2/3
    snapped = Fraction(x).limit_denominator(10 ** 9)
    return snapped if float(snapped) == x else Fraction(x)


def check_subcriticality(exponents: Sequence) -> list:
    """Classify each ``(rho, beta)`` against ``2 beta <= 1 + 1/(1 + rho)``.

    Arithmetic is exact on rationals.  Float inputs are first snapped to the
    simplest fraction that rounds to the same double.
    """
    verdicts = []
    for rho, beta in exponents:
        r, b = _as_fraction(rho), _as_fraction(beta)
        if r < 0:
            raise ValueError(f"rho must be >= 0, got {rho}")
        if not (Fraction(1, 2) < b < 1):
            raise ValueError(f"beta must lie in (1/2, 1), got {beta}")
        lhs, rhs = 2 * b, 1 + 1 / (1 + r)
        verdicts.append(CRITICAL if lhs == rhs else SUBCRITICAL if lhs < rhs else VIOLATED)
    return verdicts


# ---------------------------------------------------------------------------
# sampling


def sample_directions(triple: SpectralTriple, n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-H-norm test vectors: half smooth Gaussians, half single-mode spikes.

    The Gaussian modes have standard deviation ``lam_k^{-1/2}``; spikes pick a
    mode uniformly, so rough directions are as likely as smooth ones.
    """
    m = triple.dim
    out = rng.standard_normal((n, m)) / np.sqrt(triple.eigenvalues)
    spikes = rng.random(n) < 0.5
    idx = rng.integers(0, m, size=n)
    out[spikes] = 0.0
    out[spikes, idx[spikes]] = rng.choice([-1.0, 1.0], size=spikes.sum())
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out


def _sample_times(T, n, rng):
    return rng.uniform(0.0, T, size=n)


@dataclass
class CoercivityProbe:
    theta_hat: float
    declared_theta: float
    witness_t: float
    witness_v: np.ndarray
    n_samples: int
    tol: float = 1e-8

    @property
    def certified(self) -> bool:
        return self.theta_hat >= self.declared_theta - self.tol

    @property
    def falsified(self) -> bool:
        """A sample with negative ratio: no theta > 0 can hold."""
        return self.theta_hat < 0

    def as_dict(self):
        return {"theta_hat": self.theta_hat, "declared_theta": self.declared_theta,
                "certified": self.certified, "falsified": self.falsified,
                "witness_t": self.witness_t, "witness_v": self.witness_v.tolist(),
                "n_samples": self.n_samples}


def _batched(pair, fn_name, t, V):
    """Evaluate a pair method on a batch, looping when A0/B0 need the state."""
    fn = getattr(pair, fn_name)
    if pair.semilinear:
        return fn(t, V)
    return np.stack([fn(t, v) for v in V])


def probe_coercivity_AB(pair: CoefficientPair, triple: SpectralTriple, T: float = 1.0,
                        n_samples: int = 10_000, rng=None, amplitudes=(0.1, 10.0),
                        tol: float = 1e-8) -> CoercivityProbe:
    """Worst sampled ratio for ``<A v, v> - 1/2 |||B v|||^2 >= theta ||v||_V^2 - M ||v||_H^2 - phi^2``.

    Returns ``theta_hat = min (<A(t,v),v> - 1/2|||B(t,v)|||^2 + M||v||_H^2 + phi(t)^2) / ||v||_V^2``.
    ``amplitudes`` is the log-uniform range of ``||v||_H`` (the condition is
    not homogeneous once F, G or forcing are present).
    """
    rng = np.random.default_rng(rng)
    V = sample_directions(triple, n_samples, rng)
    lo, hi = amplitudes
    V *= np.exp(rng.uniform(np.log(lo), np.log(hi), size=(n_samples, 1)))
    ts = _sample_times(T, n_samples, rng)
    ratios = np.empty(n_samples)
    # group samples into a few time slices so callables see batches
    n_slices = min(16, n_samples)
    slices = np.array_split(np.arange(n_samples), n_slices)
    for sl in slices:
        t = float(ts[sl[0]])
        ts[sl] = t
        Vs = V[sl]
        Av = -_batched(pair, "drift", t, Vs)
        Bv = _batched(pair, "noise", t, Vs)
        form = np.sum(Av * Vs, axis=1) - 0.5 * np.sum(Bv ** 2, axis=(1, 2))
        form += pair.M * triple.sqnorm(Vs, "H") + float(pair.phi(t)) ** 2
        ratios[sl] = form / triple.sqnorm(Vs, "V")
    i = int(np.argmin(ratios))
    return CoercivityProbe(float(ratios[i]), pair.theta, float(ts[i]), V[i].copy(), n_samples, tol)


def probe_coercivity_A0B0(pair: CoefficientPair, triple: SpectralTriple, n: float = 1.0,
                          T: float = 1.0, n_samples: int = 10_000, rng=None,
                          M: float = 0.0) -> dict:
    """Worst sampled ratio for the leading-order pair with ``||u||_H <= n``.

    ``theta_hat = min (<A0(t,u)v,v> - 1/2|||B0(t,u)v|||^2 + M||v||_H^2) / ||v||_V^2``.
    The condition is homogeneous in ``v``, so only directions are sampled.
    ``theta_hat_M0`` is the same minimum without the ``M`` term; the
    difference is the effect of the lower-order allowance.
    """
    if n <= 0:
        raise ValueError("radius n must be positive")
    rng = np.random.default_rng(rng)
    V = sample_directions(triple, n_samples, rng)
    U = sample_directions(triple, n_samples, rng) * n * rng.random((n_samples, 1))
    ts = _sample_times(T, n_samples, rng)
    form = np.empty(n_samples)
    for i in range(n_samples):
        t, u, v = float(ts[i]), U[i], V[i]
        a0v = pair.apply_A0(t, u, v)
        b0v = pair.apply_B0(t, u, v)
        form[i] = a0v @ v - 0.5 * np.sum(b0v ** 2)
    vnorm = triple.sqnorm(V, "V")
    r0 = form / vnorm
    r = (form + M * triple.sqnorm(V, "H")) / vnorm
    i = int(np.argmin(r))
    return {"theta_hat": float(r[i]), "theta_hat_M0": float(r0.min()), "M": M,
            "witness_t": float(ts[i]), "witness_u": U[i], "witness_v": V[i], "n_samples": n_samples}


@dataclass
class LipschitzProbe:
    which: str
    c_hat: float
    c_hat_half: float
    n_samples: int
    witness: tuple

    @property
    def stable(self) -> bool:
        """Maximum over the first half within 10% of the maximum over all samples."""
        if self.c_hat == 0:
            return True
        return abs(self.c_hat - self.c_hat_half) <= 0.1 * self.c_hat


def _structure_rhs(triple, u, v, exps):
    d = u - v
    total = np.zeros(u.shape[0])
    for rho, beta in exps:
        beta = float(beta)
        rho = float(rho)
        nu, nv = triple.norm(u, "Vbeta", beta), triple.norm(v, "Vbeta", beta)
        total += (1 + nu ** rho + nv ** rho) * triple.norm(d, "Vbeta", beta)
    return total


def probe_lipschitz(pair: CoefficientPair, triple: SpectralTriple, which: str = "F",
                    n: float = 1.0, T: float = 1.0, n_samples: int = 4000, rng=None) -> LipschitzProbe:
    """Empirical constant in the local Lipschitz bound of ``which``.

    For ``F``/``G`` the ratio is ``||F(u)-F(v)||_{V*}`` (``|||.|||_H`` for G)
    over ``sum_j (1 + ||u||_{b_j}^{r_j} + ||v||_{b_j}^{r_j}) ||u-v||_{b_j}``;
    for ``A0``/``B0`` it is ``||(A0(u)-A0(v))w||`` over ``||u-v||_H ||w||_V``.
    Samples lie in the H-ball of radius ``n``; half of the differences
    ``u - v`` are single-mode spikes.
    """
    if which not in ("A0", "B0", "F", "G"):
        raise ValueError(f"unknown coefficient {which!r}")
    rng = np.random.default_rng(rng)
    # ||u||, ||u - v|| <= n/2 keeps v in the ball without distorting spikes
    U = sample_directions(triple, n_samples, rng) * (0.5 * n * rng.random((n_samples, 1)))
    D = sample_directions(triple, n_samples, rng) * (0.5 * n * rng.random((n_samples, 1)))
    V_ = U + D
    ts = _sample_times(T, n_samples, rng)
    ratios = np.zeros(n_samples)
    if which in ("F", "G"):
        fn = pair.F if which == "F" else pair.G
        exps = pair.exponents_F if which == "F" else pair.exponents_G
        if fn is not None:
            if not exps:
                raise AssumptionViolation(f"{which} is present but no exponents are declared")
            for i in range(n_samples):
                t = float(ts[i])
                diff = np.asarray(fn(t, U[i])) - np.asarray(fn(t, V_[i]))
                lhs = triple.norm(diff, "Vstar") if which == "F" else float(np.linalg.norm(triple.norm(diff.T, "H")))
                rhs = _structure_rhs(triple, U[i:i + 1], V_[i:i + 1], exps)[0]
                ratios[i] = lhs / rhs if rhs > 0 else 0.0
    else:
        W = sample_directions(triple, n_samples, rng)
        for i in range(n_samples):
            t = float(ts[i])
            if which == "A0":
                diff = pair.apply_A0(t, U[i], W[i]) - pair.apply_A0(t, V_[i], W[i])
                lhs = triple.norm(diff, "Vstar")
            else:
                diff = pair.apply_B0(t, U[i], W[i]) - pair.apply_B0(t, V_[i], W[i])
                lhs = float(np.linalg.norm(diff))
            rhs = triple.norm(U[i] - V_[i], "H") * triple.norm(W[i], "V")
            ratios[i] = lhs / rhs if rhs > 0 else 0.0
    if not np.all(np.isfinite(ratios)):
        raise AssumptionViolation(f"non-finite Lipschitz ratio for {which}")
    i = int(np.argmax(ratios))
    half = ratios[: max(1, n_samples // 2)].max()
    return LipschitzProbe(which, float(ratios[i]), float(half), n_samples, (float(ts[i]), U[i], V_[i]))
