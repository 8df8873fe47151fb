"""Nodal <-> modal transforms for the pseudo-spectral nonlinearities.

The 1D transforms are dense matrices (``m`` is small).  Analysis is the
weighted transpose of synthesis, so ``<q, P[h(Sv)]>`` differentiates to
``P[h'(Sv) Sq]`` exactly and adjoint gradients stay consistent.
"""
from __future__ import annotations

import numpy as np


class SineTransform:
    """Orthonormal Dirichlet sine basis on (0, L) sampled on ``n_nodes`` interior points."""

    def __init__(self, m: int, length: float = 1.0, n_nodes: int | None = None):
        # 2m interior nodes: products of three modes project exactly
        n_nodes = 2 * m if n_nodes is None else n_nodes
        self.m, self.length, self.n_nodes = m, length, n_nodes
        h = length / (n_nodes + 1)
        x = h * np.arange(1, n_nodes + 1)
        k = np.arange(1, m + 1)
        self.nodes = x
        self.weight = h
        self.S = np.sqrt(2.0 / length) * np.sin(np.pi * np.outer(x, k) / length)

    def synth(self, v):
        return np.asarray(v) @ self.S.T

    def analysis(self, w):
        return self.weight * (np.asarray(w) @ self.S)


class FourierTransform1D:
    """Mean-free orthonormal (cos, sin) basis on [0, L) on a uniform grid."""

    def __init__(self, m: int, length: float = 2 * np.pi, n_nodes: int | None = None):
        kmax = m // 2
        n_nodes = 4 * kmax + 2 if n_nodes is None else n_nodes
        self.m, self.length, self.n_nodes = m, length, n_nodes
        x = length * np.arange(n_nodes) / n_nodes
        kappa = 2 * np.pi * np.arange(1, kmax + 1) / length
        S = np.empty((n_nodes, m))
        c = np.sqrt(2.0 / length)
        S[:, 0::2] = c * np.cos(np.outer(x, kappa))
        S[:, 1::2] = c * np.sin(np.outer(x, kappa))
        self.nodes = x
        self.weight = length / n_nodes
        self.S = S
        self.wavenumbers = np.repeat(kappa, 2)

    def synth(self, v):
        return np.asarray(v) @ self.S.T

    def analysis(self, w):
        return self.weight * (np.asarray(w) @ self.S)

    def derivative_matrix(self) -> np.ndarray:
        """d/dx in coefficients: (a cos + b sin)' = k b cos - k a sin."""
        D = np.zeros((self.m, self.m))
        for j, kap in enumerate(self.wavenumbers[0::2]):
            D[2 * j, 2 * j + 1] = kap
            D[2 * j + 1, 2 * j] = -kap
        return D


class Torus2D:
    """Divergence-free real Fourier basis on the 2 pi torus.

    Each wavevector ``k`` in the upper half plane with ``max|k_i| <= cutoff``
    carries two modes, ``c k_perp/|k| cos(k.x)`` and ``c k_perp/|k| sin(k.x)``
    with ``c = 1/(pi sqrt 2)`` (unit L^2 norm).  Modes are sorted by |k|^2.
    Products are evaluated on an ``M x M`` grid with ``M > 3 cutoff``, so
    quadratic terms project onto the retained modes without aliasing.
    """

    NORM = 1.0 / (np.pi * np.sqrt(2.0))

    def __init__(self, cutoff: int, grid: int | None = None):
        self.cutoff = cutoff
        M = 3 * cutoff + 2 if grid is None else grid
        M += M % 2
        if M <= 3 * cutoff:
            raise ValueError("grid too coarse for dealiased quadratic products")
        self.M = M
        r = np.arange(-cutoff, cutoff + 1)
        k1, k2 = np.meshgrid(r, r, indexing="ij")
        kv = np.stack([k1.ravel(), k2.ravel()], axis=1)
        upper = (kv[:, 0] > 0) | ((kv[:, 0] == 0) & (kv[:, 1] > 0))
        kv = kv[upper]
        lam = (kv ** 2).sum(axis=1)
        order = np.lexsort((kv[:, 1], kv[:, 0], lam))
        self.kvec = kv[order]
        self.ksq = lam[order].astype(float)
        kn = np.sqrt(self.ksq)
        self.kperp = np.stack([-self.kvec[:, 1], self.kvec[:, 0]], axis=1) / kn[:, None]
        self.n_wave = len(self.kvec)
        self.m = 2 * self.n_wave
        self.eigenvalues = np.repeat(self.ksq, 2)
        # FFT index of +k and -k
        self.ip = (self.kvec[:, 0] % M, self.kvec[:, 1] % M)
        self.im = ((-self.kvec[:, 0]) % M, (-self.kvec[:, 1]) % M)
        f = np.fft.fftfreq(M, d=1.0 / M)
        self.KX, self.KY = np.meshgrid(f, f, indexing="ij")

    # coefficient layout: v[..., 2j] = cos amplitude, v[..., 2j+1] = sin amplitude

    def to_fourier(self, v):
        """Complex velocity coefficients ``uhat`` of shape ``(..., 2, M, M)``."""
        v = np.asarray(v, dtype=float)
        a, b = v[..., 0::2], v[..., 1::2]
        s = 0.5 * self.NORM * (a - 1j * b)
        out = np.zeros(v.shape[:-1] + (2, self.M, self.M), dtype=complex)
        for comp in range(2):
            amp = s * self.kperp[:, comp]
            out[..., comp, self.ip[0], self.ip[1]] = amp
            out[..., comp, self.im[0], self.im[1]] = np.conj(amp)
        return out

    def from_fourier(self, what):
        """Project complex vector coefficients onto the solenoidal basis."""
        wp = what[..., :, self.ip[0], self.ip[1]]
        s = np.einsum("...cj,jc->...j", wp, self.kperp)
        out = np.empty(what.shape[:-3] + (self.m,))
        scale = 4 * np.pi ** 2 * self.NORM
        out[..., 0::2] = scale * s.real
        out[..., 1::2] = -scale * s.imag
        return out

    def physical(self, uhat):
        return np.real(np.fft.ifft2(uhat, axes=(-2, -1))) * self.M ** 2

    def spectral(self, u):
        return np.fft.fft2(u, axes=(-2, -1)) / self.M ** 2

    def gradient(self, uhat):
        """Physical ``d_j u_k`` as ``(..., k, j, M, M)``."""
        ks = (self.KX, self.KY)
        return np.stack([self.physical(1j * ks[j] * uhat) for j in range(2)], axis=-3)

    def divergence(self, v):
        """l2 norm of the spectral divergence of the field."""
        uhat = self.spectral(self.physical(self.to_fourier(v)))
        div = 1j * (self.KX * uhat[..., 0, :, :] + self.KY * uhat[..., 1, :, :])
        return np.sqrt(np.sum(np.abs(div) ** 2, axis=(-2, -1)))

    def advection(self, u, w):
        """``Phi(u, w) = -P div(u (x) w)`` in basis coefficients."""
        up = self.physical(self.to_fourier(u))
        wp = self.physical(self.to_fourier(w))
        # (u (x) w)_{jk} = u_j w_k ; div_k = sum_j d_j (u_j w_k)
        prod = self.spectral(up[..., :, None, :, :] * wp[..., None, :, :, :])
        ks = (self.KX, self.KY)
        div = sum(1j * ks[j] * prod[..., j, :, :, :] for j in range(2))
        return -self.from_fourier(div)

    def advection_vjp(self, v, q):
        """Gradient in ``v`` of ``<q, Phi(v, v)>``: ``P[(v.grad)q + (grad q)^T v]``."""
        vp = self.physical(self.to_fourier(v))
        dq = self.gradient(self.to_fourier(q))  # (..., k, j, M, M): d_j q_k
        t1 = np.einsum("...jxy,...kjxy->...kxy", vp, dq)
        t2 = np.einsum("...kxy,...kjxy->...jxy", vp, dq)
        return self.from_fourier(self.spectral(t1 + t2))

    def transport_matrix(self, b) -> np.ndarray:
        """Coefficient matrix of ``(b . grad)`` for a constant vector ``b``."""
        beta = self.kvec @ np.asarray(b, dtype=float)
        T = np.zeros((self.m, self.m))
        idx = np.arange(self.n_wave)
        T[2 * idx, 2 * idx + 1] = beta
        T[2 * idx + 1, 2 * idx] = -beta
        return T
