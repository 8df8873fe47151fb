"""Finite-dimensional spectral Gelfand triple.

All three spaces V, H and V* share one orthonormal eigenbasis of H.  A
coefficient vector ``v`` of length ``m`` represents the same element in each
of them; only the weights in the norm change:

    ||v||_H^2     = sum v_k^2
    ||v||_V^2     = sum lam_k v_k^2
    ||v||_{V*}^2  = sum v_k^2 / lam_k
    ||v||_beta^2  = sum lam_k^(2 beta - 1) v_k^2

The last one is the complex interpolation space [V*, V]_beta of a
diagonalizable triple; with these weights the interpolation inequality holds
with constant 1 (Hoelder on the weights).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

SPACES = ("H", "V", "Vstar", "Vbeta")


@dataclass(frozen=True, eq=False)
class SpectralTriple:
    """Diagonal triple V c H c V* with positive nondecreasing eigenvalues.

    Parameters
    ----------
    eigenvalues : array_like, shape (m,)
        Spectral weights ``lam_1 <= ... <= lam_m``, all strictly positive.
    labels : sequence, optional
        Per-mode metadata (wavenumbers, wavevectors, ...).  Not used by the
        norms.
    """

    eigenvalues: np.ndarray
    labels: Any = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float).ravel()
        if lam.size == 0:
            raise ValueError("a spectral triple needs at least one mode")
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise ValueError("eigenvalues must be finite and strictly positive")
        if np.any(np.diff(lam) < 0):
            raise ValueError("eigenvalues must be nondecreasing")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        if self.labels is not None and len(self.labels) != lam.size:
            raise ValueError("labels must have one entry per mode")

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    def __repr__(self):
        return f"SpectralTriple(name={self.name!r}, dim={self.dim}, lam_1={self.eigenvalues[0]:.6g})"

    # -- weights and norms -------------------------------------------------

    def weights(self, space: str = "H", beta: float | None = None) -> np.ndarray:
        lam = self.eigenvalues
        if space == "H":
            return np.ones_like(lam)
        if space == "V":
            return lam
        if space == "Vstar":
            return 1.0 / lam
        if space == "Vbeta":
            _check_beta(beta)
            return lam ** (2.0 * beta - 1.0)
        raise ValueError(f"unknown space {space!r}; expected one of {SPACES}")

    def check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.ndim == 0 or v.shape[-1] != self.dim:
            raise ValueError(f"vector has trailing dimension {v.shape[-1:] or ()}, expected {self.dim}")
        return v

    def norm(self, v, space: str = "H", beta: float | None = None) -> np.ndarray | float:
        """Weighted l2 norm of ``v`` (over the last axis)."""
        v = self.check(v)
        w = self.weights(space, beta)
        out = np.sqrt(np.sum(w * v * v, axis=-1))
        return float(out) if out.ndim == 0 else out

    def sqnorm(self, v, space: str = "H", beta: float | None = None):
        v = self.check(v)
        out = np.sum(self.weights(space, beta) * v * v, axis=-1)
        return float(out) if out.ndim == 0 else out

    def duality_pair(self, w, v):
        """<w, v> between V* and V; equals (w, v)_H when both lie in H."""
        w = self.check(w)
        v = self.check(v)
        out = np.sum(w * v, axis=-1)
        return float(out) if out.ndim == 0 else out

    def interpolation_ratio(self, v, beta: float):
        """``||v||_beta / (||v||_H^(2-2beta) ||v||_V^(2beta-1))``, at most 1."""
        _check_beta(beta)
        v = self.check(v)
        # the ratio is scale invariant; rescaling avoids underflow in the squares
        s = np.max(np.abs(v), axis=-1, keepdims=True)
        v = np.divide(v, s, out=np.zeros_like(v, dtype=float), where=s > 0)
        h = self.norm(v, "H")
        if np.any(np.asarray(h) == 0):
            raise ValueError("interpolation ratio is undefined for the zero vector")
        num = self.norm(v, "Vbeta", beta)
        den = np.asarray(h) ** (2 - 2 * beta) * np.asarray(self.norm(v, "V")) ** (2 * beta - 1)
        out = np.asarray(num) / den
        return float(out) if out.ndim == 0 else out

    # embedding constants of the scale: ||v||_X <= c ||v||_Y
    def embedding_constant(self, src: str, dst: str, beta: float | None = None) -> float:
        """Smallest ``c`` with ``||v||_dst <= c ||v||_src`` for all ``v``."""
        ratio = self.weights(dst, beta) / self.weights(src, beta)
        return float(np.sqrt(ratio.max()))

    # -- construction ------------------------------------------------------

    @classmethod
    def from_eigenvalues(cls, eigenvalues: Sequence[float], labels=None) -> "SpectralTriple":
        return cls(np.asarray(eigenvalues, dtype=float), labels=labels, name="explicit")

    @classmethod
    def dirichlet1d(cls, m: int = 64, length: float = 1.0) -> "SpectralTriple":
        """Sine basis on (0, L): lam_k = (k pi / L)^2."""
        m = _positive_int(m, "m")
        k = np.arange(1, m + 1)
        return cls((k * np.pi / length) ** 2, labels=k, name="dirichlet1d",
                   params={"m": m, "length": float(length)})

    @classmethod
    def periodic1d(cls, m: int = 64, length: float = 2 * np.pi) -> "SpectralTriple":
        """Mean-free Fourier basis on the circle, ordered cos/sin per wavenumber.

        ``m`` must be even; wavenumbers 1..m/2 each carry a cosine and a sine
        mode, ``lam = (2 pi k / L)^2``.
        """
        m = _positive_int(m, "m")
        if m % 2:
            raise ValueError("periodic1d needs an even number of modes")
        k = np.repeat(np.arange(1, m // 2 + 1), 2)
        return cls((2 * np.pi * k / length) ** 2, labels=k, name="periodic1d",
                   params={"m": m, "length": float(length)})

    @classmethod
    def periodic2d(cls, cutoff: int) -> "SpectralTriple":
        """Nonzero integer wavevectors with ``max(|k1|, |k2|) <= cutoff``, lam = |k|^2.

        One eigenvalue per wavevector (both signs listed), i.e. the scalar
        Laplacian on the 2 pi torus restricted to mean-free functions.
        """
        cutoff = _positive_int(cutoff, "cutoff")
        r = np.arange(-cutoff, cutoff + 1)
        k1, k2 = np.meshgrid(r, r, indexing="ij")
        kv = np.stack([k1.ravel(), k2.ravel()], axis=1)
        kv = kv[np.any(kv != 0, axis=1)]
        lam = (kv ** 2).sum(axis=1).astype(float)
        order = np.lexsort((kv[:, 1], kv[:, 0], lam))
        return cls(lam[order], labels=kv[order], name="periodic2d", params={"cutoff": cutoff})

    @classmethod
    def from_config(cls, cfg: dict) -> "SpectralTriple":
        """Build from ``{"eigenvalues": [...]}`` or ``{"generator": name, ...}``."""
        if "eigenvalues" in cfg:
            return cls.from_eigenvalues(cfg["eigenvalues"])
        gen = cfg.get("generator")
        if gen == "dirichlet1d":
            return cls.dirichlet1d(cfg.get("m", 64), cfg.get("length", 1.0))
        if gen == "periodic1d":
            return cls.periodic1d(cfg.get("m", 64), cfg.get("length", 2 * np.pi))
        if gen == "periodic2d":
            return cls.periodic2d(cfg["cutoff"])
        raise ValueError(f"unknown triple generator {gen!r}")


def _check_beta(beta):
    if beta is None or not (0.5 < beta < 1.0):
        raise ValueError(f"beta must lie in (1/2, 1), got {beta!r}")


def _positive_int(n, what):
    if int(n) != n or n < 1:
        raise ValueError(f"{what} must be a positive integer")
    return int(n)
