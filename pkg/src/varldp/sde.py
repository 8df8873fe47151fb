"""Small-noise stochastic equation with truncated cylindrical noise.

    dX = (-A(t, X) + B(t, X) psi) dt + sqrt(eps) B(t, X) dW,   X(0) = x

discretized with the same semi-implicit step as the skeleton solver:

    (I + dt A0(t_i, X_i)) X_{i+1} = X_i + dt (F_i + f_i) + dt B_i psi_i + sqrt(eps) B_i dW_i

Each path draws its Brownian increments from its own counter-based stream
(Philox keyed by ``(seed, path_index)``), so a batch of ``p`` paths equals
``p`` single-path runs and ensembles can be split across workers freely.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .coeffs import CoefficientPair
import csv
import json
import warnings
from pathlib import Path

from .skeleton import Control, TimeGrid, Trajectory, _solve, mr_norm_array
from .triple import SpectralTriple

log = logging.getLogger(__name__)

OVERFLOW_GUARD = 1e8


@dataclass(frozen=True)
class NoiseConfig:
    K_U: int
    seed: int = 0

    def __post_init__(self):
        if self.K_U < 1:
            raise ValueError("K_U must be >= 1")

    def generator(self, path_index: int) -> np.random.Generator:
        key = np.array([self.seed % 2 ** 64, path_index], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def increments(self, grid: TimeGrid, path_ids, refine: int = 1) -> np.ndarray:
        """Brownian increments ``(P, N, K)`` on ``grid``.

        Draws happen on the grid refined by ``refine`` and are summed in
        groups, so the same path can be viewed at several resolutions.
        """
        N = grid.steps * refine
        out = np.empty((len(path_ids), N, self.K_U))
        for j, pid in enumerate(path_ids):
            out[j] = self.generator(int(pid)).standard_normal((N, self.K_U))
        out *= np.sqrt(grid.T / N)
        if refine > 1:
            out = out.reshape(len(path_ids), grid.steps, refine, self.K_U).sum(axis=2)
        return out


@dataclass
class PathEnsemble:
    grid: TimeGrid
    triple: SpectralTriple
    states: np.ndarray  # (P, N+1, m)
    increments: np.ndarray  # (P, N, K)
    eps: float
    control: Optional[Control] = None
    flagged: np.ndarray = None
    path_ids: np.ndarray = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def endpoints(self) -> np.ndarray:
        return self.states[:, -1]

    @property
    def trajectories(self) -> list:
        """Per-path :class:`Trajectory` views (built on demand)."""
        return [Trajectory(self.grid, self.states[p], self.triple, {"path_id": int(self.path_ids[p]),
                                                                    "flagged": bool(self.flagged[p])})
                for p in range(self.n_paths)]

    def mr_norms(self) -> np.ndarray:
        out = mr_norm_array(self.triple, np.nan_to_num(self.states, nan=0.0), self.grid.dt)
        out[self.flagged] = OVERFLOW_GUARD
        return out

    def sup_distance(self, reference) -> np.ndarray:
        """``||X - ref||_{C([0,T];H)}`` per path."""
        d = self.triple.norm(self.states - np.asarray(reference), "H")
        return np.max(d, axis=1)

    def mr_distance(self, reference) -> np.ndarray:
        return mr_norm_array(self.triple, self.states - np.asarray(reference), self.grid.dt)


def _step(pair, t, X, dt, drive):
    """One semi-implicit step for a batch ``X`` of shape ``(P, m)``.

    ``drive`` is ``(P, K)``: ``dt*psi + sqrt(eps)*dW``.
    """
    if pair.semilinear:
        B = pair.noise(t, X)
        rhs = X + dt * (pair.drift(t, X) + pair.apply_A0(t, X, X)) + np.einsum("pik,pk->pi", B, drive)
        return _solve(np.asarray(pair.A0(t, X[0]), dtype=float), rhs, dt)
    out = np.empty_like(X)
    for p in range(X.shape[0]):
        u = X[p]
        rhs = u + dt * (pair.drift(t, u) + pair.apply_A0(t, u, u)) + pair.noise(t, u) @ drive[p]
        out[p] = _solve(np.asarray(pair.A0(t, u), dtype=float), rhs, dt)
    return out


def simulate(triple: SpectralTriple, pair: CoefficientPair, eps: float, x, grid: TimeGrid,
             noise: NoiseConfig, control: Optional[Control] = None, n_paths: int = 1,
             path_offset: int = 0, increments=None) -> PathEnsemble:
    """Simulate ``n_paths`` paths of the controlled small-noise equation.

    ``eps = 0`` with a control reproduces :func:`varldp.skeleton.march`.
    Paths whose H-norm reaches the overflow guard are frozen at NaN and
    flagged instead of aborting the run.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if noise.K_U != pair.noise_dim:
        raise ValueError(f"noise config has K_U = {noise.K_U}, pair has {pair.noise_dim} noise directions")
    if control is not None:
        if control.grid != grid:
            raise ValueError("control grid does not match the simulation grid")
        if control.noise_dim != pair.noise_dim:
            raise ValueError("control has the wrong number of noise directions")
    x = triple.check(x).astype(float)
    ids = np.arange(path_offset, path_offset + n_paths)
    dW = noise.increments(grid, ids) if increments is None else np.asarray(increments, dtype=float)
    if dW.shape != (n_paths, grid.steps, pair.noise_dim):
        raise ValueError(f"increments must have shape {(n_paths, grid.steps, pair.noise_dim)}")
    dt = grid.dt
    se = np.sqrt(eps)
    states = np.empty((n_paths, grid.steps + 1, triple.dim))
    states[:, 0] = x
    X = np.tile(x, (n_paths, 1))
    flagged = np.zeros(n_paths, dtype=bool)
    for i in range(grid.steps):
        drive = se * dW[:, i]
        if control is not None:
            drive = drive + dt * control.values[i]
        live = ~flagged
        if live.all():
            X = _step(pair, i * dt, X, dt, drive)
        elif live.any():
            X[live] = _step(pair, i * dt, X[live], dt, drive[live])
        bad = live & ~(np.linalg.norm(X, axis=1) < OVERFLOW_GUARD)
        if bad.any():
            log.warning("%d path(s) hit the overflow guard at t = %g", bad.sum(), (i + 1) * dt)
            flagged |= bad
            X[bad] = np.nan
        states[:, i + 1] = X
    return PathEnsemble(grid, triple, states, dW, eps, control, flagged, ids, noise.seed)


# ---------------------------------------------------------------------------
# diagnostics


def ito_defects(ensemble: PathEnsemble, pair: CoefficientPair) -> np.ndarray:
    """Discrete defect of the Ito formula for ``||X||_H^2`` at every node, per path.

    ``D_i = ||X_i||^2 - ||x||^2 - sum_{j<i} [2 <-A(X_j) + B_j psi_j, X_j> dt
    + 2 sqrt(eps) <X_j, B_j dW_j> + eps |||B_j|||^2 dt]``.  Shape ``(P, N+1)``.
    """
    g = ensemble.grid
    dt = g.dt
    S = ensemble.states
    P, N = S.shape[0], g.steps
    acc = np.zeros((P, N + 1))
    se = np.sqrt(ensemble.eps)
    for j in range(N):
        t = j * dt
        X = S[:, j]
        if pair.semilinear:
            drift = pair.drift(t, X)
            B = pair.noise(t, X)
        else:
            drift = np.stack([pair.drift(t, u) for u in X])
            B = np.stack([pair.noise(t, u) for u in X])
        if ensemble.control is not None:
            drift = drift + B @ ensemble.control.values[j]
        mart = np.einsum("pi,pik,pk->p", X, B, ensemble.increments[:, j])
        step = 2 * np.sum(drift * X, axis=1) * dt + 2 * se * mart + ensemble.eps * np.sum(B ** 2, axis=(1, 2)) * dt
        acc[:, j + 1] = acc[:, j] + step
    sq = np.sum(S * S, axis=2)
    return sq - sq[:, :1] - acc


@dataclass
class ItoReport:
    steps: list
    mean_max_defect: list
    orders: list
    terminal_mean: float
    terminal_se: float

    @property
    def order(self) -> float:
        """Least-squares slope of log(mean max defect) against log(dt)."""
        dts = 1.0 / np.asarray(self.steps, dtype=float)
        return float(np.polyfit(np.log(dts), np.log(self.mean_max_defect), 1)[0])

    @property
    def terminal_z(self) -> float:
        return self.terminal_mean / self.terminal_se if self.terminal_se > 0 else 0.0

    def as_dict(self):
        return {"steps": self.steps, "mean_max_defect": self.mean_max_defect, "orders": self.orders,
                "order": self.order, "terminal_mean": self.terminal_mean,
                "terminal_se": self.terminal_se, "terminal_z": self.terminal_z}


def ito_identity_check(triple, pair, eps, x, grid: TimeGrid, noise: NoiseConfig, n_paths: int,
                       levels: int = 3, control_fn=None) -> ItoReport:
    """Ito defects on ``grid`` refined ``levels - 1`` times with shared Brownian paths.

    The finest grid draws the increments; coarser grids sum them.  Reports
    the mean over paths of ``max_i |D_i|`` per resolution, the pairwise decay
    orders, and the mean and standard error of the terminal defect on the
    finest grid.
    """
    fine = grid.refine(2 ** (levels - 1))
    ids = np.arange(n_paths)
    dW_fine = noise.increments(fine, ids)
    steps, means, last = [], [], None
    for lev in range(levels):
        r = 2 ** (levels - 1 - lev)
        g = grid.refine(2 ** lev)
        dW = dW_fine.reshape(n_paths, g.steps, r, pair.noise_dim).sum(axis=2)
        ctrl = None if control_fn is None else Control.from_function(g, control_fn, pair.noise_dim)
        ens = simulate(triple, pair, eps, x, g, noise, ctrl, n_paths, increments=dW)
        D = ito_defects(ens, pair)
        steps.append(g.steps)
        means.append(float(np.mean(np.max(np.abs(D), axis=1))))
        last = D[:, -1]
    orders = [float(np.log2(means[i] / means[i + 1])) for i in range(levels - 1)]
    return ItoReport(steps, means, orders, float(np.mean(last)),
                     float(np.std(last, ddof=1) / np.sqrt(n_paths)))


def wilson_interval(hits: int, n: int, confidence: float = 0.95):
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    ci = stats.binomtest(int(hits), int(n)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def tightness_constant(pair: CoefficientPair, x, T: float, K: float) -> float:
    """``C = 4/(1 ^ 2 theta) exp(2 M T + 4 K^2) (||x||^2 + 2 ||phi||^2)``."""
    xn2 = float(np.sum(np.asarray(x) ** 2))
    return float(4.0 / min(1.0, 2.0 * pair.theta) * np.exp(2 * pair.M * T + 4 * K * K)
                 * (xn2 + 2 * pair.phi_l2(T) ** 2))


def tightness_probe(ensemble: PathEnsemble, gammas, pair: CoefficientPair, x=None,
                    confidence: float = 0.95) -> list:
    """Exceedance table ``P(||X||_MR > gamma)`` against the ``C / gamma^2`` envelope."""
    x = ensemble.states[0, 0] if x is None else x
    K = 0.0 if ensemble.control is None else ensemble.control.l2_norm()
    C = tightness_constant(pair, x, ensemble.grid.T, K)
    norms = ensemble.mr_norms()
    n = len(norms)
    rows = []
    for gam in gammas:
        hits = int(np.sum(norms > gam))
        lo, hi = wilson_interval(hits, n, confidence)
        env = C / gam ** 2
        rows.append({"gamma": float(gam), "hits": hits, "n": n, "p_hat": hits / n, "ci_low": lo,
                     "ci_high": hi, "C": C, "envelope": env, "within_envelope": hi <= env})
    return rows


def ensemble_summary(ensemble: PathEnsemble, tightness=None, ito=None) -> dict:
    """JSON-ready summary of an ensemble and optional diagnostics."""
    end = ensemble.endpoints[~ensemble.flagged]
    out = {
        "eps": ensemble.eps, "n_paths": ensemble.n_paths, "seed": ensemble.seed,
        "T": ensemble.grid.T, "steps": ensemble.grid.steps,
        "n_flagged": int(ensemble.flagged.sum()),
        "controlled": ensemble.control is not None,
        "endpoint_mean": end.mean(axis=0).tolist() if len(end) else None,
        "endpoint_var": end.var(axis=0, ddof=1).tolist() if len(end) > 1 else None,
    }
    if tightness is not None:
        out["exceedance"] = tightness
    if ito is not None:
        out["ito"] = ito.as_dict() if hasattr(ito, "as_dict") else ito
    return out


def write_summary(summary: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return path


def write_paths_csv(ensemble: PathEnsemble, path, max_rows: int = 10 ** 6) -> Path:
    """Full-path CSV, one row per (path, node).  Warns when the file will be large."""
    rows = ensemble.n_paths * (ensemble.grid.steps + 1)
    if rows > max_rows:
        warnings.warn(f"writing {rows} rows of path data", stacklevel=2)
    path = Path(path)
    t = ensemble.grid.nodes
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "t"] + [f"u{k}" for k in range(ensemble.triple.dim)])
        for p in range(ensemble.n_paths):
            for i in range(len(t)):
                w.writerow([int(ensemble.path_ids[p]), repr(float(t[i]))]
                           + [repr(float(v)) for v in ensemble.states[p, i]])
    return path
