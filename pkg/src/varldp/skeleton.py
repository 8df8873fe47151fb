"""Deterministic skeleton equation ``u' = -A(t, u) + B(t, u) psi``.

The solver follows the linearize-and-iterate construction: on a time window
starting from ``v0`` the leading-order part is frozen at ``v0`` and the map

    Psi(v) = u,   u' + A0(v0) u - B0(v0) u psi = f~(v) + g~(v) psi,
    f~(v) = (A0(v0) - A0(v)) v + F(v) + f,
    g~(v) = (B0(v0) - B0(v)) v + G(v) + g,

is iterated from the frozen linear flow of ``v0`` until successive iterates
agree in the MR norm.  Each application of ``Psi`` is one semi-implicit
sweep (``A0`` implicit, everything else explicit).  Windows start at the
full remaining interval, are halved whenever a measured contraction factor
exceeds 1/2, and grow back after each success.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coeffs import CoefficientPair
from .triple import SpectralTriple


class SkeletonError(RuntimeError):
    pass


class ContractionFailure(SkeletonError):
    """The fixed-point map did not contract even on a single time step."""


class NonConvergence(SkeletonError):
    pass


class LinearSolveError(SkeletonError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("a time grid needs at least one step")
        if not self.T > 0:
            raise ValueError("final time must be positive")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.steps + 1)

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.steps) + 0.5) * self.dt

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.steps * factor)


@dataclass
class Control:
    """Piecewise-constant control, ``values[i]`` acting on cell ``[t_i, t_{i+1})``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.steps:
            raise ValueError(f"control has {v.shape[0]} cells, grid has {self.grid.steps}")
        self.values = v

    @property
    def noise_dim(self) -> int:
        return self.values.shape[1]

    def action(self) -> float:
        """``1/2 int ||psi||^2 dt``."""
        return 0.5 * float(np.sum(self.values ** 2)) * self.grid.dt

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(self.values ** 2) * self.grid.dt))

    @classmethod
    def zeros(cls, grid: TimeGrid, noise_dim: int) -> "Control":
        return cls(grid, np.zeros((grid.steps, noise_dim)))

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "Control":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(value, (grid.steps, 1)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn, noise_dim: int) -> "Control":
        """Sample ``fn(t)`` at cell midpoints."""
        vals = np.array([np.broadcast_to(fn(t), (noise_dim,)) for t in grid.midpoints], dtype=float)
        return cls(grid, vals)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_start"] + [f"psi_{k}" for k in range(self.noise_dim)])
            for t, row in zip(self.grid.nodes[:-1], self.values):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in row])


@dataclass
class Trajectory:
    grid: TimeGrid
    states: np.ndarray
    triple: SpectralTriple
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.shape != (self.grid.steps + 1, self.triple.dim):
            raise ValueError(f"states must have shape {(self.grid.steps + 1, self.triple.dim)}, "
                             f"got {self.states.shape}")

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    def mr_norm(self) -> float:
        return mr_norm(self)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"mode_{k}" for k in range(self.triple.dim)])
            for t, row in zip(self.grid.nodes, self.states):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in row])


# ---------------------------------------------------------------------------
# norms


def mr_norm_array(triple: SpectralTriple, states, dt: float):
    """MR norm of paths stored along axis -2: sup_t ||u||_H + (trapz ||u||_V^2)^(1/2)."""
    sup = np.max(triple.norm(states, "H"), axis=-1)
    v2 = triple.sqnorm(states, "V")
    l2 = np.sqrt(dt * (np.sum(v2, axis=-1) - 0.5 * (v2[..., 0] + v2[..., -1])))
    return sup + l2


def mr_norm(traj: Trajectory) -> float:
    """``||u||_{C([0,T];H)} + ||u||_{L^2(0,T;V)}`` with the trapezoidal rule in time."""
    return float(mr_norm_array(traj.triple, traj.states, traj.grid.dt))


# ---------------------------------------------------------------------------
# linear solves


def _solve(a, rhs, dt):
    """Solve ``(I + dt a) x = rhs`` for diagonal (1D) or dense ``a``; rhs may be batched."""
    if a.ndim == 1:
        den = 1.0 + dt * a
        if np.any(den <= 0):
            raise LinearSolveError("implicit step matrix is indefinite (1 + dt*A0 <= 0)")
        return rhs / den
    S = np.eye(a.shape[0]) + dt * a
    try:
        out = np.linalg.solve(S, rhs.T).T
    except np.linalg.LinAlgError as exc:
        raise LinearSolveError(f"implicit step matrix is singular: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise LinearSolveError("implicit step produced non-finite values")
    return out


def _as_path(w, grid, m):
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        return np.broadcast_to(w, (grid.steps + 1, m))
    return w


def solve_linearized(triple: SpectralTriple, pair: CoefficientPair, w, psi: Control,
                     fbar=None, gbar=None, x=None, grid: Optional[TimeGrid] = None) -> Trajectory:
    """Semi-implicit sweep of ``u' + A0(w) u - B0(w) u psi = fbar + gbar psi``.

    ``(I + dt A0(t_i, w_i)) u_{i+1} = u_i + dt (B0(t_i, w_i) u_i psi_i + fbar_i + gbar_i psi_i)``.
    ``w`` is a path ``(N+1, m)`` (or one vector, held constant); ``fbar`` is
    ``(N, m)`` and ``gbar`` is ``(N, m, K)`` per cell, ``None`` meaning zero.
    """
    grid = psi.grid if grid is None else grid
    m = triple.dim
    x = np.zeros(m) if x is None else triple.check(x)
    states = _linear_sweep(pair, _as_path(w, grid, m), psi.values, fbar, gbar, x, grid, 0)
    return Trajectory(grid, states, triple)


def _linear_sweep(pair, w, psi, fbar, gbar, x, grid, i0, i1=None):
    """Sweep cells ``i0 .. i1-1`` of the grid; returns the ``i1-i0+1`` node states."""
    i1 = grid.steps if i1 is None else i1
    dt = grid.dt
    out = np.empty((i1 - i0 + 1, x.size))
    out[0] = x
    u = x
    for j, i in enumerate(range(i0, i1)):
        t = i * dt
        wi = w[j] if w.shape[0] == i1 - i0 + 1 else w[i]
        rhs = u + dt * (pair.apply_B0(t, wi, u) @ psi[i])
        if fbar is not None:
            rhs = rhs + dt * fbar[j]
        if gbar is not None:
            rhs = rhs + dt * (gbar[j] @ psi[i])
        u = _solve(np.asarray(pair.A0(t, wi), dtype=float), rhs, dt)
        out[j + 1] = u
    return out


# ---------------------------------------------------------------------------
# fixed-point construction


@dataclass
class WindowReport:
    start: int
    stop: int
    iterations: int
    differences: list
    factors: list

    @property
    def max_factor(self) -> float:
        return max(self.factors) if self.factors else 0.0

    def as_dict(self):
        return {"start": self.start, "stop": self.stop, "iterations": self.iterations,
                "differences": self.differences, "factors": self.factors,
                "max_factor": self.max_factor}


def _window_mr(triple, seg, dt):
    return float(mr_norm_array(triple, seg, dt))


def _frozen_forcing(pair, v0, v, grid, i0, i1):
    """f~ and g~ of the fixed-point map on cells i0..i1-1, evaluated at iterate v."""
    dt = grid.dt
    n = i1 - i0
    fb = np.empty((n, v.shape[1]))
    gb = np.empty((n, v.shape[1], pair.noise_dim))
    for j in range(n):
        t = (i0 + j) * dt
        vj = v[j]
        f_ = pair.drift(t, vj) + pair.apply_A0(t, vj, vj)  # F(v) + f
        g_ = pair.noise(t, vj) - pair.apply_B0(t, vj, vj)  # G(v) + g
        if not pair.semilinear:
            f_ = f_ + pair.apply_A0(t, v0, vj) - pair.apply_A0(t, vj, vj)
            g_ = g_ + pair.apply_B0(t, v0, vj) - pair.apply_B0(t, vj, vj)
        fb[j], gb[j] = f_, g_
    return fb, gb


def fixed_point_map(triple, pair, psi: Control, v0, v, i0: int, i1: int):
    """One application of the frozen-coefficient map on cells ``i0..i1-1``."""
    grid = psi.grid
    w = np.broadcast_to(v0, (i1 - i0 + 1, v0.size))
    fb, gb = _frozen_forcing(pair, v0, v, grid, i0, i1)
    return _linear_sweep(pair, w, psi.values, fb, gb, v0, grid, i0, i1)


def _frozen_flow(triple, pair, psi, v0, i0, i1):
    w = np.broadcast_to(v0, (i1 - i0 + 1, v0.size))
    return _linear_sweep(pair, w, psi.values, None, None, v0, psi.grid, i0, i1)


def solve_skeleton(triple: SpectralTriple, pair: CoefficientPair, psi: Control, x,
                   grid: Optional[TimeGrid] = None, tol: float = 1e-10, max_windows: int = 10_000,
                   max_iter: int = 60, max_factor: float = 0.5) -> Trajectory:
    """Solve the skeleton equation by windowed fixed-point iteration.

    Every accepted window has all measured contraction factors
    ``||u_{k+1} - u_k||_MR / ||u_k - u_{k-1}||_MR <= max_factor``; the window
    reports are stored in ``traj.info["windows"]``.
    """
    grid = psi.grid if grid is None else grid
    if psi.grid != grid:
        raise ValueError("control grid does not match the solver grid")
    if psi.noise_dim != pair.noise_dim:
        raise ValueError(f"control has {psi.noise_dim} noise directions, pair expects {pair.noise_dim}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = triple.check(x).astype(float)
    N, dt = grid.steps, grid.dt
    states = np.empty((N + 1, triple.dim))
    states[0] = x
    reports = []
    i0, length = 0, N
    while i0 < N:
        if len(reports) >= max_windows:
            raise NonConvergence(f"window budget of {max_windows} exhausted at t = {i0 * dt:g}")
        i1 = min(N, i0 + length)
        v0 = states[i0]
        v = _frozen_flow(triple, pair, psi, v0, i0, i1)
        diffs, factors = [], []
        accepted = False
        floor = 1e-13 * (1.0 + _window_mr(triple, v, dt))
        for k in range(max_iter):
            u = fixed_point_map(triple, pair, psi, v0, v, i0, i1)
            if not np.all(np.isfinite(u)):
                break
            d = _window_mr(triple, u - v, dt)
            if diffs and diffs[-1] > floor:
                factors.append(d / diffs[-1])
                if factors[-1] > max_factor:
                    break
            diffs.append(d)
            v = u
            if d <= tol:
                accepted = True
                break
        else:
            raise NonConvergence(f"fixed point not reached in {max_iter} iterations on window "
                                 f"[{i0 * dt:g}, {i1 * dt:g}] (last difference {diffs[-1]:.3e})")
        if not accepted:
            if i1 - i0 == 1:
                raise ContractionFailure(
                    f"no contraction on a single step at t = {i0 * dt:g}; the solution may blow up "
                    f"(last factor {factors[-1] if factors else float('nan'):.3g})")
            length = max(1, (i1 - i0) // 2)
            continue
        # iterations: applications that still moved the iterate
        reports.append(WindowReport(i0, i1, len(diffs) - 1 if diffs[-1] <= tol else len(diffs),
                                    diffs, factors))
        states[i0 + 1:i1 + 1] = v[1:]
        i0 = i1
        length = min(N, 2 * (i1 - reports[-1].start))
    info = {"windows": [r.as_dict() for r in reports], "tol": tol,
            "max_contraction_factor": max((r.max_factor for r in reports), default=0.0)}
    return Trajectory(grid, states, triple, info)


def reapply_fixed_point_map(triple, pair, psi: Control, traj: Trajectory) -> Trajectory:
    """Push a solution through one more application of the map on its own windows."""
    out = traj.states.copy()
    for w in traj.info["windows"]:
        i0, i1 = w["start"], w["stop"]
        out[i0:i1 + 1] = fixed_point_map(triple, pair, psi, traj.states[i0], traj.states[i0:i1 + 1], i0, i1)
    return Trajectory(traj.grid, out, traj.triple)


def march(triple, pair, psi: Control, x) -> Trajectory:
    """Direct semi-implicit recursion with ``A0`` frozen at the current state.

    ``(I + dt A0(t_i, u_i)) u_{i+1} = u_i + dt (F(u_i) + f_i + B(t_i, u_i) psi_i)``.
    For semilinear pairs this is exactly the fixed point that
    :func:`solve_skeleton` iterates to.
    """
    grid = psi.grid
    dt = grid.dt
    u = triple.check(x).astype(float)
    states = np.empty((grid.steps + 1, u.size))
    states[0] = u
    for i in range(grid.steps):
        t = i * dt
        rhs = u + dt * (pair.drift(t, u) + pair.apply_A0(t, u, u) + pair.noise(t, u) @ psi.values[i])
        u = _solve(np.asarray(pair.A0(t, u), dtype=float), rhs, dt)
        states[i + 1] = u
    return Trajectory(grid, states, triple)


# ---------------------------------------------------------------------------
# certificates


def _rhs_path(pair, psi, traj):
    """``-A(t_i, u_i) + B(t_i, u_i) psi`` at every node, with psi of the cell to the left/right."""
    grid = traj.grid
    dt = grid.dt
    out_left = np.empty((grid.steps, traj.triple.dim))
    out_right = np.empty_like(out_left)
    for i in range(grid.steps):
        t0, t1 = i * dt, (i + 1) * dt
        u0, u1 = traj.states[i], traj.states[i + 1]
        out_left[i] = pair.drift(t0, u0) + pair.noise(t0, u0) @ psi.values[i]
        out_right[i] = pair.drift(t1, u1) + pair.noise(t1, u1) @ psi.values[i]
    return out_left, out_right


def residual(triple, pair, psi: Control, traj: Trajectory, x=None) -> float:
    """Max over nodes of ``||u(t_i) - x - int_0^{t_i} (-A + B psi)||_{V*}`` (trapezoidal)."""
    x = traj.states[0] if x is None else np.asarray(x, dtype=float)
    left, right = _rhs_path(pair, psi, traj)
    integral = np.concatenate([np.zeros((1, triple.dim)),
                               np.cumsum(0.5 * traj.grid.dt * (left + right), axis=0)])
    defect = traj.states - x - integral
    return float(np.max(triple.norm(defect, "Vstar")))


def chain_rule_defect(triple, pair, psi: Control, traj: Trajectory) -> float:
    """Max over nodes of ``| ||u_i||^2 - ||x||^2 - 2 trapz <rhs, u> |``."""
    left, right = _rhs_path(pair, psi, traj)
    s = traj.states
    pl = np.sum(left * s[:-1], axis=1)
    pr = np.sum(right * s[1:], axis=1)
    integral = np.concatenate([[0.0], np.cumsum(traj.grid.dt * (pl + pr))])
    sq = np.sum(s * s, axis=1)
    return float(np.max(np.abs(sq - sq[0] - integral)))


def global_bound(pair: CoefficientPair, psi: Control, x, T: float) -> float:
    """A-priori MR bound ``(2 + 1/theta)^(1/2) (||x|| + sqrt2 ||phi||) exp(M T + ||psi||^2/2)``."""
    xn = float(np.linalg.norm(x))
    return float(np.sqrt(2.0 + 1.0 / pair.theta) * (xn + np.sqrt(2.0) * pair.phi_l2(T))
                 * np.exp(pair.M * T + 0.5 * psi.l2_norm() ** 2))


def verify_global_bound(traj: Trajectory, pair: CoefficientPair, psi: Control, x=None) -> float:
    """``global_bound - mr_norm(traj)``; negative means the certificate failed."""
    x = traj.states[0] if x is None else x
    return global_bound(pair, psi, x, traj.grid.T) - mr_norm(traj)


def continuous_dependence_probe(triple, pair, psi: Control, x, x_prime, grid=None, tol=1e-13) -> float:
    """``||u_x - u_x'||_MR / ||x - x'||_H``."""
    x, x_prime = triple.check(x), triple.check(x_prime)
    dx = triple.norm(x - x_prime, "H")
    if dx == 0:
        raise ValueError("initial data coincide; the probe needs distinct inputs")
    u1 = solve_skeleton(triple, pair, psi, x, grid, tol=tol)
    u2 = solve_skeleton(triple, pair, psi, x_prime, grid, tol=tol)
    return float(mr_norm_array(triple, u1.states - u2.states, u1.grid.dt)) / dx


def export_trajectory(traj: Trajectory, csv_path, manifest_path=None, extra=None):
    """Write states as CSV and, optionally, a JSON manifest of norms."""
    traj.to_csv(csv_path)
    if manifest_path is not None:
        data = {"T": traj.grid.T, "steps": traj.grid.steps, "dim": traj.triple.dim,
                "mr_norm": mr_norm(traj), "info": traj.info}
        data.update(extra or {})
        with open(manifest_path, "w") as fh:
            json.dump(data, fh, indent=2, default=float)
