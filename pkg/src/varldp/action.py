"""Rate function: action along controls and the minimum action method.

Controls are piecewise constant on the solver grid and the controlled
dynamics are the semi-implicit recursion of :func:`varldp.skeleton.march`,
so the discrete adjoint below is the exact gradient of what is minimized.
Target events enter through a quadratic penalty on the distance of the
endpoint (or a path functional) to the event, with geometric continuation
of the penalty weight.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from .coeffs import CoefficientPair
from .skeleton import (Control, TimeGrid, Trajectory, march, mr_norm, mr_norm_array, residual,
                       solve_skeleton, verify_global_bound)
from .triple import SpectralTriple

log = logging.getLogger(__name__)


class RateNonConvergence(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# events


@dataclass(frozen=True)
class TargetEvent:
    """A set of paths described by a nonnegative distance that vanishes on the set.

    Build with :meth:`endpoint_ball`, :meth:`endpoint_halfspace`,
    :meth:`path_functional` or :meth:`whole_space`.
    """

    kind: str
    z: Optional[np.ndarray] = None
    delta: float = 0.0
    direction: Optional[np.ndarray] = None
    level: float = 0.0
    functional: Optional[Callable] = None
    functional_grad: Optional[Callable] = None

    @classmethod
    def endpoint_ball(cls, z, delta: float) -> "TargetEvent":
        if not delta > 0:
            raise ValueError("ball radius must be positive")
        return cls("endpoint_ball", z=np.asarray(z, dtype=float), delta=float(delta))

    @classmethod
    def endpoint_halfspace(cls, direction, level: float) -> "TargetEvent":
        """``{u : <direction, u(T)> >= level}``."""
        d = np.atleast_1d(np.asarray(direction, dtype=float))
        if not np.any(d):
            raise ValueError("halfspace direction must be nonzero")
        return cls("endpoint_halfspace", direction=d, level=float(level))

    @classmethod
    def path_functional(cls, fn, grad=None) -> "TargetEvent":
        """``{u : fn(states) <= 0}``; ``fn`` maps ``(N+1, m)`` states to a distance >= 0."""
        return cls("path_functional", functional=fn, functional_grad=grad)

    @classmethod
    def whole_space(cls) -> "TargetEvent":
        return cls("whole_space")

    def distance(self, states) -> float:
        states = np.asarray(states, dtype=float)
        u = states[-1]
        if self.kind == "endpoint_ball":
            return max(0.0, float(np.linalg.norm(u - self.z)) - self.delta)
        if self.kind == "endpoint_halfspace":
            d = self.direction
            return max(0.0, self.level - float(d @ u)) / float(np.linalg.norm(d))
        if self.kind == "path_functional":
            return max(0.0, float(self.functional(states)))
        return 0.0

    def distance_sq_grad(self, states) -> np.ndarray:
        """Gradient of ``distance(states)^2`` with respect to all states."""
        states = np.asarray(states, dtype=float)
        out = np.zeros_like(states)
        u = states[-1]
        if self.kind == "endpoint_ball":
            r = u - self.z
            nr = float(np.linalg.norm(r))
            if nr > self.delta:
                out[-1] = 2.0 * (nr - self.delta) * r / nr
        elif self.kind == "endpoint_halfspace":
            d = self.direction
            nd2 = float(d @ d)
            gap = self.level - float(d @ u)
            if gap > 0:
                out[-1] = -2.0 * gap * d / nd2
        elif self.kind == "path_functional":
            dist = self.distance(states)
            if dist > 0:
                g = (self.functional_grad(states) if self.functional_grad is not None
                     else _fd_grad(self.functional, states))
                out = 2.0 * dist * g
        return out

    def contains(self, states) -> np.ndarray:
        """Membership of one path ``(N+1, m)`` or a batch ``(P, N+1, m)``."""
        states = np.asarray(states, dtype=float)
        batch = states.ndim == 3
        S = states if batch else states[None]
        u = S[:, -1]
        if self.kind == "endpoint_ball":
            hit = np.linalg.norm(u - self.z, axis=1) <= self.delta
        elif self.kind == "endpoint_halfspace":
            hit = u @ self.direction >= self.level
        elif self.kind == "path_functional":
            hit = np.array([self.functional(s) <= 0 for s in S])
        else:
            hit = np.ones(len(S), dtype=bool)
        hit &= np.all(np.isfinite(u), axis=1)
        return hit if batch else bool(hit[0])

    def as_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "endpoint_ball":
            out.update(z=self.z.tolist(), delta=self.delta)
        elif self.kind == "endpoint_halfspace":
            out.update(direction=self.direction.tolist(), level=self.level)
        return out

    @classmethod
    def from_config(cls, cfg: dict, dim: int) -> "TargetEvent":
        kind = cfg.get("kind", "endpoint_ball")
        if kind == "endpoint_ball":
            z = np.broadcast_to(np.asarray(cfg["z"], dtype=float), (dim,))
            return cls.endpoint_ball(z, cfg.get("delta", 1e-3))
        if kind == "endpoint_halfspace":
            d = np.broadcast_to(np.asarray(cfg.get("direction", 1.0), dtype=float), (dim,))
            return cls.endpoint_halfspace(d, cfg["level"])
        if kind == "whole_space":
            return cls.whole_space()
        raise ValueError(f"event kind {kind!r} cannot be built from a config")


def _fd_grad(fn, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + h
        fp = fn(x)
        flat[j] = old - h
        fm = fn(x)
        flat[j] = old
        gf[j] = (fp - fm) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# action along a control


def rate_along(triple: SpectralTriple, pair: CoefficientPair, psi: Control, x, **solver_kw):
    """``(1/2 int ||psi||^2, u^psi)`` with the trajectory from the fixed-point solver."""
    if not np.all(np.isfinite(psi.values)):
        raise ValueError("control has non-finite values")
    traj = solve_skeleton(triple, pair, psi, x, psi.grid, **solver_kw)
    return psi.action(), traj


# ---------------------------------------------------------------------------
# adjoint


def _implicit_T(a, lam, dt):
    """Solve ``(I + dt a)^T mu = lam``."""
    if a.ndim == 1:
        return lam / (1.0 + dt * a)
    return np.linalg.solve(np.eye(a.shape[0]) + dt * a.T, lam)


def _vjp_F(pair, t, u, mu):
    if pair.F is None:
        return 0.0
    if pair.F_vjp is not None:
        return pair.F_vjp(t, u, mu)
    return _fd_grad(lambda v: float(mu @ pair.F(t, v)), u)


def _vjp_G(pair, t, u, mu, psi):
    if pair.G is None:
        return 0.0
    if pair.G_vjp is not None:
        return pair.G_vjp(t, u, mu, psi)
    return _fd_grad(lambda v: float(mu @ (pair.G(t, v) @ psi)), u)


def backward_sweep(pair: CoefficientPair, psi: Control, traj: Trajectory, state_grad) -> np.ndarray:
    """Gradient in ``psi`` of a function of the march states, given its state gradient.

    ``state_grad`` is ``(N+1, m)``; the returned array is ``(N, K)``.  Only
    valid for semilinear pairs (``A0``, ``B0`` independent of the state).
    """
    grid = psi.grid
    dt = grid.dt
    S = traj.states
    G = np.asarray(state_grad, dtype=float)
    out = np.zeros_like(psi.values)
    lam = G[-1].copy()
    for i in range(grid.steps - 1, -1, -1):
        t = i * dt
        u = S[i]
        a = np.asarray(pair.A0(t, u), dtype=float)
        mu = _implicit_T(a, lam, dt)
        B = pair.noise(t, u)
        out[i] = dt * (B.T @ mu)
        lam = G[i] + mu + dt * _vjp_F(pair, t, u, mu)
        if pair.B0 is not None:
            b = np.asarray(pair.B0(t, u), dtype=float)
            lam = lam + dt * np.einsum("k,kij,i->j", psi.values[i], b, mu)
        lam = lam + dt * _vjp_G(pair, t, u, mu, psi.values[i])
    return out


def _objective(triple, pair, values, event, x, grid, penalty, cost=None, cost_grad=None):
    psi = Control(grid, values)
    traj = march(triple, pair, psi, x)
    if not np.all(np.isfinite(traj.states)):
        return np.inf, np.zeros_like(values), traj
    J = psi.action()
    sg = np.zeros_like(traj.states)
    if event is not None and penalty:
        J += penalty * event.distance(traj.states) ** 2
        sg += penalty * event.distance_sq_grad(traj.states)
    if cost is not None:
        J += float(cost(traj.states))
        sg += cost_grad(traj.states) if cost_grad is not None else _fd_grad(cost, traj.states)
    if pair.semilinear:
        grad = backward_sweep(pair, psi, traj, sg) + grid.dt * psi.values
    else:
        grad = _fd_grad(lambda v: _objective(triple, pair, v, event, x, grid, penalty, cost, cost_grad)[0],
                        values)
    return J, grad, traj


def adjoint_gradient(triple: SpectralTriple, pair: CoefficientPair, psi: Control, event: Optional[TargetEvent],
                     x, penalty: float = 1.0) -> np.ndarray:
    """Gradient of ``1/2 sum ||psi_i||^2 dt + penalty * dist(u^psi, event)^2`` in every cell.

    Semilinear pairs use the backward adjoint recursion through the
    semi-implicit scheme; quasilinear pairs fall back to central differences.
    """
    return _objective(triple, pair, psi.values, event, x, psi.grid, penalty)[1]


def penalized_objective(triple, pair, psi: Control, event, x, penalty: float = 1.0) -> float:
    return _objective(triple, pair, psi.values, event, x, psi.grid, penalty)[0]


# ---------------------------------------------------------------------------
# minimum action method


@dataclass
class RateResult:
    value: float
    control: Control
    constraint_violation: float
    optimizer_trace: list
    certificate: dict
    converged: bool = True
    feasible: bool = True
    trajectory: Optional[Trajectory] = None

    def as_dict(self) -> dict:
        return {"value": self.value if np.isfinite(self.value) else "inf",
                "constraint_violation": self.constraint_violation,
                "converged": self.converged, "feasible": self.feasible,
                "certificate": self.certificate, "optimizer_trace": self.optimizer_trace}

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.as_dict(), indent=2, default=float))
        return path


@dataclass
class OptConfig:
    penalty0: float = 10.0
    growth: float = 10.0
    stages: int = 4
    max_stages: int = 8
    tol: float = 1e-3
    gtol: float = 1e-8
    maxiter: int = 2000
    restarts: int = 0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "OptConfig":
        return cls(**(d or {}))


def _run_stage(triple, pair, phi0, event, x, grid, penalty, cfg, cost=None, cost_grad=None):
    sq = np.sqrt(grid.dt)
    shape = (grid.steps, pair.noise_dim)

    def fun(phi):
        J, g, _ = _objective(triple, pair, phi.reshape(shape) / sq, event, x, grid, penalty, cost, cost_grad)
        return J, (g / sq).ravel()

    g0 = np.linalg.norm(fun(phi0)[1])
    res = optimize.minimize(fun, phi0, jac=True, method="L-BFGS-B",
                            options={"maxiter": cfg.maxiter, "gtol": cfg.gtol * max(1.0, g0),
                                     "ftol": 1e-15, "maxcor": 20})
    return res


def minimize_rate(triple: SpectralTriple, pair: CoefficientPair, event: TargetEvent, x,
                  grid: TimeGrid, opt_cfg: Optional[OptConfig] = None) -> RateResult:
    """Minimum action method for ``inf{1/2 ||psi||^2 : u^psi in event}``.

    Each continuation stage runs L-BFGS on ``1/2 ||psi||^2 + P dist^2``
    warm-started from the previous stage, with ``P`` multiplied by
    ``growth``.  Stages continue past ``stages`` (up to ``max_stages``) while
    the violation exceeds ``tol``.  If the violation then still refuses to
    shrink the event is declared unreachable and the value is ``+inf``.
    """
    cfg = opt_cfg or OptConfig()
    x = triple.check(x).astype(float)
    n = grid.steps * pair.noise_dim
    starts = [np.zeros(n)]
    rng = np.random.default_rng(cfg.seed)
    starts += [rng.standard_normal(n) for _ in range(cfg.restarts)]
    best = None
    for s, phi in enumerate(starts):
        res = _continuation(triple, pair, event, x, grid, cfg, phi)
        res.optimizer_trace.insert(0, {"start": s})
        if best is None or (res.feasible and (not best.feasible or res.value < best.value)):
            best = res
    return best


def _continuation(triple, pair, event, x, grid, cfg, phi):
    trace = []
    P = cfg.penalty0
    viol_hist = []
    ok = True
    stage = 0
    while True:
        res = _run_stage(triple, pair, phi, event, x, grid, P, cfg)
        phi = res.x
        psi = Control(grid, phi.reshape(grid.steps, pair.noise_dim) / np.sqrt(grid.dt))
        traj = march(triple, pair, psi, x)
        viol = event.distance(traj.states)
        ok = ok and bool(res.success)
        viol_hist.append(viol)
        trace.append({"stage": stage, "penalty": P, "iterations": int(res.nit),
                      "objective": float(res.fun), "action": psi.action(), "violation": viol,
                      "grad_norm": float(np.linalg.norm(res.jac)), "message": str(res.message)})
        stage += 1
        if stage >= cfg.stages and viol <= cfg.tol:
            break
        if stage >= cfg.max_stages:
            break
        P *= cfg.growth
    feasible = viol <= cfg.tol
    if not feasible and len(viol_hist) >= 2 and viol_hist[-1] > 0.5 * viol_hist[-2]:
        log.warning("event looks unreachable: violation %.3g did not shrink under continuation", viol)
        value = np.inf
    else:
        value = psi.action()
    cert = {"mr_norm": mr_norm(traj), "endpoint_distance": viol,
            "skeleton_residual": residual(triple, pair, psi, traj, x),
            "global_bound_margin": verify_global_bound(traj, pair, psi, x),
            "final_penalty": P}
    return RateResult(value, psi, viol, trace, cert, converged=ok and (feasible or not np.isfinite(value)),
                      feasible=feasible, trajectory=traj)


def minimize_functional(triple: SpectralTriple, pair: CoefficientPair, cost, x, grid: TimeGrid,
                        cost_grad=None, opt_cfg: Optional[OptConfig] = None):
    """``inf_psi 1/2 ||psi||^2 + cost(u^psi)``; returns ``(value, control, trajectory)``."""
    cfg = opt_cfg or OptConfig()
    x = triple.check(x).astype(float)
    phi0 = np.zeros(grid.steps * pair.noise_dim)
    res = _run_stage(triple, pair, phi0, None, x, grid, 0.0, cfg, cost, cost_grad)
    psi = Control(grid, res.x.reshape(grid.steps, pair.noise_dim) / np.sqrt(grid.dt))
    traj = march(triple, pair, psi, x)
    return float(res.fun), psi, traj


# ---------------------------------------------------------------------------
# linear-quadratic oracle


def endpoint_response(triple: SpectralTriple, pair: CoefficientPair, x, grid: TimeGrid):
    """``(a, L)`` with ``u_N = a + L psi`` for pairs whose endpoint is affine in the control."""
    if not (pair.is_linear and pair.B0 is None):
        raise ValueError("endpoint is affine in the control only for linear pairs with additive noise")
    zero = Control.zeros(grid, pair.noise_dim)
    traj = march(triple, pair, zero, x)
    a = traj.endpoint
    m = triple.dim
    L = np.empty((m, grid.steps * pair.noise_dim))
    for j in range(m):
        e = np.zeros((grid.steps + 1, m))
        e[-1, j] = 1.0
        L[j] = backward_sweep(pair, zero, traj, e).ravel()
    return a, L


def lq_oracle(triple: SpectralTriple, pair: CoefficientPair, event: TargetEvent, x, grid: TimeGrid) -> float:
    """Exact discrete optimum of ``1/2 sum ||psi_i||^2 dt`` over the event for affine endpoints.

    With ``u_N = a + L psi`` and Gramian ``W = L L^T / dt``: a point target
    costs ``1/2 r^T W^-1 r``, a halfspace ``<d,u> >= c`` costs
    ``1/2 max(0, c - <d,a>)^2 / d^T W d`` and a ball is solved through its
    one-dimensional secular equation.
    """
    a, L = endpoint_response(triple, pair, x, grid)
    W = L @ L.T / grid.dt
    if event.kind == "whole_space":
        return 0.0
    if event.kind == "endpoint_halfspace":
        d = event.direction
        gap = event.level - float(d @ a)
        return 0.5 * max(0.0, gap) ** 2 / float(d @ W @ d)
    if event.kind != "endpoint_ball":
        raise ValueError("the oracle handles endpoint events only")
    r = event.z - a
    nr = float(np.linalg.norm(r))
    if nr <= event.delta:
        return 0.0
    w, Q = np.linalg.eigh(W)
    rq = Q.T @ r

    def y_of(mu):  # minimizer of 1/2 y^T W^-1 y + mu/2 ||y - r||^2
        return rq * mu * w / (1.0 + mu * w)

    def gap(mu):
        return float(np.linalg.norm(y_of(mu) - rq)) - event.delta

    hi = 1.0
    while gap(hi) > 0:
        hi *= 10.0
    mu = optimize.brentq(gap, 0.0, hi, xtol=1e-300, rtol=1e-15, maxiter=500)
    y = y_of(mu)
    return 0.5 * float(np.sum(y * y / w))


def point_oracle(triple, pair, z, x, grid) -> float:
    """Cost of hitting ``u_N = z`` exactly."""
    a, L = endpoint_response(triple, pair, x, grid)
    W = L @ L.T / grid.dt
    r = np.asarray(z, dtype=float) - a
    return 0.5 * float(r @ np.linalg.solve(W, r))


# ---------------------------------------------------------------------------
# probes


def oscillating_family(psi: Control, n: int, amplitude: float = 1.0, direction: int = 0) -> Control:
    """``psi + amplitude sin(2 pi n t / T) e_direction`` sampled at cell midpoints."""
    g = psi.grid
    vals = psi.values.copy()
    vals[:, direction] += amplitude * np.sin(2 * np.pi * n * g.midpoints / g.T)
    return Control(g, vals)


def weak_continuity_probe(triple: SpectralTriple, pair: CoefficientPair, psi: Control, x, n_list,
                          amplitude: float = 1.0, direction: int = 0) -> list:
    """``||u^{psi_n} - u^psi||_MR`` for oscillatory perturbations that converge weakly to 0."""
    base = solve_skeleton(triple, pair, psi, x, psi.grid)
    rows = []
    for n in n_list:
        tn = solve_skeleton(triple, pair, oscillating_family(psi, n, amplitude, direction), x, psi.grid)
        d = float(mr_norm_array(triple, tn.states - base.states, psi.grid.dt))
        rows.append({"n": int(n), "mr_distance": d})
    return rows


def sublevel_sample(triple: SpectralTriple, pair: CoefficientPair, K: float, x, grid: TimeGrid,
                    n_controls: int, rng: Optional[np.random.Generator] = None) -> dict:
    """Skeleton solutions for random controls on the sphere ``1/2 ||psi||^2 = K``."""
    if K < 0:
        raise ValueError("K must be >= 0")
    rng = np.random.default_rng(0) if rng is None else rng
    trajs, margins, norms = [], [], []
    for _ in range(max(1, n_controls) if K > 0 else 1):
        v = rng.standard_normal((grid.steps, pair.noise_dim))
        psi = Control(grid, v)
        scale = np.sqrt(2 * K) / psi.l2_norm() if K > 0 else 0.0
        psi = Control(grid, v * scale)
        tr = solve_skeleton(triple, pair, psi, x, grid)
        trajs.append(tr.states)
        norms.append(mr_norm(tr))
        margins.append(verify_global_bound(tr, pair, psi, x))
    S = np.array(trajs)
    pair_d = [float(mr_norm_array(triple, S[i] - S[j], grid.dt))
              for i in range(len(S)) for j in range(i + 1, len(S))]
    return {"K": K, "n_controls": len(S), "mr_norms": norms,
            "spread": float(max(norms) - min(norms)),
            "max_pairwise_distance": max(pair_d) if pair_d else 0.0,
            "mean_pairwise_distance": float(np.mean(pair_d)) if pair_d else 0.0,
            "min_global_margin": float(min(margins))}
