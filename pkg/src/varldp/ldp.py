"""Monte Carlo probes of the small-noise asymptotics.

All estimators are plain hit counts (or sample means) over paths from
:func:`varldp.sde.simulate`.  Every ``eps`` reuses the same per-path
Brownian streams, so tables at different noise levels are coupled
(common random numbers) and deterministic given the seed.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special
from scipy.special import logsumexp

from .action import OptConfig, TargetEvent, endpoint_response, minimize_functional, minimize_rate
from .coeffs import CoefficientPair
from .sde import NoiseConfig, simulate, wilson_interval
from .skeleton import Control, TimeGrid, solve_skeleton
from .triple import SpectralTriple

log = logging.getLogger(__name__)

DEFAULT_CHUNK = 20000
_THREADS = 1


def set_threads(n: int) -> None:
    """Number of worker threads used to simulate path chunks (results do not depend on it)."""
    global _THREADS
    _THREADS = max(1, int(n))


def _chunks(n_paths, chunk):
    for start in range(0, n_paths, chunk):
        yield start, min(chunk, n_paths - start)


def _reduce(triple, pair, eps, x, grid, noise, control, n_paths, fn, chunk=DEFAULT_CHUNK):
    """Apply ``fn(ensemble)`` chunk by chunk and concatenate the per-path outputs."""
    def work(job):
        start, size = job
        return fn(simulate(triple, pair, eps, x, grid, noise, control, size, path_offset=start))

    jobs = list(_chunks(n_paths, chunk))
    if _THREADS > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(_THREADS) as pool:
            out = list(pool.map(work, jobs))
    else:
        out = [work(j) for j in jobs]
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# LDP slope


@dataclass
class SlopeResult:
    rows: list
    fitted_rate: float
    fit_sigma: float
    rate_ref: float
    used_eps: list
    status: str = "ok"
    rate_detail: dict = field(default_factory=dict)

    @property
    def relative_error(self) -> float:
        if self.rate_ref == 0 or not np.isfinite(self.rate_ref):
            return abs(self.fitted_rate - self.rate_ref)
        return abs(self.fitted_rate - self.rate_ref) / self.rate_ref

    def as_dict(self) -> dict:
        f = (lambda v: v if np.isfinite(v) else str(v))
        return {"rows": self.rows, "fitted_rate": f(self.fitted_rate), "fit_sigma": f(self.fit_sigma),
                "rate_ref": f(self.rate_ref), "used_eps": self.used_eps, "status": self.status,
                "relative_error": f(self.relative_error) if np.isfinite(self.fitted_rate) else None,
                "fit": "-eps log P = I + c eps through the two smallest usable eps",
                "rate_detail": self.rate_detail}


def fit_rate(eps, p_hat, n_paths):
    """Bias-corrected rate from two points of ``-eps log P = I + c eps``.

    Returns ``(I, sigma_I)`` with the delta-method standard error
    ``var(-eps log P) ~ eps^2 (1 - p) / (n p)``.
    """
    (ea, eb), (pa, pb) = eps, p_hat
    ya, yb = -ea * np.log(pa), -eb * np.log(pb)
    I = (eb * ya - ea * yb) / (eb - ea)
    va = ea ** 2 * (1 - pa) / (n_paths * pa)
    vb = eb ** 2 * (1 - pb) / (n_paths * pb)
    sig = np.sqrt(eb ** 2 * va + ea ** 2 * vb) / abs(eb - ea)
    return float(I), float(sig)


def ldp_slope(triple: SpectralTriple, pair: CoefficientPair, event: TargetEvent, eps_list: Sequence[float],
              n_paths: int, x, grid: TimeGrid, seed: int = 0, rate_ref: Optional[float] = None,
              opt_cfg: Optional[OptConfig] = None, chunk: int = DEFAULT_CHUNK) -> SlopeResult:
    """Hit probabilities of ``event`` per ``eps`` and the rate fitted from the two smallest usable ``eps``.

    ``rate_ref`` defaults to :func:`varldp.action.minimize_rate` on the same
    event.  An ``eps`` without hits is dropped with a warning; with fewer than
    two usable values the result carries ``status = "insufficient"`` and a
    NaN fit (or ``+inf`` when the reference rate is itself infinite).
    """
    eps_list = sorted(float(e) for e in eps_list)
    if len(eps_list) < 3:
        raise ValueError("ldp_slope needs at least three noise levels")
    detail = {}
    if rate_ref is None:
        res = minimize_rate(triple, pair, event, x, grid, opt_cfg)
        rate_ref = res.value
        detail = res.as_dict()
    noise = NoiseConfig(pair.noise_dim, seed)
    rows = []
    for eps in eps_list:
        hits = int(_reduce(triple, pair, eps, x, grid, noise, None, n_paths,
                           lambda e: event.contains(e.states), chunk).sum())
        lo, hi = wilson_interval(hits, n_paths)
        p = hits / n_paths
        rows.append({"eps": eps, "hits": hits, "n": n_paths, "p_hat": p, "ci_low": lo, "ci_high": hi,
                     "minus_eps_log_p": float(-eps * np.log(p)) if hits else None})
    usable = [r for r in rows if r["hits"] > 0]
    for r in rows:
        if r["hits"] == 0:
            warnings.warn(f"no hits at eps = {r['eps']}; dropped from the fit", stacklevel=2)
    if len(usable) < 2:
        fitted = np.inf if not np.isfinite(rate_ref) else np.nan
        status = "insufficient"
        log.error("fewer than two noise levels with hits; cannot fit a rate")
        return SlopeResult(rows, fitted, np.nan, rate_ref, [r["eps"] for r in usable], status, detail)
    a, b = usable[0], usable[1]
    if a["hits"] == n_paths and b["hits"] == n_paths:
        I, sig = 0.0, 0.0
    else:
        I, sig = fit_rate((a["eps"], b["eps"]), (a["p_hat"], b["p_hat"]), n_paths)
    return SlopeResult(rows, I, sig, rate_ref, [a["eps"], b["eps"]], "ok", detail)


def gaussian_endpoint_probability(triple, pair, event: TargetEvent, x, grid: TimeGrid, eps: float) -> float:
    """Exact probability of a halfspace endpoint event for affine endpoints (additive noise).

    The scheme's endpoint is Gaussian with mean ``a`` and covariance
    ``eps L L^T / dt``; the tail is evaluated with ``erfc``.
    """
    if event.kind != "endpoint_halfspace":
        raise ValueError("exact probabilities are available for halfspaces only")
    a, L = endpoint_response(triple, pair, x, grid)
    d = event.direction
    var = eps * float(d @ (L @ L.T) @ d) / grid.dt
    return float(0.5 * special.erfc((event.level - d @ a) / np.sqrt(2 * var)))


# ---------------------------------------------------------------------------
# Laplace functional


def laplace_estimate(triple: SpectralTriple, pair: CoefficientPair, h: Callable, eps: float, n_paths: int,
                     x, grid: TimeGrid, seed: int = 0, reference: bool = True, h_grad=None,
                     opt_cfg: Optional[OptConfig] = None, chunk: int = DEFAULT_CHUNK) -> dict:
    """``-eps log E exp(-h(Y)/eps)`` with a jackknife standard error.

    ``h`` maps a batch of paths ``(P, N+1, m)`` to ``(P,)`` values.  With
    ``reference`` the variational value ``inf_psi (1/2 ||psi||^2 + h(u^psi))``
    is computed for comparison.
    """
    noise = NoiseConfig(pair.noise_dim, seed)
    hv = _reduce(triple, pair, eps, x, grid, noise, None, n_paths, lambda e: np.asarray(h(e.states)), chunk)
    ok = np.isfinite(hv)
    if not ok.all():
        warnings.warn(f"{(~ok).sum()} path(s) with non-finite h dropped", stacklevel=2)
        hv = hv[ok]
    n = len(hv)
    lw = -hv / eps
    lse = logsumexp(lw)
    est = -eps * (lse - np.log(n))
    # leave-one-out estimates
    with np.errstate(divide="ignore"):
        loo_lse = lse + np.log1p(-np.exp(lw - lse))
    loo = -eps * (loo_lse - np.log(n - 1))
    fin = np.isfinite(loo)
    jk_se = float(np.sqrt((n - 1) / n * np.sum((loo[fin] - loo[fin].mean()) ** 2)))
    w = np.exp(lw - lse)
    ess = float(1.0 / np.sum(w * w))
    if ess < 10:
        warnings.warn(f"effective sample size {ess:.1f} < 10; weights are degenerate", stacklevel=2)
    out = {"eps": eps, "n": n, "estimate": float(est), "jackknife_se": jk_se, "ess": ess}
    if reference:
        val, _, _ = minimize_functional(triple, pair, lambda s: float(h(s[None])[0]), x, grid, h_grad, opt_cfg)
        out["reference"] = val
    return out


# ---------------------------------------------------------------------------
# LLN and stochastic continuity


def _loglog_slope(eps, vals):
    eps, vals = np.asarray(eps, dtype=float), np.asarray(vals, dtype=float)
    good = (vals > 0) & (eps > 0)
    if good.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(eps[good]), np.log(vals[good]), 1)[0])


def lln_check(triple: SpectralTriple, pair: CoefficientPair, eps_list, n_paths: int, x, grid: TimeGrid,
              seed: int = 0, chunk: int = DEFAULT_CHUNK) -> dict:
    """Median of ``||Y^eps - u^0||_{C([0,T];H)}`` per ``eps`` and its log-log slope."""
    u0 = solve_skeleton(triple, pair, Control.zeros(grid, pair.noise_dim), x, grid).states
    noise = NoiseConfig(pair.noise_dim, seed)
    rows = []
    for eps in eps_list:
        d = _reduce(triple, pair, eps, x, grid, noise, None, n_paths, lambda e: e.sup_distance(u0), chunk)
        rows.append({"eps": float(eps), "median": float(np.median(d)), "mean": float(np.mean(d)),
                     "q90": float(np.quantile(d, 0.9))})
    meds = [r["median"] for r in rows]
    order = np.argsort([-r["eps"] for r in rows])
    sorted_meds = [meds[i] for i in order]
    return {"rows": rows, "slope": _loglog_slope([r["eps"] for r in rows], meds),
            "strictly_decreasing": bool(all(a > b for a, b in zip(sorted_meds, sorted_meds[1:])))}


def stochastic_continuity_probe(triple: SpectralTriple, pair: CoefficientPair, controls: Sequence[Control],
                                eps_list, n_paths: int, x, grid: TimeGrid, deltas=(0.1, 0.05), seed: int = 0,
                                chunk: int = DEFAULT_CHUNK) -> list:
    """Exceedances ``P(||X^eps - u^Psi||_MR > delta)`` for deterministic controls ``Psi``."""
    noise = NoiseConfig(pair.noise_dim, seed)
    out = []
    for c_idx, psi in enumerate(controls):
        u = solve_skeleton(triple, pair, psi, x, grid).states
        rows = []
        for eps in eps_list:
            d = _reduce(triple, pair, eps, x, grid, noise, psi, n_paths, lambda e: e.mr_distance(u), chunk)
            for delta in deltas:
                hits = int(np.sum(d > delta))
                lo, hi = wilson_interval(hits, n_paths)
                rows.append({"control": c_idx, "eps": float(eps), "delta": float(delta), "hits": hits,
                             "p_hat": hits / n_paths, "ci_low": lo, "ci_high": hi,
                             "median_distance": float(np.median(d))})
        monotone = {}
        for delta in deltas:
            seq = [r["p_hat"] for r in sorted(rows, key=lambda r: -r["eps"]) if r["delta"] == delta]
            monotone[float(delta)] = bool(all(a > b for a, b in zip(seq, seq[1:])))
        out.append({"control": c_idx, "action": psi.action(), "rows": rows, "strictly_decreasing": monotone})
    return out
