"""Command-line experiment runner.

``varldp <subcommand> --config exp.toml [--seed S] [--out-dir D] [--threads T] [--section.key=value ...]``

Exit codes: 0 success, 1 configuration error, 2 certified violation of a
structural property, 3 numerical nonconvergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import config as cfgmod
from . import ldp as ldpmod
from .action import OptConfig, TargetEvent, lq_oracle, minimize_rate
from .coeffs import (AssumptionViolation, check_subcriticality, probe_coercivity_A0B0, probe_coercivity_AB,
                     probe_lipschitz)
from .config import ConfigError
from .models import build_model
from .sde import NoiseConfig, ensemble_summary, ito_identity_check, simulate, tightness_probe, write_paths_csv
from .skeleton import (Control, SkeletonError, TimeGrid, chain_rule_defect, residual, solve_skeleton,
                       verify_global_bound)

log = logging.getLogger("varldp")

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION, EXIT_NONCONVERGENCE = 0, 1, 2, 3
SUBCOMMANDS = ("check", "skeleton", "simulate", "rate", "ldp", "convergence")


class Violation(RuntimeError):
    def __init__(self, message, detail=None):
        super().__init__(message)
        self.detail = detail


class Nonconvergence(RuntimeError):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (str, int, bool)) or obj is None:
        return obj
    return str(obj)


class Run:
    """Single writer for one experiment's artifacts."""

    def __init__(self, cfg: dict, out_dir: Path):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs = []

    def json(self, name, data):
        p = self.out / name
        p.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True))
        self.outputs.append(name)
        return p

    def csv(self, name, rows, columns=None):
        p = self.out / name
        columns = columns or (list(rows[0].keys()) if rows else [])
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for r in rows:
                w.writerow([_csv_cell(r.get(c)) for c in columns])
        self.outputs.append(name)
        return p


def _csv_cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return json.dumps(_jsonable(v))
    return "" if v is None else v


# ---------------------------------------------------------------------------
# shared setup


def _model(cfg):
    return build_model(cfg["model"]["name"], **cfgmod.model_params(cfg))


def _grid(cfg):
    return TimeGrid(cfg["grid"]["T"], cfg["grid"]["steps"])


def _control(cfg, grid, K):
    c = cfg["control"]
    kind = c.get("kind", "zero")
    if kind == "zero":
        return Control.zeros(grid, K)
    if kind == "constant":
        val = np.broadcast_to(np.asarray(c.get("value", 1.0), dtype=float), (K,))
        return Control.constant(grid, val)
    d = c.get("direction", 0)
    if d >= K:
        raise ConfigError(f"control.direction = {d} but the model has {K} noise directions")
    amp, freq = c.get("amplitude", 1.0), c.get("frequency", 1.0)
    vals = np.zeros((grid.steps, K))
    vals[:, d] = amp * np.sin(2 * np.pi * freq * grid.midpoints / grid.T)
    return Control(grid, vals)


def _opt(cfg):
    r = cfg["rate"]
    return OptConfig(penalty0=r["penalty0"], stages=r["stages"], tol=r["tol"], maxiter=r["maxiter"],
                     restarts=r["restarts"], seed=cfg["seed"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_check(cfg, run):
    pair, triple = _model(cfg)
    n = cfg["check"]["n_samples"]
    rng = np.random.default_rng(cfg["seed"])
    T = cfg["grid"]["T"]
    ab = probe_coercivity_AB(pair, triple, T, n, rng)
    a0 = probe_coercivity_A0B0(pair, triple, 1.0, T, n, rng)
    sub = check_subcriticality(pair.exponents) if pair.exponents else []
    rows = [{"probe": "coercivity_AB", "estimate": ab.theta_hat, "declared": ab.declared_theta,
             "certified": ab.certified},
            {"probe": "coercivity_A0B0", "estimate": a0["theta_hat"], "declared": pair.theta,
             "certified": a0["theta_hat"] >= pair.theta - 1e-8}]
    lips = {}
    for which in ("F", "G", "A0", "B0"):
        if which in ("F", "G") and getattr(pair, which) is None:
            continue
        p = probe_lipschitz(pair, triple, which, 1.0, T, min(n, 2000), rng)
        lips[which] = {"c_hat": p.c_hat, "c_hat_half": p.c_hat_half, "stable": p.stable}
        rows.append({"probe": f"lipschitz_{which}", "estimate": p.c_hat, "declared": None, "certified": p.stable})
    report = {"model": pair.name, "coercivity_AB": ab.as_dict(),
              "coercivity_A0B0": {k: v for k, v in a0.items() if k != "witnesses"},
              "subcriticality": [{"rho": str(r), "beta": str(b), "verdict": v}
                                 for (r, b), v in zip(pair.exponents, sub)],
              "lipschitz": lips}
    run.json("check.json", report)
    run.csv("check.csv", rows)
    if ab.falsified or not ab.certified:
        raise Violation(f"coercivity probe found theta_hat = {ab.theta_hat:g} below the declared "
                        f"{pair.theta:g}", {"witness_v": ab.witness_v, "witness_t": ab.witness_t})


def cmd_skeleton(cfg, run):
    pair, triple = _model(cfg)
    grid = _grid(cfg)
    x = cfgmod.initial_state(cfg, triple.dim)
    psi = _control(cfg, grid, pair.noise_dim)
    traj = solve_skeleton(triple, pair, psi, x, grid, tol=cfg["skeleton"]["tol"])
    margin = verify_global_bound(traj, pair, psi, x)
    report = {"action": psi.action(), "mr_norm": traj.mr_norm(), "residual": residual(triple, pair, psi, traj, x),
              "chain_rule_defect": chain_rule_defect(triple, pair, psi, traj), "global_bound_margin": margin,
              "solver": traj.info}
    traj.to_csv(run.out / "trajectory.csv")
    run.outputs.append("trajectory.csv")
    psi.to_csv(run.out / "control.csv")
    run.outputs.append("control.csv")
    run.json("skeleton.json", report)
    if margin < 0:
        raise Violation(f"global MR bound violated (margin {margin:g})")


def cmd_simulate(cfg, run):
    pair, triple = _model(cfg)
    grid = _grid(cfg)
    x = cfgmod.initial_state(cfg, triple.dim)
    s = cfg["simulate"]
    noise = NoiseConfig(pair.noise_dim, cfg["seed"])
    psi = _control(cfg, grid, pair.noise_dim) if s["controlled"] else None
    ens = simulate(triple, pair, s["eps"], x, grid, noise, psi, s["n_paths"])
    table = tightness_probe(ens, s["gammas"], pair, x)
    ito = ito_identity_check(triple, pair, s["eps"], x, grid, noise, min(s["n_paths"], 1000), s["ito_levels"],
                             None if psi is None else (lambda t: psi.values[min(int(t / grid.dt), grid.steps - 1)]))
    run.json("summary.json", ensemble_summary(ens, table, ito))
    run.csv("exceedance.csv", table)
    run.csv("ito.csv", [{"steps": n, "mean_max_defect": d} for n, d in zip(ito.steps, ito.mean_max_defect)])
    if s["write_paths"]:
        write_paths_csv(ens, run.out / "paths.csv")
        run.outputs.append("paths.csv")
    bad = [r for r in table if not r["within_envelope"]]
    if bad:
        raise Violation(f"tightness envelope exceeded at gamma = {[r['gamma'] for r in bad]}")


def _event(ev_cfg, dim):
    if not ev_cfg:
        raise ConfigError("an event table is required for this subcommand")
    try:
        return TargetEvent.from_config(ev_cfg, dim)
    except KeyError as exc:
        raise ConfigError(f"event is missing field {exc}") from exc


def cmd_rate(cfg, run):
    pair, triple = _model(cfg)
    grid = _grid(cfg)
    x = cfgmod.initial_state(cfg, triple.dim)
    event = _event(cfg["rate"].get("event"), triple.dim)
    res = minimize_rate(triple, pair, event, x, grid, _opt(cfg))
    out = res.as_dict()
    out["event"] = event.as_dict()
    if pair.is_linear and pair.B0 is None:
        out["lq_oracle"] = lq_oracle(triple, pair, event, x, grid)
    run.json("rate.json", out)
    res.control.to_csv(run.out / "control.csv")
    run.outputs.append("control.csv")
    run.csv("trace.csv", [r for r in res.optimizer_trace if "stage" in r])
    if not res.converged:
        raise Nonconvergence(f"minimum action method did not converge (violation {res.constraint_violation:g})")


def cmd_ldp(cfg, run):
    pair, triple = _model(cfg)
    grid = _grid(cfg)
    x = cfgmod.initial_state(cfg, triple.dim)
    L = cfg["ldp"]
    report = {}
    status_ok = True
    if "event" in L:
        event = _event(L["event"], triple.dim)
        sl = ldpmod.ldp_slope(triple, pair, event, L["eps_list"], L["n_paths"], x, grid, cfg["seed"],
                              opt_cfg=_opt(cfg))
        report["slope"] = sl.as_dict()
        run.csv("ldp_slope.csv", sl.rows)
        status_ok = sl.status == "ok"
    if L["lln"]:
        lln = ldpmod.lln_check(triple, pair, L["eps_list"], L["n_paths"], x, grid, cfg["seed"])
        report["lln"] = lln
        run.csv("lln.csv", lln["rows"])
    if L["continuity"]:
        psi = _control(cfg, grid, pair.noise_dim)
        cont = ldpmod.stochastic_continuity_probe(triple, pair, [psi], L["eps_list"], L["n_paths"], x, grid,
                                                  L["deltas"], cfg["seed"])
        report["continuity"] = cont
        run.csv("continuity.csv", cont[0]["rows"])
    run.json("ldp.json", report)
    if not status_ok:
        raise Nonconvergence("too few noise levels with hits to fit a rate")


def cmd_convergence(cfg, run):
    C = cfg["convergence"]
    name = cfg["model"]["name"]
    params = cfgmod.model_params(cfg)
    pair, triple = _model(cfg)
    x = cfgmod.initial_state(cfg, triple.dim)
    T = cfg["grid"]["T"]
    report = {}
    # time step
    rows, ends = [], []
    for n in C["steps"]:
        g = TimeGrid(T, n)
        tr = solve_skeleton(triple, pair, _control(cfg, g, pair.noise_dim), x, g)
        ends.append(tr.endpoint)
        rows.append({"steps": n, "dt": g.dt, "mr_norm": tr.mr_norm()})
    for r, e in zip(rows, ends):
        r["endpoint_error_vs_finest"] = float(triple.norm(e - ends[-1], "H"))
    report["dt"] = rows
    run.csv("convergence_dt.csv", rows)
    g = _grid(cfg)
    # spatial truncation
    if C.get("m"):
        rows = []
        for m in C["m"]:
            p, t = build_model(name, **{**params, "m": m})
            xm = cfgmod.initial_state({**cfg, "initial": cfg["initial"]}, t.dim)
            tr = solve_skeleton(t, p, _control(cfg, g, p.noise_dim), xm, g)
            rows.append({"m": m, "endpoint_H_norm": float(t.norm(tr.endpoint, "H")), "mr_norm": tr.mr_norm()})
        report["m"] = rows
        run.csv("convergence_m.csv", rows)
    # noise truncation
    if C.get("noise_modes"):
        rows = []
        for k in C["noise_modes"]:
            p, t = build_model(name, **{**params, "noise_modes": k})
            ens = simulate(t, p, C["eps"], x, g, NoiseConfig(p.noise_dim, cfg["seed"]), None, C["n_paths"])
            sq = np.sum(ens.endpoints ** 2, axis=1)
            rows.append({"noise_modes": k, "mean_sq_endpoint": float(sq.mean()),
                         "se": float(sq.std(ddof=1) / np.sqrt(len(sq)))})
        report["noise_modes"] = rows
        run.csv("convergence_noise.csv", rows)
    run.json("convergence.json", report)


COMMANDS = {"check": cmd_check, "skeleton": cmd_skeleton, "simulate": cmd_simulate, "rate": cmd_rate,
            "ldp": cmd_ldp, "convergence": cmd_convergence}


# ---------------------------------------------------------------------------
# entry point


def _versions():
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "varldp": own}


def build_parser():
    p = argparse.ArgumentParser(prog="varldp", description="Skeleton, simulation and large-deviation experiments.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="TOML or JSON experiment file")
    p.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    p.add_argument("--out-dir", default="out", help="directory for manifest and tables")
    p.add_argument("--threads", type=int, default=1, help="worker threads for path ensembles")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.time()
    try:
        bad = [e for e in extra if not e.startswith("--") or "=" not in e]
        if bad:
            raise ConfigError(f"unrecognised arguments: {' '.join(bad)}")
        raw = cfgmod.load(args.config) if args.config else {}
        raw = cfgmod.apply_overrides(raw, [e[2:] for e in extra])
        if args.seed is not None:
            raw["seed"] = args.seed
        cfg = cfgmod.validate(raw)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ldpmod.set_threads(args.threads)
    r = Run(cfg, args.out_dir)
    code, message, detail = EXIT_OK, "ok", None
    try:
        COMMANDS[args.subcommand](cfg, r)
    except (ConfigError, TypeError) as exc:
        code, message = EXIT_CONFIG, f"config error: {exc}"
    except AssumptionViolation as exc:
        code, message, detail = EXIT_VIOLATION, f"assumption violated: {exc}", exc.witness
    except Violation as exc:
        code, message, detail = EXIT_VIOLATION, f"certified violation: {exc}", exc.detail
    except (SkeletonError, Nonconvergence) as exc:
        code, message = EXIT_NONCONVERGENCE, f"nonconvergence: {exc}"
    if code != EXIT_OK:
        print(message, file=sys.stderr)
    manifest = {"subcommand": args.subcommand, "config": cfg, "config_hash": cfgmod.config_hash(cfg),
                "seed": cfg["seed"], "threads": args.threads, "versions": _versions(),
                "outputs": r.outputs, "exit_code": code, "message": message, "detail": detail,
                "elapsed_s": time.time() - t0}
    r.json("manifest.json", manifest)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
