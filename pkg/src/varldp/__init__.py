"""Numerical toolkit for stochastic evolution equations in the critical variational setting.

Modules
-------
triple    spectral Gelfand triples and their norms
coeffs    coefficient pairs and randomized assumption probes
skeleton  controlled deterministic equation, fixed-point solver, certificates
sde       small-noise simulation and path diagnostics
action    rate function, minimum action method, LQ oracle
ldp       Monte Carlo probes of the small-noise asymptotics
models    shipped coefficient pairs
cli       experiment runner
"""
from .action import RateResult, TargetEvent, minimize_rate, rate_along
from .coeffs import AssumptionViolation, CoefficientPair, check_subcriticality
from .models import build_model
from .sde import NoiseConfig, PathEnsemble, simulate
from .skeleton import Control, TimeGrid, Trajectory, solve_skeleton
from .triple import SpectralTriple

__all__ = [
    "AssumptionViolation", "CoefficientPair", "Control", "NoiseConfig", "PathEnsemble", "RateResult",
    "SpectralTriple", "TargetEvent", "TimeGrid", "Trajectory", "build_model", "check_subcriticality",
    "minimize_rate", "rate_along", "simulate", "solve_skeleton",
]
