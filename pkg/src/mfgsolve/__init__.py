"""Solvers for time-dependent mean field games with congestion on the torus."""

from .diagnostics import (ConvergenceReport, SweepResult, fit_linear_rate, linf_gap,
                          max_t_sweep, residual_mfg)
from .grid import SpaceGrid, TimeGrid, total_mass
from .kernels import NewtonSettings
from .linsys import LinearSolveSettings
from .models import HamiltonianModel, ScenarioPreset, build_scenario
from .solvers import (Solution, SolverConfig, fixed_point_solve, pi1_solve,
                      pi2_solve, solve)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceReport", "SweepResult", "fit_linear_rate", "linf_gap",
    "max_t_sweep", "residual_mfg", "SpaceGrid", "TimeGrid", "total_mass",
    "NewtonSettings", "LinearSolveSettings", "HamiltonianModel",
    "ScenarioPreset", "build_scenario", "Solution", "SolverConfig",
    "fixed_point_solve", "pi1_solve", "pi2_solve", "solve", "__version__",
]
