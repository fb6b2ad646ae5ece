"""Outer iterations: the two policy-iteration algorithms and the fixed-point
baseline with a Newton inner loop.

All three stop on the sup-norm difference between successive density
time-fields (the residuals are recorded but never used to stop).  One outer
iteration is one full pass; counting starts at 1 with the initial policy.
Divergence is declared on non-finite fields or a sup-norm above the blow-up
threshold, returning the last finite iterate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diagnostics, kernels
from .diagnostics import ConvergenceReport, linf_gap, rate_fit_window
from .kernels import NewtonSettings
from .linsys import DEFAULT_SETTINGS, LinearSolveSettings
from .models import ScenarioPreset

CONVERGED = "converged"
DIVERGED = "diverged"
MAX_ITERS = "max_iters"


@dataclass
class Solution:
    U: np.ndarray
    M: np.ndarray
    Q: np.ndarray
    converged: bool
    iterations: int
    status: str


@dataclass
class SolverConfig:
    scenario: ScenarioPreset
    algorithm: str = "pi1"
    tol_density: float = 1e-8
    max_outer_iters: int = 500
    control_bound: float = np.inf
    initial_policy: np.ndarray | None = None  # zeros when omitted
    newton: NewtonSettings = field(default_factory=NewtonSettings)
    linear: LinearSolveSettings = field(default_factory=lambda: DEFAULT_SETTINGS)
    blowup_threshold: float = 1e8
    compute_residuals: bool = True
    reference: Solution | None = None

    def __post_init__(self) -> None:
        if self.algorithm not in ("pi1", "pi2", "fixed_point"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not self.tol_density > 0.0:
            raise ValueError("tol_density must be positive")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")


def solve(config: SolverConfig) -> tuple[Solution, ConvergenceReport]:
    """Dispatch on config.algorithm."""
    return {"pi1": pi1_solve, "pi2": pi2_solve, "fixed_point": fixed_point_solve}[
        config.algorithm](config)


class _Run:
    """Shared outer-loop plumbing: metrics, blow-up checks, phase timers."""

    def __init__(self, config: SolverConfig):
        self.config = config
        sc = config.scenario
        self.scenario = sc
        self.grid = sc.space_grid()
        self.tgrid = sc.time_grid()
        self.model = sc.model
        self.epsilon = sc.epsilon
        self.density0 = sc.initial_density(self.grid)
        self.value_final = sc.terminal_values(self.grid)
        self.report = ConvergenceReport(timings={
            "fp_solve": 0.0, "hjb_solve": 0.0, "policy_update": 0.0,
            "newton_inner": 0.0, "total": 0.0})
        self._t0 = time.perf_counter()

    def initial_policy(self) -> np.ndarray:
        if self.config.initial_policy is not None:
            q0 = np.array(self.config.initial_policy, dtype=float)
            expected = (self.tgrid.steps, self.grid.dim, 2) + self.grid.shape
            if q0.shape != expected:
                raise ValueError(f"initial policy has shape {q0.shape}, expected {expected}")
            return q0
        return np.zeros((self.tgrid.steps, self.grid.dim, 2) + self.grid.shape)

    def timed(self, phase: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        finally:
            self.report.timings[phase] += time.perf_counter() - t0

    def blown_up(self, *fields: np.ndarray) -> bool:
        thresh = self.config.blowup_threshold
        for f in fields:
            if not np.all(np.isfinite(f)) or np.max(np.abs(f)) > thresh:
                return True
        return False

    def record_iteration(self, d: float, value, density, policy) -> None:
        rep = self.report
        rep.d_density.append(d)
        if self.config.compute_residuals:
            res_hjb, res_fp = diagnostics.residual_mfg(
                self.model, value, density, self.grid, self.tgrid, self.epsilon)
        else:
            res_hjb, res_fp = np.nan, np.nan
        rep.res_hjb.append(res_hjb)
        rep.res_fp.append(res_fp)
        ref = self.config.reference
        rep.gap_u.append(linf_gap(value, ref.U) if ref is not None else np.nan)
        rep.gap_m.append(linf_gap(density, ref.M) if ref is not None else np.nan)
        rep.gap_q.append(linf_gap(policy, ref.Q) if ref is not None else np.nan)

    def finish(self, value, density, policy, iterations, status) -> tuple[Solution, ConvergenceReport]:
        rep = self.report
        rep.timings["total"] = time.perf_counter() - self._t0
        d = np.asarray(rep.d_density, dtype=float)
        start, stop = rate_fit_window(d)
        window = d[start:stop]
        if window.size >= 3 and np.all(np.isfinite(window)) and np.all(window > 0.0):
            rep.fitted_rate, rep.fit_r2 = diagnostics.fit_linear_rate(d, (start, stop))
        solution = Solution(U=value, M=density, Q=policy,
                            converged=(status == CONVERGED),
                            iterations=iterations, status=status)
        return solution, rep


def pi1_solve(config: SolverConfig) -> tuple[Solution, ConvergenceReport]:
    """Policy iteration, one control update per pass (FP, HJB, update)."""
    run = _Run(config)
    policy = run.initial_policy()
    value = np.repeat(run.value_final[None], run.tgrid.steps + 1, axis=0)
    density = np.repeat(run.density0[None], run.tgrid.steps + 1, axis=0)
    prev_density = None
    status = MAX_ITERS
    iterations = 0
    for k in range(config.max_outer_iters):
        density_new = run.timed("fp_solve", kernels.fp_forward, run.density0, policy,
                                run.grid, run.tgrid, run.epsilon, config.linear)
        if run.blown_up(density_new):
            status = DIVERGED
            break
        sources = kernels.lagrangian_sources(run.model, density_new, policy)
        value_new = run.timed("hjb_solve", kernels.hjb_backward_linear, run.value_final,
                              policy, sources, run.grid, run.tgrid, run.epsilon,
                              config.linear)
        if run.blown_up(value_new):
            status = DIVERGED
            break
        policy_new = run.timed("policy_update", kernels.policy_update, run.model,
                               value_new, density_new, config.control_bound, run.grid)
        if run.blown_up(policy_new):
            status = DIVERGED
            break
        iterations = k + 1
        d = linf_gap(density_new, prev_density) if prev_density is not None else np.nan
        run.record_iteration(d, value_new, density_new, policy_new)
        value, density, policy = value_new, density_new, policy_new
        prev_density = density_new
        if np.isfinite(d) and d <= config.tol_density:
            status = CONVERGED
            break
    return run.finish(value, density, policy, iterations, status)


def pi2_solve(config: SolverConfig) -> tuple[Solution, ConvergenceReport]:
    """Policy iteration with an extra control refresh between FP and HJB."""
    run = _Run(config)
    policy = run.initial_policy()
    value_tilde = None
    value = np.repeat(run.value_final[None], run.tgrid.steps + 1, axis=0)
    density = np.repeat(run.density0[None], run.tgrid.steps + 1, axis=0)
    prev_density = None
    status = MAX_ITERS
    iterations = 0
    for k in range(config.max_outer_iters):
        density_new = run.timed("fp_solve", kernels.fp_forward, run.density0, policy,
                                run.grid, run.tgrid, run.epsilon, config.linear)
        if run.blown_up(density_new):
            status = DIVERGED
            break
        if value_tilde is None:
            policy_mid = policy  # no value iterate yet: keep the initial policy
        else:
            policy_mid = run.timed("policy_update", kernels.policy_update, run.model,
                                   value_tilde, density_new, config.control_bound,
                                   run.grid)
        if run.blown_up(policy_mid):
            status = DIVERGED
            break
        sources = kernels.lagrangian_sources(run.model, density_new, policy_mid)
        value_tilde_new = run.timed("hjb_solve", kernels.hjb_backward_linear,
                                    run.value_final, policy_mid, sources, run.grid,
                                    run.tgrid, run.epsilon, config.linear)
        if run.blown_up(value_tilde_new):
            status = DIVERGED
            break
        policy_new = run.timed("policy_update", kernels.policy_update, run.model,
                               value_tilde_new, density_new, config.control_bound,
                               run.grid)
        if run.blown_up(policy_new):
            status = DIVERGED
            break
        iterations = k + 1
        d = linf_gap(density_new, prev_density) if prev_density is not None else np.nan
        run.record_iteration(d, value_tilde_new, density_new, policy_new)
        value_tilde = value_tilde_new
        value = value_tilde_new
        density = density_new
        prev_density = density_new
        policy = policy_new
        if np.isfinite(d) and d <= config.tol_density:
            status = CONVERGED
            break
    return run.finish(value, density, policy, iterations, status)


def fixed_point_solve(config: SolverConfig) -> tuple[Solution, ConvergenceReport]:
    """Alternate FP with a frozen drift and a full Newton solve of the HJB."""
    run = _Run(config)
    shape = (run.tgrid.steps + 1,) + run.grid.shape
    value = np.zeros(shape)
    density = np.ones(shape)
    policy = run.initial_policy()
    status = MAX_ITERS
    iterations = 0
    for k in range(config.max_outer_iters):
        drift = run.timed("policy_update", kernels.policy_update, run.model, value,
                          density, config.control_bound, run.grid)
        if run.blown_up(drift):
            status = DIVERGED
            break
        density_new = run.timed("fp_solve", kernels.fp_forward, run.density0, drift,
                                run.grid, run.tgrid, run.epsilon, config.linear)
        if run.blown_up(density_new):
            status = DIVERGED
            break
        t0 = time.perf_counter()
        value_new = kernels.hjb_backward_newton(run.model, run.value_final, density_new,
                                                run.grid, run.tgrid, run.epsilon,
                                                config.newton, config.linear,
                                                initial_guess=value)
        elapsed = time.perf_counter() - t0
        run.report.timings["hjb_solve"] += elapsed
        run.report.timings["newton_inner"] += elapsed
        if run.blown_up(value_new):
            status = DIVERGED
            break
        iterations = k + 1
        d = linf_gap(density_new, density)
        policy = kernels.policy_update(run.model, value_new, density_new,
                                       config.control_bound, run.grid)
        run.record_iteration(d, value_new, density_new, policy)
        value = value_new
        density = density_new
        if d <= config.tol_density:
            status = CONVERGED
            break
    return run.finish(value, density, policy, iterations, status)
