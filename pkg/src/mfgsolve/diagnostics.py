"""Residuals of the discrete MFG system, convergence-rate estimation, and the
maximum-horizon sweep.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid import SpaceGrid, TimeGrid, divergence, eo_split, laplacian_apply, upwind_gradient
from .kernels import _clip_density, eo_hamiltonian, staggered_policy
from .models import HamiltonianModel, ScenarioPreset, build_scenario


@dataclass
class ConvergenceReport:
    """Per-iteration metrics of an outer solve plus the fitted linear rate.

    Row k describes outer iteration k+1; d_density[k] is the sup distance
    between the density fields of iterations k+1 and k (nan for the first).
    """

    d_density: list = field(default_factory=list)
    res_hjb: list = field(default_factory=list)
    res_fp: list = field(default_factory=list)
    gap_u: list = field(default_factory=list)
    gap_m: list = field(default_factory=list)
    gap_q: list = field(default_factory=list)
    fitted_rate: float = math.nan
    fit_r2: float = math.nan
    timings: dict = field(default_factory=dict)

    def iterations(self) -> int:
        return len(self.d_density)


def linf_gap(a: np.ndarray, b: np.ndarray) -> float:
    """Sup-norm distance between two equally shaped fields."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.max(np.abs(a - b)))


def residual_mfg(model: HamiltonianModel, value: np.ndarray, density: np.ndarray,
                 grid: SpaceGrid, tgrid: TimeGrid, epsilon: float) -> tuple[float, float]:
    """Sup-norm residuals (HJB, FP) of the coupled discrete system.

    The drift of the FP residual is the optimal control evaluated at the
    current fields, H_p(M[n+1], DU[n]), EO-split.
    """
    if value.shape != (tgrid.steps + 1,) + grid.shape:
        raise ValueError(f"value field has shape {value.shape}, expected "
                         f"{(tgrid.steps + 1,) + grid.shape}")
    if density.shape != value.shape:
        raise ValueError(f"shape mismatch: {density.shape} vs {value.shape}")
    dt = tgrid.dt
    res_hjb = 0.0
    res_fp = 0.0
    for n in range(tgrid.steps):
        m_next = _clip_density(density[n + 1])
        grad = upwind_gradient(value[n], grid)
        hjb = (-(value[n + 1] - value[n]) / dt
               - epsilon * laplacian_apply(value[n], grid)
               + eo_hamiltonian(model, m_next, grad))
        res_hjb = max(res_hjb, float(np.max(np.abs(hjb))))
        policy_pm = eo_split(staggered_policy(model, m_next, grad))
        fp = ((density[n + 1] - density[n]) / dt
              - epsilon * laplacian_apply(density[n + 1], grid)
              - divergence(density[n + 1], policy_pm, grid))
        res_fp = max(res_fp, float(np.max(np.abs(fp))))
    return res_hjb, res_fp


def fit_linear_rate(d: "list[float] | np.ndarray",
                    window: tuple[int, int] | None = None) -> tuple[float, float]:
    """Least-squares fit of log d_k against k; returns (exp(slope), r^2)."""
    d = np.asarray(d, dtype=float)
    if window is not None:
        start, stop = window
        d = d[start:stop]
    if d.size < 3:
        raise ValueError(f"need at least 3 points to fit a rate, got {d.size}")
    if np.any(d <= 0.0):
        raise ValueError("rate fit requires strictly positive values")
    k = np.arange(d.size, dtype=float)
    logd = np.log(d)
    slope, intercept = np.polyfit(k, logd, 1)
    fitted = slope * k + intercept
    ss_res = float(np.sum((logd - fitted) ** 2))
    ss_tot = float(np.sum((logd - logd.mean()) ** 2))
    r2 = 1.0 if ss_tot <= 1e-30 else 1.0 - ss_res / ss_tot
    return float(np.exp(slope)), r2


def rate_fit_window(d: "list[float] | np.ndarray", start_iteration: int = 5,
                    floor: float = 1e-7) -> tuple[int, int]:
    """Window over which the linear rate is fitted: from the given iteration
    (1-based, matching report rows) to the first entry at or below the floor.
    Skips the transient head and the round-off plateau tail."""
    d = np.asarray(d, dtype=float)
    start = start_iteration - 1
    stop = d.size
    below = np.nonzero(d <= floor)[0]
    if below.size:
        stop = int(below[0])
    return start, stop


@dataclass
class SweepResult:
    """Largest converging horizon per (beta, zeta) cell of a parameter grid."""

    betas: list
    zetas: list
    t_ladder: list
    verdicts: dict  # (beta, zeta) -> list[bool], aligned with t_ladder
    max_t: dict     # (beta, zeta) -> float, nan if nothing converged
    censored: dict  # (beta, zeta) -> True if converged at the ladder cap
    warnings: list = field(default_factory=list)

    def cell_label(self, beta: float, zeta: float) -> str:
        """Table-style verdict: '>=cap', a plain number, or '<first rung'."""
        if self.censored[(beta, zeta)]:
            return f">={_fmt(self.max_t[(beta, zeta)])}"
        if math.isnan(self.max_t[(beta, zeta)]):
            return f"<{_fmt(self.t_ladder[0])}"
        return _fmt(self.max_t[(beta, zeta)])


def _fmt(x: float) -> str:
    return f"{x:g}"


def summarize_ladder(t_ladder, converged_flags) -> tuple[float, bool, list[str]]:
    """Reduce per-rung verdicts to (max_t, censored, non-monotonicity notes)."""
    max_t = math.nan
    for t, ok in zip(t_ladder, converged_flags):
        if ok:
            max_t = t
    notes = [f"non-monotone ladder: diverged at T={_fmt(t)} "
             f"but converged at T={_fmt(max_t)}"
             for t, ok in zip(t_ladder, converged_flags)
             if not ok and not math.isnan(max_t) and t < max_t]
    censored = bool(converged_flags) and bool(converged_flags[-1])
    return max_t, censored, notes


def _sweep_cell(args):
    (name, base_overrides, beta, zeta, t_ladder, dt, tol_density,
     max_outer_iters) = args
    from .solvers import SolverConfig, pi1_solve

    flags = []
    for t in t_ladder:
        overrides = dict(base_overrides)
        overrides.update({"beta": beta, "zeta": zeta, "T": t,
                          "N": max(1, round(t / dt))})
        scenario = build_scenario(name, overrides)
        config = SolverConfig(scenario=scenario, algorithm="pi1",
                              tol_density=tol_density,
                              max_outer_iters=max_outer_iters,
                              compute_residuals=False)
        try:
            solution, _ = pi1_solve(config)
            flags.append(bool(solution.converged))
        except Exception:
            flags.append(False)
    return beta, zeta, flags


def max_t_sweep(base: ScenarioPreset, beta_list, zeta_list, t_ladder,
                tol_density: float = 1e-8, max_outer_iters: int = 200,
                jobs: int = 1) -> SweepResult:
    """Run pi1 over a (beta, zeta) grid and a horizon ladder at fixed dt.

    The time step of ``base`` is held fixed: each rung T gets N = T/dt steps.
    Solver failures of any kind count as non-convergence.
    """
    t_ladder = list(t_ladder)
    if any(b <= a for a, b in zip(t_ladder, t_ladder[1:])) or not t_ladder:
        raise ValueError("t_ladder must be non-empty and strictly increasing")
    dt = base.horizon / base.time_steps
    base_overrides = {"I": base.nodes_per_dim, "epsilon": base.epsilon}
    tasks = [(base.name, base_overrides, beta, zeta, t_ladder, dt,
              tol_density, max_outer_iters)
             for beta in beta_list for zeta in zeta_list]

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cell_results = list(pool.map(_sweep_cell, tasks))
    else:
        cell_results = [_sweep_cell(t) for t in tasks]

    result = SweepResult(betas=list(beta_list), zetas=list(zeta_list),
                         t_ladder=t_ladder, verdicts={}, max_t={}, censored={})
    for beta, zeta, flags in cell_results:
        max_t, censored, notes = summarize_ladder(t_ladder, flags)
        result.verdicts[(beta, zeta)] = flags
        result.max_t[(beta, zeta)] = max_t
        result.censored[(beta, zeta)] = censored
        for note in notes:
            message = f"(beta={beta:g}, zeta={zeta:g}): {note}"
            result.warnings.append(message)
            warnings.warn(message)

    # observed Table-1 structure: max_t should not increase with zeta
    for beta in result.betas:
        ordered = sorted(result.zetas)
        for z_small, z_large in zip(ordered, ordered[1:]):
            lo = result.max_t[(beta, z_large)]
            hi = result.max_t[(beta, z_small)]
            lo = -math.inf if math.isnan(lo) else lo
            hi = -math.inf if math.isnan(hi) else hi
            if lo > hi:
                message = (f"max_T not monotone in zeta at beta={beta:g}: "
                           f"zeta={z_large:g} reaches {lo:g} but zeta={z_small:g} "
                           f"only {hi:g}")
                result.warnings.append(message)
                warnings.warn(message)
    return result
