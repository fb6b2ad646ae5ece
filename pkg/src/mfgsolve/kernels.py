"""Space-time sweeps: FP forward, linear HJB backward, policy update, and the
Newton-based nonlinear HJB backward solve.

Staggering convention: policies live on time intervals, Q[n] pairing with
U[n] and M[n+1].  The discrete upwind Hamiltonian used by the Newton solve
and by the residual diagnostics is the policy-consistent composition

    H_eo(m, DU) = Q_pm . DU - L(m, |Q_pm|^2),   Q_pm = split(policy(m, DU)),

which for quadratic Hamiltonians reduces to |DU_pm|^2 / (2 w(m)) - zeta*m
and makes the Newton kernel and the policy iterations share the same fixed
point for every growth exponent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import (LEFT, RIGHT, SpaceGrid, TimeGrid, eo_norm_sq, eo_split,
                   laplacian_apply, staggered_dot, upwind_gradient)
from .linsys import (DEFAULT_SETTINGS, LinearSolveError, LinearSolveSettings,
                     advection_matrix, fp_step, hjb_step, laplacian_matrix)
from .models import HamiltonianModel

_DENSITY_ROUNDOFF = 1e-10


class NewtonError(RuntimeError):
    """Raised when the inner Newton iteration fails to converge."""

    def __init__(self, message: str, time_index: int, residual: float):
        super().__init__(message)
        self.time_index = time_index
        self.residual = residual


@dataclass(frozen=True)
class NewtonSettings:
    tol: float = 1e-11
    max_iters: int = 50

    def __post_init__(self) -> None:
        if not self.tol > 0.0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


def _clip_density(m: np.ndarray) -> np.ndarray:
    """Remove round-off negatives; genuine negative densities are an error.

    The round-off tolerance is absolute at unit mass scale and proportional
    for fields far from it (rounding in the linear solves scales with the
    field norm, relevant while a diverging run blows up).
    """
    m = np.asarray(m, dtype=float)
    with np.errstate(invalid="ignore"):
        tol = max(_DENSITY_ROUNDOFF, 1e-14 * float(np.max(np.abs(m), initial=0.0)))
        if m.min() < -tol:
            raise ValueError(f"density has negative entries below -{tol:g}")
    return np.maximum(m, 0.0)


def lagrangian_source(model: HamiltonianModel, density_next: np.ndarray,
                      policy_pm: np.ndarray) -> np.ndarray:
    """Running-cost source of the linear HJB step: L(M_next, |Q_pm|^2)."""
    m = _clip_density(density_next)
    return model.lagrangian(m, eo_norm_sq(policy_pm))


def staggered_policy(model: HamiltonianModel, density: np.ndarray, grad: np.ndarray,
                     bound: float = np.inf) -> np.ndarray:
    """Optimal control per side from that side's one-sided gradient vector."""
    m = _clip_density(density)
    out = np.empty_like(grad)
    out[:, LEFT] = model.optimal_policy(m, grad[:, LEFT], bound)
    out[:, RIGHT] = model.optimal_policy(m, grad[:, RIGHT], bound)
    return out


def _time_gradients(value: np.ndarray, grid: SpaceGrid) -> np.ndarray:
    """Staggered one-sided differences of every slice: (T, dim, 2) + shape."""
    h = grid.spacing
    out = np.empty((value.shape[0], grid.dim, 2) + grid.shape)
    for ax in range(grid.dim):
        shifted_back = np.roll(value, 1, axis=1 + ax)
        shifted_fwd = np.roll(value, -1, axis=1 + ax)
        out[:, ax, LEFT] = (value - shifted_back) / h
        out[:, ax, RIGHT] = (shifted_fwd - value) / h
    return out


def _eo_split_time(policy: np.ndarray) -> np.ndarray:
    """EO split of a whole policy time-field (T, dim, 2) + shape."""
    out = np.empty_like(policy)
    out[:, :, LEFT] = np.maximum(policy[:, :, LEFT], 0.0)
    out[:, :, RIGHT] = np.minimum(policy[:, :, RIGHT], 0.0)
    return out


def policy_update(model: HamiltonianModel, value: np.ndarray, density: np.ndarray,
                  bound: float, grid: SpaceGrid) -> np.ndarray:
    """New policy time-field: Q[n] from U[n] and M[n+1]."""
    steps = value.shape[0] - 1
    grads = _time_gradients(value[:steps], grid)
    m = _clip_density(density[1:steps + 1])
    out = np.empty_like(grads)
    for side in (LEFT, RIGHT):
        # components on the leading axis, time folded into the broadcast shape
        p = np.moveaxis(grads[:, :, side], 1, 0)
        out[:, :, side] = np.moveaxis(model.optimal_policy(m, p, bound), 0, 1)
    return out


def lagrangian_sources(model: HamiltonianModel, density: np.ndarray,
                       policy: np.ndarray) -> np.ndarray:
    """Stack of lagrangian_source over all steps: source[n] from M[n+1], Q[n]."""
    steps = policy.shape[0]
    policy_pm = _eo_split_time(policy)
    q_sq = np.sum(policy_pm**2, axis=(1, 2))
    return model.lagrangian(_clip_density(density[1:steps + 1]), q_sq)


def eo_hamiltonian(model: HamiltonianModel, density: np.ndarray,
                   grad: np.ndarray) -> np.ndarray:
    """Monotone discrete Hamiltonian (kinetic upwind part minus zeta*m)."""
    m = _clip_density(density)
    policy_pm = eo_split(staggered_policy(model, m, grad))
    return staggered_dot(policy_pm, grad) - model.lagrangian(m, eo_norm_sq(policy_pm))


def fp_forward(density0: np.ndarray, policy: np.ndarray, grid: SpaceGrid,
               tgrid: TimeGrid, epsilon: float,
               settings: LinearSolveSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Implicit upwind FP sweep from the initial density, one slice per node."""
    out = np.empty((tgrid.steps + 1,) + grid.shape)
    out[0] = density0
    policy_pm = _eo_split_time(policy)
    for n in range(tgrid.steps):
        try:
            out[n + 1] = fp_step(grid, tgrid.dt, epsilon, policy_pm[n], out[n], settings)
        except LinearSolveError as exc:
            raise LinearSolveError(f"FP step to time index {n + 1}: {exc}") from exc
    return out


def hjb_backward_linear(value_final: np.ndarray, policy: np.ndarray, sources: np.ndarray,
                        grid: SpaceGrid, tgrid: TimeGrid, epsilon: float,
                        settings: LinearSolveSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Implicit linear HJB sweep with a frozen policy and per-step sources."""
    out = np.empty((tgrid.steps + 1,) + grid.shape)
    out[tgrid.steps] = value_final
    policy_pm = _eo_split_time(policy)
    for n in range(tgrid.steps - 1, -1, -1):
        rhs = out[n + 1] + tgrid.dt * sources[n]
        try:
            out[n] = hjb_step(grid, tgrid.dt, epsilon, policy_pm[n], rhs, settings)
        except LinearSolveError as exc:
            raise LinearSolveError(f"HJB step to time index {n}: {exc}") from exc
    return out


def newton_residual(model: HamiltonianModel, value_next: np.ndarray, value: np.ndarray,
                    density_next: np.ndarray, grid: SpaceGrid, dt: float,
                    epsilon: float) -> np.ndarray:
    """Residual of one implicit nonlinear HJB step at the candidate slice."""
    grad = upwind_gradient(value, grid)
    return (-(value_next - value) / dt
            - epsilon * laplacian_apply(value, grid)
            + eo_hamiltonian(model, density_next, grad))


def newton_jacobian(model: HamiltonianModel, density_next: np.ndarray,
                    value: np.ndarray, grid: SpaceGrid, tgrid: TimeGrid,
                    epsilon: float) -> sp.csr_matrix:
    """Jacobian I/dt - eps*Lap + Adv(Q_pm) with Q_pm split from H_p at DU."""
    grad = upwind_gradient(value, grid)
    policy_pm = eo_split(staggered_policy(model, density_next, grad))
    eye = sp.identity(grid.num_nodes, format="csr")
    return (eye / tgrid.dt - epsilon * laplacian_matrix(grid)
            + advection_matrix(grid, policy_pm))


def hjb_backward_newton(model: HamiltonianModel, value_final: np.ndarray,
                        density: np.ndarray, grid: SpaceGrid, tgrid: TimeGrid,
                        epsilon: float, settings: NewtonSettings = NewtonSettings(),
                        linear: LinearSolveSettings = DEFAULT_SETTINGS,
                        initial_guess: np.ndarray | None = None,
                        residual_log: list | None = None) -> np.ndarray:
    """Nonlinear HJB sweep, solving each implicit step by Newton's method.

    Each step is warm-started from the matching slice of ``initial_guess``
    when given (e.g. the previous outer iterate) and from the already-solved
    next time slice otherwise.
    """
    out = np.empty((tgrid.steps + 1,) + grid.shape)
    out[tgrid.steps] = value_final
    for n in range(tgrid.steps - 1, -1, -1):
        guess = initial_guess[n] if initial_guess is not None else out[n + 1]
        log = [] if residual_log is not None else None
        out[n] = _newton_step(model, out[n + 1], guess, density[n + 1], grid,
                              tgrid.dt, epsilon, settings, linear, n, log)
        if residual_log is not None:
            residual_log.append(log)
    return out


def _newton_step(model, value_next, guess, density_next, grid, dt, epsilon,
                 settings, linear, time_index, log):
    density_next = _clip_density(density_next)
    u = np.array(guess, dtype=float, copy=True)
    res = newton_residual(model, value_next, u, density_next, grid, dt, epsilon)
    res_norm = float(np.max(np.abs(res)))
    if log is not None:
        log.append(res_norm)
    for _ in range(settings.max_iters):
        if res_norm <= settings.tol:
            return u
        grad = upwind_gradient(u, grid)
        policy_pm = eo_split(staggered_policy(model, density_next, grad))
        # J = A_HJB / dt, so J delta = -res becomes A_HJB delta = -dt*res
        try:
            delta = hjb_step(grid, dt, epsilon, policy_pm, -dt * res, linear)
        except LinearSolveError as exc:
            raise NewtonError(f"Jacobian solve failed at time index {time_index}: {exc}",
                              time_index, res_norm) from exc
        step = 1.0
        while True:
            u_new = u + step * delta
            res_new = newton_residual(model, value_next, u_new, density_next, grid,
                                      dt, epsilon)
            res_new_norm = float(np.max(np.abs(res_new)))
            # damping guard: halve the step on a 10x residual blow-up
            if res_new_norm <= 10.0 * res_norm or step <= 1.0 / 64.0:
                break
            step *= 0.5
        u, res, res_norm = u_new, res_new, res_new_norm
        if log is not None:
            log.append(res_norm)
    if res_norm <= settings.tol:
        return u
    raise NewtonError(
        f"Newton did not reach tol={settings.tol:g} at time index {time_index} "
        f"after {settings.max_iters} iterations (residual {res_norm:.3e})",
        time_index, res_norm)
