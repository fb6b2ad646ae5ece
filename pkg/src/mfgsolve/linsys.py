"""Sparse systems for one implicit Euler step of the FP and HJB equations.

Both step matrices share the stencil of the periodic Laplacian plus an
upwind drift built from an EO-split policy:

    A_FP  = I - dt*eps*Lap - dt*Div(Q)   (column sums 1: mass conservation)
    A_HJB = I - dt*eps*Lap + dt*Adv(Q)   (row sums 1, M-matrix)

and Div(Q) = -Adv(Q)^T on a periodic grid, so A_FP = A_HJB^T.  Matrices are
scipy.sparse CSR and are assembled fresh for every time step.  In one space
dimension both systems are periodic tridiagonal and the direct method uses a
banded factorization with a rank-2 corner correction instead of a general
sparse factorization.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from .grid import LEFT, RIGHT, SpaceGrid, _require_split


class LinearSolveError(RuntimeError):
    """Raised when a linear system cannot be solved to tolerance."""


@dataclass(frozen=True)
class LinearSolveSettings:
    method: str = "direct"  # "direct" or "krylov"
    rel_tol: float = 1e-12
    max_krylov_iters: int = 1000

    def __post_init__(self) -> None:
        if self.method not in ("direct", "krylov"):
            raise ValueError(f"method must be 'direct' or 'krylov', got {self.method!r}")
        if not self.rel_tol > 0.0:
            raise ValueError("rel_tol must be positive")


DEFAULT_SETTINGS = LinearSolveSettings()


@lru_cache(maxsize=16)
def _index_arrays(dim: int, nodes: int):
    """Flat indices of each node and of its periodic neighbors per axis."""
    shape = (nodes,) * dim
    idx = np.arange(nodes**dim).reshape(shape)
    center = idx.ravel()
    left = tuple(np.roll(idx, 1, axis=ax).ravel() for ax in range(dim))
    right = tuple(np.roll(idx, -1, axis=ax).ravel() for ax in range(dim))
    return center, left, right


def laplacian_matrix(grid: SpaceGrid) -> sp.csr_matrix:
    """Periodic centered second-difference Laplacian."""
    center, left, right = _index_arrays(grid.dim, grid.nodes_per_dim)
    inv_h2 = 1.0 / grid.spacing**2
    n = grid.num_nodes
    rows, cols, vals = [], [], []
    for ax in range(grid.dim):
        rows += [center, center, center]
        cols += [center, left[ax], right[ax]]
        vals += [np.full(n, -2.0 * inv_h2), np.full(n, inv_h2), np.full(n, inv_h2)]
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def advection_matrix(grid: SpaceGrid, policy_pm: np.ndarray) -> sp.csr_matrix:
    """Matrix of U -> sum_ax (Q+_L D_L U + Q-_R D_R U) for a split policy."""
    _require_split(policy_pm)
    center, left, right = _index_arrays(grid.dim, grid.nodes_per_dim)
    inv_h = 1.0 / grid.spacing
    n = grid.num_nodes
    rows, cols, vals = [], [], []
    for ax in range(grid.dim):
        qp = policy_pm[ax, LEFT].ravel() * inv_h
        qm = policy_pm[ax, RIGHT].ravel() * inv_h
        rows += [center, center, center]
        cols += [center, left[ax], right[ax]]
        vals += [qp - qm, -qp, qm]
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def divergence_matrix(grid: SpaceGrid, policy_pm: np.ndarray) -> sp.csr_matrix:
    """Matrix of M -> div(M Q) for a split policy; equals -Adv(Q)^T."""
    _require_split(policy_pm)
    center, left, right = _index_arrays(grid.dim, grid.nodes_per_dim)
    inv_h = 1.0 / grid.spacing
    n = grid.num_nodes
    rows, cols, vals = [], [], []
    for ax in range(grid.dim):
        qp = policy_pm[ax, LEFT]
        qm = policy_pm[ax, RIGHT]
        rows += [center, center, center]
        cols += [center, right[ax], left[ax]]
        vals += [
            (qm - qp).ravel() * inv_h,
            np.roll(qp, -1, axis=ax).ravel() * inv_h,
            -np.roll(qm, 1, axis=ax).ravel() * inv_h,
        ]
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def assemble_fp_matrix(grid: SpaceGrid, dt: float, epsilon: float,
                       policy_pm: np.ndarray) -> sp.csr_matrix:
    """One implicit FP step: (A M_next = M_current)."""
    n = grid.num_nodes
    return (sp.identity(n, format="csr")
            - dt * epsilon * laplacian_matrix(grid)
            - dt * divergence_matrix(grid, policy_pm))


def assemble_hjb_matrix(grid: SpaceGrid, dt: float, epsilon: float,
                        policy_pm: np.ndarray) -> sp.csr_matrix:
    """One implicit HJB step: (A U_current = U_next + dt * source)."""
    n = grid.num_nodes
    return (sp.identity(n, format="csr")
            - dt * epsilon * laplacian_matrix(grid)
            + dt * advection_matrix(grid, policy_pm))


def solve(matrix: sp.spmatrix, rhs: np.ndarray,
          settings: LinearSolveSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Solve matrix @ x = rhs, preserving the shape of rhs."""
    b = np.asarray(rhs, dtype=float)
    flat = b.ravel()
    if matrix.shape[0] != flat.size:
        raise ValueError(f"rhs size {flat.size} does not match matrix dimension {matrix.shape[0]}")
    if settings.method == "direct":
        try:
            x = spla.splu(sp.csc_matrix(matrix)).solve(flat)
        except RuntimeError as exc:  # SuperLU signals exact singularity this way
            raise LinearSolveError(f"direct factorization failed: {exc}") from exc
        if not np.all(np.isfinite(x)):
            raise LinearSolveError("direct solve produced non-finite entries")
        return x.reshape(b.shape)

    try:
        ilu = spla.spilu(sp.csc_matrix(matrix), drop_tol=1e-6, fill_factor=10)
        precond = spla.LinearOperator(matrix.shape, ilu.solve)
    except RuntimeError as exc:
        raise LinearSolveError(f"ILU preconditioner failed: {exc}") from exc
    x, info = spla.gmres(matrix, flat, rtol=settings.rel_tol, atol=0.0,
                         maxiter=settings.max_krylov_iters, M=precond)
    if info != 0:
        achieved = np.max(np.abs(matrix @ x - flat)) / max(np.max(np.abs(flat)), 1e-300)
        raise LinearSolveError(
            f"GMRES did not converge after {settings.max_krylov_iters} iterations "
            f"(achieved relative residual {achieved:.3e})")
    return x.reshape(b.shape)


def _solve_periodic_tridiag(lo: np.ndarray, main: np.ndarray, up: np.ndarray,
                            rhs: np.ndarray) -> np.ndarray:
    """Solve a periodic tridiagonal system via banded LU plus corner correction.

    lo[i] = A[i, i-1 mod n], main[i] = A[i, i], up[i] = A[i, i+1 mod n];
    lo[0] and up[-1] are the periodic corner entries.
    """
    n = main.size
    beta = lo[0]    # A[0, n-1]
    gamma = up[-1]  # A[n-1, 0]
    band = np.zeros((3, n))
    band[0, 1:] = up[:-1]
    band[1, :] = main
    band[2, :-1] = lo[1:]
    stacked = np.zeros((n, 3))
    stacked[:, 0] = rhs
    stacked[0, 1] = beta
    stacked[-1, 2] = gamma
    try:
        sol = solve_banded((1, 1), band, stacked)
    except np.linalg.LinAlgError as exc:
        raise LinearSolveError(f"banded factorization failed: {exc}") from exc
    y, z1, z2 = sol[:, 0], sol[:, 1], sol[:, 2]
    # A = B + [beta e_0, gamma e_{n-1}] [e_{n-1}, e_0]^T; Woodbury with 2x2 capacitance
    cap = np.array([[1.0 + z1[-1], z2[-1]], [z1[0], 1.0 + z2[0]]])
    try:
        w = np.linalg.solve(cap, np.array([y[-1], y[0]]))
    except np.linalg.LinAlgError as exc:
        raise LinearSolveError(f"corner correction failed: {exc}") from exc
    x = y - z1 * w[0] - z2 * w[1]
    if not np.all(np.isfinite(x)):
        raise LinearSolveError("banded solve produced non-finite entries")
    return x


def _hjb_diagonals_1d(grid: SpaceGrid, dt: float, epsilon: float, policy_pm: np.ndarray):
    h = grid.spacing
    diff = dt * epsilon / h**2
    qp = policy_pm[0, LEFT] * (dt / h)
    qm = policy_pm[0, RIGHT] * (dt / h)
    main = 1.0 + 2.0 * diff + qp - qm
    lo = -diff - qp
    up = -diff + qm
    return lo, main, up


def fp_step(grid: SpaceGrid, dt: float, epsilon: float, policy_pm: np.ndarray,
            rhs: np.ndarray, settings: LinearSolveSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Advance one implicit FP step: solve A_FP(Q) M_next = rhs."""
    if grid.dim == 1 and settings.method == "direct":
        _require_split(policy_pm)
        lo, main, up = _hjb_diagonals_1d(grid, dt, epsilon, policy_pm)
        # A_FP = A_HJB^T: transpose swaps the off-diagonal bands
        return _solve_periodic_tridiag(np.roll(up, 1), main, np.roll(lo, -1), rhs)
    return solve(assemble_fp_matrix(grid, dt, epsilon, policy_pm), rhs, settings)


def hjb_step(grid: SpaceGrid, dt: float, epsilon: float, policy_pm: np.ndarray,
             rhs: np.ndarray, settings: LinearSolveSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Retreat one implicit HJB step: solve A_HJB(Q) U_current = rhs."""
    if grid.dim == 1 and settings.method == "direct":
        _require_split(policy_pm)
        lo, main, up = _hjb_diagonals_1d(grid, dt, epsilon, policy_pm)
        return _solve_periodic_tridiag(lo, main, up, rhs)
    return solve(assemble_hjb_matrix(grid, dt, epsilon, policy_pm), rhs, settings)
