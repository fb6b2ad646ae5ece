import numpy as np
import pytest

from mfgsolve.grid import SpaceGrid, wrap_index


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_policy(rng, grid: SpaceGrid) -> np.ndarray:
    """Unsplit random policy with components in [-1, 1]."""
    return rng.uniform(-1.0, 1.0, size=(grid.dim, 2) + grid.shape)


def dense_laplacian(grid: SpaceGrid) -> np.ndarray:
    """Brute-force dense Laplacian assembled entry by entry."""
    n = grid.num_nodes
    I = grid.nodes_per_dim
    inv_h2 = float(I) ** 2
    A = np.zeros((n, n))
    for flat in range(n):
        coords = np.unravel_index(flat, grid.shape)
        for ax in range(grid.dim):
            for shift in (-1, 1):
                nb = list(coords)
                nb[ax] = wrap_index(nb[ax] + shift, I)
                A[flat, np.ravel_multi_index(nb, grid.shape)] += inv_h2
            A[flat, flat] -= 2.0 * inv_h2
    return A


def dense_advection(grid: SpaceGrid, policy_pm: np.ndarray) -> np.ndarray:
    """Brute-force dense matrix of U -> sum Q+_L D_L U + Q-_R D_R U."""
    n = grid.num_nodes
    I = grid.nodes_per_dim
    inv_h = float(I)
    A = np.zeros((n, n))
    for flat in range(n):
        coords = np.unravel_index(flat, grid.shape)
        for ax in range(grid.dim):
            qp = policy_pm[(ax, 0) + coords]
            qm = policy_pm[(ax, 1) + coords]
            left = list(coords)
            left[ax] = wrap_index(left[ax] - 1, I)
            right = list(coords)
            right[ax] = wrap_index(right[ax] + 1, I)
            A[flat, flat] += (qp - qm) * inv_h
            A[flat, np.ravel_multi_index(left, grid.shape)] -= qp * inv_h
            A[flat, np.ravel_multi_index(right, grid.shape)] += qm * inv_h
    return A


def dense_divergence(grid: SpaceGrid, policy_pm: np.ndarray) -> np.ndarray:
    """Brute-force dense matrix of M -> div(M Q) for a split policy."""
    n = grid.num_nodes
    I = grid.nodes_per_dim
    inv_h = float(I)
    A = np.zeros((n, n))
    for flat in range(n):
        coords = np.unravel_index(flat, grid.shape)
        for ax in range(grid.dim):
            left = list(coords)
            left[ax] = wrap_index(left[ax] - 1, I)
            right = list(coords)
            right[ax] = wrap_index(right[ax] + 1, I)
            qp_here = policy_pm[(ax, 0) + coords]
            qm_here = policy_pm[(ax, 1) + coords]
            qp_right = policy_pm[(ax, 0) + tuple(right)]
            qm_left = policy_pm[(ax, 1) + tuple(left)]
            A[flat, np.ravel_multi_index(right, grid.shape)] += qp_right * inv_h
            A[flat, flat] += (qm_here - qp_here) * inv_h
            A[flat, np.ravel_multi_index(left, grid.shape)] -= qm_left * inv_h
    return A
