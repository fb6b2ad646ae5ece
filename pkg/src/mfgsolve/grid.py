"""Uniform periodic grids on the unit torus and the discrete stencil operators.

Fields are plain numpy arrays: a scalar field has shape ``grid.shape``
((I,) in 1d, (I, I) in 2d) and a space-time field stacks N+1 slices along
axis 0.  A staggered policy stores one (left, right) pair per node and per
spatial dimension, i.e. shape ``(dim, 2) + grid.shape``; index with the
``LEFT`` / ``RIGHT`` constants.  All spatial indices wrap modulo the grid
size, so every operator below is periodic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LEFT = 0
RIGHT = 1

# tolerance for "already EO-split" sanity checks
_SPLIT_TOL = 1e-14


@dataclass(frozen=True)
class SpaceGrid:
    """Uniform lattice with ``nodes_per_dim`` nodes per axis on the torus."""

    dim: int
    nodes_per_dim: int

    def __post_init__(self) -> None:
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.nodes_per_dim < 3:
            raise ValueError(f"nodes_per_dim must be >= 3, got {self.nodes_per_dim}")

    @property
    def spacing(self) -> float:
        return 1.0 / self.nodes_per_dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nodes_per_dim,) * self.dim

    @property
    def num_nodes(self) -> int:
        return self.nodes_per_dim**self.dim

    def coordinates(self) -> tuple[np.ndarray, ...]:
        """Node coordinate arrays, one per dimension, each of ``self.shape``."""
        axis = np.arange(self.nodes_per_dim) * self.spacing
        return tuple(np.meshgrid(*([axis] * self.dim), indexing="ij"))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def policy_zeros(self) -> np.ndarray:
        return np.zeros((self.dim, 2) + self.shape)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid with N+1 nodes on [0, T]."""

    steps: int
    horizon: float

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt


def wrap_index(i, n):
    """Periodic index (i + n) mod n, mapped into [0, n)."""
    return (i + n) % n


def laplacian_apply(field: np.ndarray, grid: SpaceGrid) -> np.ndarray:
    """Centered second-difference Laplacian, summed over dimensions."""
    h2 = grid.spacing**2
    out = np.zeros_like(field, dtype=float)
    for ax in range(grid.dim):
        out += (np.roll(field, 1, axis=ax) - 2.0 * field + np.roll(field, -1, axis=ax)) / h2
    return out


def upwind_gradient(field: np.ndarray, grid: SpaceGrid) -> np.ndarray:
    """One-sided difference pairs (D_L, D_R) per node and dimension."""
    h = grid.spacing
    out = np.empty((grid.dim, 2) + field.shape)
    for ax in range(grid.dim):
        out[ax, LEFT] = (field - np.roll(field, 1, axis=ax)) / h
        out[ax, RIGHT] = (np.roll(field, -1, axis=ax) - field) / h
    return out


def eo_split(policy: np.ndarray) -> np.ndarray:
    """Engquist-Osher split: positive part of left, negative part of right."""
    out = np.empty_like(policy)
    out[:, LEFT] = np.maximum(policy[:, LEFT], 0.0)
    out[:, RIGHT] = np.minimum(policy[:, RIGHT], 0.0)
    return out


def _require_split(policy_pm: np.ndarray) -> None:
    if policy_pm[:, LEFT].min(initial=0.0) < -_SPLIT_TOL or policy_pm[:, RIGHT].max(initial=0.0) > _SPLIT_TOL:
        raise ValueError("policy is not EO-split (left components must be >= 0, right <= 0)")


def eo_norm_sq(policy_pm: np.ndarray) -> np.ndarray:
    """Per-node sum of squares of all split components."""
    _require_split(policy_pm)
    return np.sum(policy_pm**2, axis=(0, 1))


def staggered_dot(policy_pm: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Per-node dot product of a split policy with a staggered gradient."""
    return np.sum(policy_pm * grad, axis=(0, 1))


def divergence(density: np.ndarray, policy_pm: np.ndarray, grid: SpaceGrid) -> np.ndarray:
    """Conservative upwind divergence of the flux density * policy.

    Node-sums to zero for any density and split policy (telescoping).
    """
    h = grid.spacing
    out = np.zeros_like(density, dtype=float)
    for ax in range(grid.dim):
        flux_l = density * policy_pm[ax, LEFT]
        flux_r = density * policy_pm[ax, RIGHT]
        out += (np.roll(flux_l, -1, axis=ax) - flux_l) / h
        out += (flux_r - np.roll(flux_r, 1, axis=ax)) / h
    return out


def advect(policy_pm: np.ndarray, field: np.ndarray, grid: SpaceGrid) -> np.ndarray:
    """Upwind transport term: sum over dimensions of Q+_L D_L + Q-_R D_R."""
    return staggered_dot(policy_pm, upwind_gradient(field, grid))


def total_mass(density: np.ndarray, grid: SpaceGrid) -> float:
    """Discrete integral h^dim * sum over nodes."""
    return float(density.sum() * grid.spacing**grid.dim)
