"""Congestion Hamiltonians, their Lagrangians, and the built-in scenarios.

The model family is

    H(m, p) = |p|^gamma / (gamma * w(m)^(gamma-1)) - zeta * m,
    w(m)    = (c + a * m)^theta,

with gamma > 1 and nonnegative weights.  The dual running cost is

    L(m, q) = (1/gamma') * w(m) * |q|^gamma' + zeta * m,

with gamma' = gamma / (gamma - 1), and the unconstrained optimal control is
H_p(m, p) = |p|^(gamma-2) p / w(m)^(gamma-1).  When c = 0 the weight is
singular at m = 0 and is evaluated at max(m, m_floor).

Vector arguments ``p`` (and control vectors) carry their components on the
leading axis, broadcasting against the density array over the remaining axes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .grid import SpaceGrid, TimeGrid, total_mass


@dataclass(frozen=True)
class HamiltonianModel:
    gamma: float
    weight_c: float
    weight_a: float
    weight_theta: float
    coupling_zeta: float = 0.0
    m_floor: float = 1e-10

    def __post_init__(self) -> None:
        if not self.gamma > 1.0:
            raise ValueError(f"gamma must be > 1, got {self.gamma}")
        for name in ("weight_c", "weight_a", "weight_theta", "coupling_zeta"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.m_floor > 0.0:
            raise ValueError(f"m_floor must be positive, got {self.m_floor}")

    @property
    def gamma_conj(self) -> float:
        return self.gamma / (self.gamma - 1.0)

    def weight(self, m) -> np.ndarray:
        """Congestion weight w(m), floored away from zero when c = 0."""
        m = _check_density(m)
        if self.weight_c == 0.0:
            m = np.maximum(m, self.m_floor)
        return (self.weight_c + self.weight_a * m) ** self.weight_theta

    def hamiltonian(self, m, p) -> np.ndarray:
        m = _check_density(m)
        pn = _vector_norm(p)
        kinetic = pn**self.gamma / (self.gamma * self.weight(m) ** (self.gamma - 1.0))
        return kinetic - self.coupling_zeta * m

    def grad_p(self, m, p) -> np.ndarray:
        """dH/dp; equal to 0 at p = 0 (the continuous extension for gamma > 1)."""
        m = _check_density(m)
        p = np.asarray(p, dtype=float)
        pn = _vector_norm(p)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(pn > 0.0, pn ** (self.gamma - 2.0), 0.0)
        return scale * p / self.weight(m) ** (self.gamma - 1.0)

    def lagrangian(self, m, q_norm_sq) -> np.ndarray:
        m = _check_density(m)
        q_norm_sq = np.asarray(q_norm_sq, dtype=float)
        if np.any(q_norm_sq < 0.0):
            raise ValueError("q_norm_sq must be nonnegative")
        conj = self.gamma_conj
        kinetic = self.weight(m) * q_norm_sq ** (conj / 2.0) / conj
        return kinetic + self.coupling_zeta * m

    def optimal_policy(self, m, p, bound: float = np.inf) -> np.ndarray:
        """Argmax control H_p(m, p), clamped componentwise to [-bound, bound]."""
        if not bound > 0.0:
            raise ValueError(f"control bound must be positive, got {bound}")
        return np.clip(self.grad_p(m, p), -bound, bound)


def _check_density(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if np.any(m < 0.0):
        raise ValueError("density must be nonnegative")
    return m


def _vector_norm(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.sqrt(np.sum(p**2, axis=0))


@dataclass(frozen=True)
class ScenarioPreset:
    """A fully specified solvable problem: model, data, and default grids."""

    name: str
    dim: int
    model: HamiltonianModel
    epsilon: float
    horizon: float
    nodes_per_dim: int
    time_steps: int
    terminal_cost: Callable[..., np.ndarray]
    initial_profile: Callable[..., np.ndarray]

    def space_grid(self) -> SpaceGrid:
        return SpaceGrid(self.dim, self.nodes_per_dim)

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.time_steps, self.horizon)

    def terminal_values(self, grid: SpaceGrid | None = None) -> np.ndarray:
        grid = grid or self.space_grid()
        return np.asarray(self.terminal_cost(*grid.coordinates()), dtype=float)

    def initial_density(self, grid: SpaceGrid | None = None) -> np.ndarray:
        """Initial profile sampled at the nodes and normalized to unit mass."""
        grid = grid or self.space_grid()
        raw = np.asarray(self.initial_profile(*grid.coordinates()), dtype=float)
        return raw / total_mass(raw, grid)


def _example1_terminal(x):
    return 10.0 * np.minimum((x - 0.3) ** 2, (x - 0.7) ** 2)


def _example1_profile(x):
    return np.where((x >= 0.375) & (x <= 0.625), 4.0, 0.0)


def _example2_terminal(x1, x2):
    return 1.2 * np.cos(2.0 * np.pi * x1) + np.cos(2.0 * np.pi * x2)


def _example2_profile(x1, x2):
    return np.exp(-10.0 * ((x1 - 0.25) ** 2 + (x2 - 0.25) ** 2))


_PRESETS = {
    "example1": ScenarioPreset(
        name="example1",
        dim=1,
        model=HamiltonianModel(gamma=2.0, weight_c=1.0, weight_a=4.0, weight_theta=1.5,
                               coupling_zeta=1.0),
        epsilon=0.05,
        horizon=1.0,
        nodes_per_dim=200,
        time_steps=200,
        terminal_cost=_example1_terminal,
        initial_profile=_example1_profile,
    ),
    "example2": ScenarioPreset(
        name="example2",
        dim=2,
        model=HamiltonianModel(gamma=2.0, weight_c=0.0, weight_a=1.0, weight_theta=0.5),
        epsilon=0.3,
        horizon=0.5,
        nodes_per_dim=50,
        time_steps=50,
        terminal_cost=_example2_terminal,
        initial_profile=_example2_profile,
    ),
    "example3": ScenarioPreset(
        name="example3",
        dim=2,
        model=HamiltonianModel(gamma=3.0, weight_c=0.0, weight_a=1.0, weight_theta=0.25),
        epsilon=0.3,
        horizon=0.5,
        nodes_per_dim=50,
        time_steps=50,
        terminal_cost=_example2_terminal,
        initial_profile=_example2_profile,
    ),
}

_OVERRIDE_KEYS = ("beta", "zeta", "T", "I", "N", "epsilon")


def build_scenario(name: str, overrides: dict | None = None) -> ScenarioPreset:
    """Look up a preset by name and apply parameter overrides.

    Supported override keys: beta (congestion exponent theta), zeta, T, I, N,
    epsilon.  Values that would make the problem ill-posed raise ValueError.
    """
    if name not in _PRESETS:
        raise ValueError(f"unknown scenario {name!r}; expected one of {sorted(_PRESETS)}")
    preset = _PRESETS[name]
    overrides = dict(overrides or {})
    for key in overrides:
        if key not in _OVERRIDE_KEYS:
            raise ValueError(f"unknown override {key!r}; expected one of {_OVERRIDE_KEYS}")

    model = preset.model
    if "beta" in overrides:
        beta = float(overrides["beta"])
        if beta < 0.0:
            raise ValueError(f"beta must be >= 0, got {beta}")
        model = replace(model, weight_theta=beta)
    if "zeta" in overrides:
        zeta = float(overrides["zeta"])
        if zeta < 0.0:
            raise ValueError(f"zeta must be >= 0, got {zeta}")
        model = replace(model, coupling_zeta=zeta)

    horizon = float(overrides.get("T", preset.horizon))
    epsilon = float(overrides.get("epsilon", preset.epsilon))
    nodes = int(overrides.get("I", preset.nodes_per_dim))
    steps = int(overrides.get("N", preset.time_steps))
    if not horizon > 0.0:
        raise ValueError(f"T must be positive, got {horizon}")
    if not epsilon > 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if nodes < 3:
        raise ValueError(f"I must be >= 3, got {nodes}")
    if steps < 1:
        raise ValueError(f"N must be >= 1, got {steps}")

    return replace(preset, model=model, horizon=horizon, epsilon=epsilon,
                   nodes_per_dim=nodes, time_steps=steps)
