"""Explicit Euler dynamics of the interacting agent system."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError
from .model import (
    ControlSequence,
    ModelParams,
    Trajectory,
    check_matrix,
    interaction,
)

__all__ = ["drift", "euler_step", "rollout", "rollout_array"]


def drift(state, control, params: ModelParams) -> np.ndarray:
    """Right-hand side ``f``: mean pairwise attraction plus the agent's control."""
    psi = check_matrix(state, params, "state")
    u = check_matrix(control, params, "control")
    return interaction(psi, params.kernel) + u


def euler_step(state, control, h: float, params: ModelParams) -> np.ndarray:
    if not h > 0:
        raise InvalidInputError(f"step size must be positive, got {h}")
    psi = check_matrix(state, params, "state")
    return psi + h * drift(psi, control, params)


def rollout_array(initial: np.ndarray, controls: np.ndarray, h: float, params: ModelParams) -> np.ndarray:
    """Unchecked rollout on raw arrays; returns states of shape ``(M+1, N, d)``."""
    m = controls.shape[0]
    states = np.empty((m + 1, *initial.shape))
    states[0] = initial
    kernel = params.kernel
    for i in range(m):
        states[i + 1] = states[i] + h * (interaction(states[i], kernel) + controls[i])
    return states


def rollout(initial, controls: ControlSequence, params: ModelParams) -> Trajectory:
    psi0 = check_matrix(initial, params, "initial state")
    if controls.controls.shape[1:] != params.shape:
        raise InvalidInputError(
            f"controls have agent shape {controls.controls.shape[1:]}, expected {params.shape}"
        )
    states = rollout_array(psi0, controls.controls, controls.grid.h, params)
    if not np.all(np.isfinite(states)):
        raise InvalidInputError("rollout produced non-finite states (step size too large?)")
    return Trajectory(states, controls.grid)
