"""Cheap stabilising feedback and its explicit cost constants.

The feedback cancels the interaction term and adds a proportional pull
towards the target, so every agent's error contracts by ``1 - h*beta`` per
step regardless of the kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConstraintViolationError, InvalidInputError
from .model import (
    ControlSequence,
    ModelParams,
    TimeGrid,
    Trajectory,
    check_matrix,
    interaction,
    max_kernel_value,
)

__all__ = [
    "CheapControlParams",
    "ConstantsLedger",
    "feedback_control",
    "closed_loop_rollout",
    "decay_rate",
    "c0_constant",
    "d0_limit",
    "uniformity_check",
    "UniformityReport",
    "control_bound_check",
]


def _check_gain(h: float, beta: float) -> None:
    if not (beta > 0 and math.isfinite(beta)):
        raise InvalidInputError(f"beta must be positive, got {beta}")
    if not h > 0:
        raise InvalidInputError(f"h must be positive, got {h}")
    if not h * beta < 1:
        raise ConstraintViolationError(f"h*beta must be < 1, got {h}*{beta} = {h * beta}")


@dataclass(frozen=True)
class CheapControlParams:
    beta: float
    grid: TimeGrid

    def __post_init__(self):
        _check_gain(self.grid.h, self.beta)


def _interaction_scale(kernel_bound: float, beta: float) -> float:
    return beta**2 + 2 * beta * kernel_bound + 2 * kernel_bound**2


def c0_constant(h: float, beta: float, gamma: float, kernel_bound: float) -> float:
    """Cheap-control constant ``C0(h)``.

    Uses ``h / (1 - (1 - h beta)^2) == 1 / (2 beta - h beta^2)`` to avoid the
    cancellation for small ``h``.
    """
    _check_gain(h, beta)
    if not gamma > 0:
        raise InvalidInputError(f"gamma must be positive, got {gamma}")
    if not kernel_bound >= 0:
        raise InvalidInputError(f"kernel_bound must be >= 0, got {kernel_bound}")
    bracket = 2.0 / gamma + 4.0 * _interaction_scale(kernel_bound, beta)
    return bracket / (2.0 * beta - h * beta * beta)


def d0_limit(beta: float, gamma: float, kernel_bound: float) -> float:
    """Limit of ``C0(h)`` as ``h -> 0+``."""
    if not beta > 0:
        raise InvalidInputError(f"beta must be positive, got {beta}")
    if not gamma > 0:
        raise InvalidInputError(f"gamma must be positive, got {gamma}")
    if not kernel_bound >= 0:
        raise InvalidInputError(f"kernel_bound must be >= 0, got {kernel_bound}")
    return (1.0 / gamma + 2.0 * _interaction_scale(kernel_bound, beta)) / beta


def decay_rate(h: float, beta: float) -> float:
    """Per-step contraction factor ``(1 - h beta)^2`` of the Lyapunov function."""
    _check_gain(h, beta)
    return (1.0 - h * beta) ** 2


@dataclass(frozen=True)
class ConstantsLedger:
    h: float
    beta: float
    gamma: float
    kernel_bound: float
    c0_tilde: float = field(init=False)
    d0_tilde: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "c0_tilde", c0_constant(self.h, self.beta, self.gamma, self.kernel_bound))
        object.__setattr__(self, "d0_tilde", d0_limit(self.beta, self.gamma, self.kernel_bound))

    @classmethod
    def for_params(cls, params: ModelParams, grid: TimeGrid, beta: float) -> ConstantsLedger:
        return cls(grid.h, beta, params.gamma, params.kernel_bound)

    def as_dict(self) -> dict:
        return {
            "h": self.h,
            "beta": self.beta,
            "gamma": self.gamma,
            "kernel_bound": self.kernel_bound,
            "c0_tilde": self.c0_tilde,
            "d0_tilde": self.d0_tilde,
        }


def feedback_control(state, params: ModelParams, beta: float) -> np.ndarray:
    psi = check_matrix(state, params, "state")
    if not beta > 0:
        raise InvalidInputError(f"beta must be positive, got {beta}")
    return beta * (params.target - psi) - interaction(psi, params.kernel)


def closed_loop_rollout(
    initial, grid: TimeGrid, params: ModelParams, beta: float
) -> tuple[Trajectory, ControlSequence]:
    """Roll out the closed loop under the cheap feedback.

    States follow the contracted recursion ``psi + h beta (target - psi)``;
    the returned controls are the feedback evaluated along those states, so
    replaying them through :func:`~turnpike.dynamics.rollout` reproduces the
    trajectory up to round-off.
    """
    _check_gain(grid.h, beta)
    psi0 = check_matrix(initial, params, "initial state")
    m, h = grid.m_steps, grid.h
    states = np.empty((m + 1, *params.shape))
    controls = np.empty((m, *params.shape))
    states[0] = psi0
    for i in range(m):
        controls[i] = beta * (params.target - states[i]) - interaction(states[i], params.kernel)
        states[i + 1] = states[i] + h * beta * (params.target - states[i])
    return Trajectory(states, grid), ControlSequence(controls, grid)


@dataclass
class UniformityReport:
    passed: bool
    d0_tilde: float
    samples: list[tuple[float, float]]
    offending: float | None = None
    reason: str = ""


def uniformity_check(beta: float, gamma: float, kernel_bound: float, h_samples) -> UniformityReport:
    """Check ``D0 < C0(h) <= 2 D0`` for every sample and strict monotonicity.

    ``C0(h) = K / (2 beta - h beta^2)`` shrinks towards ``D0`` as ``h -> 0+``,
    so for ``h1 > h2`` the check requires ``C0(h1) > C0(h2)``.
    """
    samples = [float(h) for h in h_samples]
    if not samples:
        raise InvalidInputError("h_samples must not be empty")
    for h in samples:
        if not (0 < h < 1.0 / beta):
            raise InvalidInputError(f"sample h={h} outside (0, 1/beta) = (0, {1.0 / beta})")
    d0 = d0_limit(beta, gamma, kernel_bound)
    values = [(h, c0_constant(h, beta, gamma, kernel_bound)) for h in sorted(samples)]
    for h, c0 in values:
        if not (d0 < c0 <= 2 * d0):
            return UniformityReport(False, d0, values, h, f"C0={c0} outside ({d0}, {2 * d0}]")
    for (h_lo, c_lo), (h_hi, c_hi) in zip(values, values[1:]):
        if h_hi > h_lo and not c_hi > c_lo:
            return UniformityReport(
                False, d0, values, h_hi, f"C0 does not shrink from h={h_hi} down to h={h_lo}"
            )
    return UniformityReport(True, d0, values)


def control_bound_check(
    traj: Trajectory, controls: ControlSequence, params: ModelParams, beta: float
) -> dict:
    """Per-step control magnitude bound along a closed-loop trajectory.

    Only meaningful when ``params.kernel_bound`` dominates every pairwise
    kernel value on the trajectory; otherwise the status is
    ``"not applicable"``.
    """
    h = traj.grid.h
    _check_gain(h, beta)
    kb = params.kernel_bound
    observed = max_kernel_value(traj.states, params.kernel)
    if observed > kb:
        return {"status": "not applicable", "max_kernel_value": observed, "kernel_bound": kb}
    err0 = traj.states[0] - params.target
    base = 2.0 * ((beta + kb) ** 2 + kb**2) * float(np.sum(err0 * err0))
    steps = np.arange(controls.controls.shape[0])
    bounds = (1.0 - h * beta) ** (2 * steps) * base
    norms_sq = np.sum(controls.controls**2, axis=(1, 2))
    slack = 1e-12 * max(base, 1.0)
    violations = int(np.sum(norms_sq > bounds + slack))
    return {
        "status": "pass" if violations == 0 else "fail",
        "violations": violations,
        "max_ratio": float(np.max(norms_sq / np.where(bounds > 0, bounds, np.inf), initial=0.0)),
        "max_kernel_value": observed,
        "kernel_bound": kb,
    }
