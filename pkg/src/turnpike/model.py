"""Core model: parameters, time grid, norms, costs and the static problem.

States and controls are plain ``numpy`` arrays with one row per agent
(shape ``(N, d)``).  Sequences over time are stacked along a leading axis:
``(M + 1, N, d)`` for states and ``(M, N, d)`` for controls.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ModeNotSupportedError

__all__ = [
    "InteractionKernel",
    "ModelParams",
    "TimeGrid",
    "Trajectory",
    "ControlSequence",
    "StaticSolution",
    "check_matrix",
    "ensemble_norm",
    "running_cost",
    "running_costs",
    "total_cost",
    "lyapunov",
    "solve_static",
    "static_residual",
    "pairwise_differences",
    "interaction",
    "max_kernel_value",
]


def pairwise_differences(states: np.ndarray) -> np.ndarray:
    """Return ``D`` with ``D[k, l] = psi_l - psi_k`` (shape ``(N, N, d)``)."""
    return states[None, :, :] - states[:, None, :]


class InteractionKernel(enum.Enum):
    """Closed set of interaction kernels ``P(x, y)``.

    All provided variants depend on ``x - y`` only, are symmetric and vanish
    on the diagonal.
    """

    QUADRATIC = "quadratic"
    ABSOLUTE = "absolute"
    ZERO = "zero"

    @property
    def differentiable(self) -> bool:
        return self is not InteractionKernel.ABSOLUTE

    def __call__(self, x, y) -> float:
        diff = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        return float(self._from_differences(diff[None, None, :])[0, 0])

    def matrix(self, states: np.ndarray) -> np.ndarray:
        """Kernel values ``P(psi_k, psi_l)`` for all pairs, shape ``(N, N)``."""
        return self._from_differences(pairwise_differences(states))

    def _from_differences(self, diff: np.ndarray) -> np.ndarray:
        if self is InteractionKernel.QUADRATIC:
            return np.einsum("kld,kld->kl", diff, diff)
        if self is InteractionKernel.ABSOLUTE:
            return np.sqrt(np.einsum("kld,kld->kl", diff, diff))
        return np.zeros(diff.shape[:2])

    def gradients(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Partial derivatives of ``P(psi_k, psi_l)`` w.r.t. both arguments.

        Returns ``(dP/dx, dP/dy)`` evaluated at ``(psi_k, psi_l)``, each of
        shape ``(N, N, d)``.
        """
        if not self.differentiable:
            raise ModeNotSupportedError(
                f"kernel {self.value!r} has no classical derivative; "
                "use finite-difference gradients"
            )
        diff = pairwise_differences(states)
        if self is InteractionKernel.QUADRATIC:
            return -2.0 * diff, 2.0 * diff
        zero = np.zeros_like(diff)
        return zero, zero

    @classmethod
    def parse(cls, name: str | InteractionKernel) -> InteractionKernel:
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise InvalidInputError(
                f"unknown kernel {name!r}; expected one of {choices}"
            ) from None


@dataclass(frozen=True)
class ModelParams:
    n_agents: int
    dim: int
    target: np.ndarray
    gamma: float
    kernel: InteractionKernel = InteractionKernel.QUADRATIC
    kernel_bound: float = 0.0

    def __post_init__(self):
        if int(self.n_agents) != self.n_agents or self.n_agents < 1:
            raise InvalidInputError(f"n_agents must be a positive integer, got {self.n_agents}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise InvalidInputError(f"dim must be a positive integer, got {self.dim}")
        target = np.atleast_1d(np.asarray(self.target, dtype=float))
        if target.shape == (1,) and self.dim > 1:
            target = np.full(self.dim, target[0])
        if target.shape != (self.dim,):
            raise InvalidInputError(f"target must have length {self.dim}, got shape {target.shape}")
        if not np.all(np.isfinite(target)):
            raise InvalidInputError("target must be finite")
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise InvalidInputError(f"gamma must be positive, got {self.gamma}")
        if not (self.kernel_bound >= 0 and math.isfinite(self.kernel_bound)):
            raise InvalidInputError(f"kernel_bound must be finite and >= 0, got {self.kernel_bound}")
        target.setflags(write=False)
        object.__setattr__(self, "n_agents", int(self.n_agents))
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "kernel", InteractionKernel.parse(self.kernel))
        object.__setattr__(self, "kernel_bound", float(self.kernel_bound))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_agents, self.dim)

    def replace(self, **changes) -> ModelParams:
        values = {
            "n_agents": self.n_agents,
            "dim": self.dim,
            "target": self.target,
            "gamma": self.gamma,
            "kernel": self.kernel,
            "kernel_bound": self.kernel_bound,
        }
        values.update(changes)
        return ModelParams(**values)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 < t0 + h < ... < t_final`` with ``M`` steps.

    ``m_steps`` is derived; construction fails if ``(t_final - t0) / h`` is
    not an integer up to a relative ``1e-9``.
    """

    t0: float
    t_final: float
    h: float
    m_steps: int = field(init=False)

    def __post_init__(self):
        t0, tf, h = float(self.t0), float(self.t_final), float(self.h)
        if not all(math.isfinite(v) for v in (t0, tf, h)):
            raise InvalidInputError("time grid values must be finite")
        if not tf > t0:
            raise InvalidInputError(f"t_final ({tf}) must exceed t0 ({t0})")
        if not h > 0:
            raise InvalidInputError(f"h must be positive, got {h}")
        span = tf - t0
        m = round(span / h)
        if m < 1 or abs(m * h - span) > 1e-9 * span:
            raise InvalidInputError(
                f"(t_final - t0) / h = {span / h!r} is not an integer step count"
            )
        object.__setattr__(self, "t0", t0)
        object.__setattr__(self, "t_final", tf)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "m_steps", int(m))

    @classmethod
    def from_steps(cls, t0: float, h: float, m_steps: int) -> TimeGrid:
        return cls(t0, t0 + h * m_steps, h)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.m_steps + 1)

    def tail(self, start: int) -> TimeGrid:
        """Grid of the sub-horizon starting at step ``start``."""
        if not 0 <= start < self.m_steps:
            raise InvalidInputError(f"start index {start} outside [0, {self.m_steps})")
        return TimeGrid.from_steps(self.t0 + start * self.h, self.h, self.m_steps - start)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 3 or states.shape[0] != self.grid.m_steps + 1:
            raise InvalidInputError(
                f"trajectory needs shape (M+1, N, d) with M={self.grid.m_steps}, got {states.shape}"
            )
        object.__setattr__(self, "states", states)

    def __len__(self):
        return self.states.shape[0]

    def __getitem__(self, i):
        return self.states[i]


@dataclass(frozen=True)
class ControlSequence:
    controls: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        controls = np.asarray(self.controls, dtype=float)
        if controls.ndim != 3 or controls.shape[0] != self.grid.m_steps:
            raise InvalidInputError(
                f"control sequence needs shape (M, N, d) with M={self.grid.m_steps}, got {controls.shape}"
            )
        if not np.all(np.isfinite(controls)):
            raise InvalidInputError("controls must be finite")
        object.__setattr__(self, "controls", controls)

    @classmethod
    def zeros(cls, grid: TimeGrid, params: ModelParams) -> ControlSequence:
        return cls(np.zeros((grid.m_steps, *params.shape)), grid)

    def __len__(self):
        return self.controls.shape[0]

    def __getitem__(self, i):
        return self.controls[i]


@dataclass(frozen=True)
class StaticSolution:
    state: np.ndarray
    control: np.ndarray


def check_matrix(values, params: ModelParams | None = None, name: str = "matrix") -> np.ndarray:
    """Validate an ``(N, d)`` matrix and return it as a float array."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D (N, d), got shape {arr.shape}")
    if params is not None and arr.shape != params.shape:
        raise InvalidInputError(f"{name} has shape {arr.shape}, expected {params.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def ensemble_norm(values) -> float:
    """Unsquared ensemble norm ``sqrt(sum_k ||x_k||^2)`` (Frobenius)."""
    arr = check_matrix(values)
    return float(np.sqrt(np.sum(arr * arr)))


def running_cost(state, control, params: ModelParams) -> float:
    psi = check_matrix(state, params, "state")
    u = check_matrix(control, params, "control")
    err = psi - params.target
    return float((np.sum(err * err) + params.gamma * np.sum(u * u)) / params.n_agents)


def running_costs(states: np.ndarray, controls: np.ndarray, params: ModelParams) -> np.ndarray:
    """Vectorised ``g`` for stacked ``(M, N, d)`` states and controls."""
    err = states - params.target
    return (
        np.sum(err * err, axis=(1, 2)) + params.gamma * np.sum(controls * controls, axis=(1, 2))
    ) / params.n_agents


def total_cost(traj: Trajectory, controls: ControlSequence, params: ModelParams) -> float:
    """Left-rectangle cost ``sum_{i<M} h g(psi^i, u^i)``; ``psi^M`` is unpenalised."""
    if traj.grid != controls.grid:
        raise InvalidInputError("trajectory and controls live on different grids")
    if traj.states.shape[1:] != params.shape or controls.controls.shape[1:] != params.shape:
        raise InvalidInputError("trajectory/control shapes do not match params")
    g = running_costs(traj.states[:-1], controls.controls, params)
    return float(traj.grid.h * np.sum(g))


def lyapunov(state, params: ModelParams) -> float:
    psi = check_matrix(state, params, "state")
    err = psi - params.target
    return float(np.sum(err * err) / params.n_agents)


def solve_static(params: ModelParams) -> StaticSolution:
    state = np.tile(params.target, (params.n_agents, 1))
    return StaticSolution(state=state, control=np.zeros(params.shape))


def interaction(states: np.ndarray, kernel: InteractionKernel) -> np.ndarray:
    """Mean-field interaction term ``(1/N) sum_l P(psi_k, psi_l)(psi_l - psi_k)``."""
    n = states.shape[0]
    if kernel is InteractionKernel.ZERO:
        return np.zeros_like(states)
    diff = pairwise_differences(states)
    weights = kernel._from_differences(diff)
    return np.einsum("kl,kld->kd", weights, diff) / n


def static_residual(state, control, params: ModelParams) -> float:
    """Ensemble norm of the steady-state defect of the Euler dynamics."""
    psi = check_matrix(state, params, "state")
    u = check_matrix(control, params, "control")
    return ensemble_norm(interaction(psi, params.kernel) + u)


def max_kernel_value(states, kernel: InteractionKernel) -> float:
    """Largest ``|P(psi_k, psi_l)|`` over all pairs in a state or a stack of states."""
    arr = np.asarray(states, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    return float(max(np.max(np.abs(kernel.matrix(s))) for s in arr))
