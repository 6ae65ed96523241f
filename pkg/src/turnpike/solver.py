"""Direct transcription solver for the discrete optimal control problem.

The decision variables are the controls ``u^0 .. u^{M-1}``; states are
eliminated by the Euler recursion.  Gradients come from the discrete adjoint
of that recursion (or central differences for kernels without a classical
derivative) and feed a limited-memory BFGS iteration with backtracking.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dynamics import rollout_array
from .errors import DegenerateHorizonError, DivergenceError, InvalidInputError, ModeNotSupportedError
from .model import (
    ControlSequence,
    ModelParams,
    TimeGrid,
    Trajectory,
    check_matrix,
    pairwise_differences,
    running_costs,
)

__all__ = [
    "OcpProblem",
    "OcpSolution",
    "SolverConfig",
    "objective_and_gradient",
    "solve_ocp",
    "dpp_check",
    "DppReport",
]

log = logging.getLogger(__name__)

ADJOINT = "adjoint"
FINITE_DIFFERENCE = "finite-difference"


@dataclass(frozen=True)
class OcpProblem:
    params: ModelParams
    grid: TimeGrid
    initial: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "initial", check_matrix(self.initial, self.params, "initial state"))

    def tail(self, start: int, state) -> OcpProblem:
        """Sub-problem on steps ``start .. M`` starting from ``state``."""
        return OcpProblem(self.params, self.grid.tail(start), state)


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 2000
    gradient_tolerance: float = 1e-10
    initial_step: float = 1.0
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    max_backtracks: int = 60
    memory: int = 20
    gradient_mode: str = ADJOINT
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 0:
            raise InvalidInputError("max_iterations must be >= 0")
        if not self.gradient_tolerance > 0:
            raise InvalidInputError("gradient_tolerance must be positive")
        if not 0 < self.shrink < 1:
            raise InvalidInputError("shrink factor must lie in (0, 1)")
        if not 0 < self.sufficient_decrease < 0.5:
            raise InvalidInputError("sufficient_decrease must lie in (0, 0.5)")
        if not self.initial_step > 0:
            raise InvalidInputError("initial_step must be positive")
        if self.memory < 1:
            raise InvalidInputError("memory must be >= 1")
        if self.gradient_mode not in (ADJOINT, FINITE_DIFFERENCE):
            raise InvalidInputError(
                f"gradient_mode must be {ADJOINT!r} or {FINITE_DIFFERENCE!r}, got {self.gradient_mode!r}"
            )

    def replace(self, **changes) -> SolverConfig:
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return SolverConfig(**values)


@dataclass
class OcpSolution:
    controls: ControlSequence
    trajectory: Trajectory
    value: float
    gradient_norm: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)
    message: str = ""


def _objective(problem: OcpProblem, u: np.ndarray) -> tuple[float, np.ndarray]:
    h = problem.grid.h
    states = rollout_array(problem.initial, u, h, problem.params)
    value = h * float(np.sum(running_costs(states[:-1], u, problem.params)))
    return value, states


def _interaction_vjp(states: np.ndarray, adj: np.ndarray, params: ModelParams) -> np.ndarray:
    """Transpose-Jacobian product of the interaction term with ``adj``.

    For the pair term ``T_kl = P(x_k, x_l) (x_l - x_k)`` the contributions of
    ``adj_k^T dT_kl`` are ``(D.adj_k) dP/dy + P adj_k`` to ``x_l`` and
    ``(D.adj_k) dP/dx - P adj_k`` to ``x_k``.
    """
    n = states.shape[0]
    diff = pairwise_differences(states)
    weights = params.kernel.matrix(states)
    dpdx, dpdy = params.kernel.gradients(states)
    proj = np.einsum("kld,kd->kl", diff, adj)
    to_l = proj[:, :, None] * dpdy + weights[:, :, None] * adj[:, None, :]
    to_k = proj[:, :, None] * dpdx - weights[:, :, None] * adj[:, None, :]
    return (to_l.sum(axis=0) + to_k.sum(axis=1)) / n


def _adjoint_gradient(problem: OcpProblem, u: np.ndarray, states: np.ndarray) -> np.ndarray:
    params = problem.params
    h, n = problem.grid.h, params.n_agents
    m = u.shape[0]
    grad = np.empty_like(u)
    # adj holds dJ/dpsi^{i+1}; psi^M carries no cost
    adj = np.zeros(params.shape)
    for i in range(m - 1, -1, -1):
        grad[i] = h * (2.0 * params.gamma / n) * u[i] + h * adj
        if i == 0:
            break
        local = h * (2.0 / n) * (states[i] - params.target)
        adj = local + adj + h * _interaction_vjp(states[i], adj, params)
    return grad


def _fd_gradient(problem: OcpProblem, u: np.ndarray, step: float) -> np.ndarray:
    grad = np.empty_like(u)
    flat = u.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp, _ = _objective(problem, u)
        flat[j] = orig - step
        fm, _ = _objective(problem, u)
        flat[j] = orig
        gflat[j] = (fp - fm) / (2.0 * step)
    return grad


def _evaluate(problem: OcpProblem, u: np.ndarray, mode: str, fd_step: float = 1e-6):
    value, states = _objective(problem, u)
    if mode == ADJOINT:
        grad = _adjoint_gradient(problem, u, states)
    else:
        grad = _fd_gradient(problem, u.copy(), fd_step)
    return value, grad, states


def objective_and_gradient(
    problem: OcpProblem, controls: ControlSequence, mode: str = ADJOINT, fd_step: float = 1e-6
) -> tuple[float, np.ndarray]:
    """Cost of the rolled-out controls and its gradient w.r.t. every control entry."""
    if controls.grid != problem.grid and controls.controls.shape[0] != problem.grid.m_steps:
        raise InvalidInputError("controls do not match the problem grid")
    if controls.controls.shape[1:] != problem.params.shape:
        raise InvalidInputError("controls do not match the agent shape")
    if mode == ADJOINT and not problem.params.kernel.differentiable:
        raise ModeNotSupportedError(
            f"adjoint gradients need a differentiable kernel, got {problem.params.kernel.value!r}; "
            "use gradient_mode='finite-difference'"
        )
    if mode not in (ADJOINT, FINITE_DIFFERENCE):
        raise InvalidInputError(f"unknown gradient mode {mode!r}")
    value, grad, _ = _evaluate(problem, controls.controls.copy(), mode, fd_step)
    return value, grad


def _two_loop(grad, s_hist, y_hist):
    q = grad.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / np.vdot(y, s)
        a = rho * np.vdot(s, q)
        q -= a * y
        alphas.append((rho, a))
    s, y = s_hist[-1], y_hist[-1]
    q *= np.vdot(s, y) / np.vdot(y, y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * np.vdot(y, q)
        q += (a - b) * s
    return -q


def solve_ocp(problem: OcpProblem, config: SolverConfig | None = None, warm_start=None) -> OcpSolution:
    """Minimise the transcribed cost over all controls.

    Starts from zero controls unless ``warm_start`` (a ControlSequence or an
    ``(M, N, d)`` array) is given.  Stops once ``max|grad| / h`` drops below
    ``config.gradient_tolerance``.
    """
    config = config or SolverConfig()
    params, grid = problem.params, problem.grid
    mode = config.gradient_mode
    if mode == ADJOINT and not params.kernel.differentiable:
        raise ModeNotSupportedError(
            f"adjoint gradients need a differentiable kernel, got {params.kernel.value!r}"
        )
    shape = (grid.m_steps, *params.shape)
    if warm_start is None:
        u = np.zeros(shape)
    else:
        u = np.array(getattr(warm_start, "controls", warm_start), dtype=float)
        if u.shape != shape:
            raise InvalidInputError(f"warm start has shape {u.shape}, expected {shape}")

    h = grid.h
    value, grad, states = _evaluate(problem, u, mode, config.fd_step)
    if not math.isfinite(value):
        raise DivergenceError("objective is not finite at the initial iterate", iterate=u)
    s_hist: deque = deque(maxlen=config.memory)
    y_hist: deque = deque(maxlen=config.memory)
    history = [value]
    # f(x) round-off level below which Armijo cannot discriminate steps
    noise = 64 * np.finfo(float).eps
    it = 0
    message = ""
    converged = False
    while True:
        gnorm = float(np.max(np.abs(grad))) / h if grad.size else 0.0
        if gnorm <= config.gradient_tolerance:
            converged = True
            message = "gradient tolerance reached"
            break
        if it >= config.max_iterations:
            message = "iteration limit reached"
            break

        if s_hist:
            direction = _two_loop(grad, s_hist, y_hist)
            step = 1.0
        else:
            direction = -grad
            step = config.initial_step / max(float(np.max(np.abs(grad))), 1e-300)
        slope = float(np.vdot(grad, direction))
        if slope >= 0:
            s_hist.clear()
            y_hist.clear()
            direction = -grad
            slope = -float(np.vdot(grad, grad))
            step = config.initial_step / max(float(np.max(np.abs(grad))), 1e-300)

        accepted = None
        for _ in range(config.max_backtracks):
            trial = u + step * direction
            t_value, t_grad, t_states = _evaluate(problem, trial, mode, config.fd_step)
            if not math.isfinite(t_value):
                step *= config.shrink
                continue
            if t_value <= value + config.sufficient_decrease * step * slope:
                accepted = (trial, t_value, t_grad, t_states)
                break
            # Armijo is blind once the decrease is below f round-off; fall back
            # to an approximate Wolfe test on the directional derivative.
            if t_value - value <= noise * abs(value):
                t_slope = float(np.vdot(t_grad, direction))
                if 0.9 * slope <= t_slope <= (2 * config.sufficient_decrease - 1) * slope:
                    accepted = (trial, t_value, t_grad, t_states)
                    break
            step *= config.shrink
        if accepted is None:
            if s_hist:
                s_hist.clear()
                y_hist.clear()
                it += 1
                continue
            message = "line search failed"
            break

        trial, t_value, t_grad, t_states = accepted
        if not np.all(np.isfinite(t_grad)):
            raise DivergenceError("non-finite gradient during iteration", iterate=u)
        s = trial - u
        y = t_grad - grad
        sy = float(np.vdot(s, y))
        if sy > 1e-12 * float(np.vdot(y, y)) and sy > 0:
            s_hist.append(s)
            y_hist.append(y)
        u, value, grad, states = trial, t_value, t_grad, t_states
        history.append(value)
        it += 1

    if not all(math.isfinite(v) for v in history):
        raise DivergenceError("non-finite objective during iteration", iterate=u)
    log.debug("solve_ocp: %s after %d iterations, J=%.17g, |g|/h=%.3e", message, it, value, gnorm)
    controls = ControlSequence(u, grid)
    return OcpSolution(
        controls=controls,
        trajectory=Trajectory(states, grid),
        value=value,
        gradient_norm=gnorm,
        iterations=it,
        converged=converged,
        history=history,
        message=message,
    )


@dataclass
class DppReport:
    split_index: int
    tail_cost: float
    resolved_value: float
    relative_gap: float
    passed: bool
    tolerance: float = 1e-4


def dpp_check(
    problem: OcpProblem,
    solution: OcpSolution,
    split_index: int,
    config: SolverConfig | None = None,
    tolerance: float = 1e-4,
) -> DppReport:
    """Re-solve the tail problem from the solution's state at ``split_index``.

    By the dynamic programming principle the optimal tail cost equals the tail
    of the original optimal cost; the check passes when their relative gap is
    at most ``tolerance``.
    """
    m = problem.grid.m_steps
    if not 0 < split_index < m:
        raise DegenerateHorizonError(f"split index {split_index} outside (0, {m})")
    if not solution.converged:
        raise InvalidInputError("dpp_check needs a converged solution")
    params = problem.params
    h = problem.grid.h
    tail_states = solution.trajectory.states[split_index:-1]
    tail_controls = solution.controls.controls[split_index:]
    tail_cost = h * float(np.sum(running_costs(tail_states, tail_controls, params)))
    sub = problem.tail(split_index, solution.trajectory.states[split_index])
    resolved = solve_ocp(sub, config)
    ref = resolved.value
    if ref == 0.0 and tail_cost == 0.0:
        gap = 0.0
    else:
        gap = abs(tail_cost - ref) / max(abs(ref), np.finfo(float).tiny)
    return DppReport(split_index, tail_cost, ref, gap, gap <= tolerance, tolerance)
