"""Numerical certificates: strict dissipativity, cheap control, turnpike.

All distances are measured against the closed-form static pair
``(target replicated, 0)``; it is never re-solved numerically.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .cheap import ConstantsLedger
from .errors import DegenerateHorizonError, InvalidInputError
from .model import (
    ControlSequence,
    ModelParams,
    Trajectory,
    check_matrix,
    ensemble_norm,
    interaction,
    running_cost,
    running_costs,
    solve_static,
)
from .solver import OcpProblem, OcpSolution

__all__ = [
    "DissipativityConfig",
    "DissipativityReport",
    "CheapControlReport",
    "TurnpikeCertificate",
    "alpha",
    "supply_rate",
    "dissipativity_check",
    "cheap_control_inequality_check",
    "r1_index",
    "c1_constant",
    "turnpike_report",
    "distances_to_static",
]

RESIDUAL_SLACK = 1e-12
RELATIVE_SLACK = 1e-9
DYNAMICS_TOLERANCE = 1e-10


@dataclass(frozen=True)
class DissipativityConfig:
    """Zero storage, no offset, ``alpha(x) = gamma / (2N) x^2``."""

    params: ModelParams
    epsilon0: float = 0.0

    def storage(self, state) -> float:
        return 0.0

    def alpha(self, x: float) -> float:
        return alpha(x, self.params)


def alpha(x: float, params: ModelParams) -> float:
    if not x >= 0:
        raise InvalidInputError(f"alpha is defined on [0, inf), got {x}")
    return params.gamma / (2.0 * params.n_agents) * x * x


def _alpha_array(x: np.ndarray, params: ModelParams) -> np.ndarray:
    return params.gamma / (2.0 * params.n_agents) * x * x


def supply_rate(state, control, params: ModelParams) -> float:
    """``g(psi, u) - g(static pair)``; the static cost is exactly zero."""
    static = solve_static(params)
    return running_cost(state, control, params) - running_cost(static.state, static.control, params)


def distances_to_static(states: np.ndarray, controls: np.ndarray, params: ModelParams) -> np.ndarray:
    """``||psi^i - psi_s||_N + ||u^i - u_s||_N`` for each of the ``M`` control steps."""
    static = solve_static(params)
    ds = np.sqrt(np.sum((states - static.state) ** 2, axis=(1, 2)))
    du = np.sqrt(np.sum((controls - static.control) ** 2, axis=(1, 2)))
    return ds + du


@dataclass
class DissipativityReport:
    residuals: np.ndarray
    min_residual: float
    violations: int

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _dynamics_defect(traj: Trajectory, controls: ControlSequence, params: ModelParams) -> float:
    h = traj.grid.h
    worst = 0.0
    for i in range(controls.controls.shape[0]):
        psi = traj.states[i]
        expected = psi + h * (interaction(psi, params.kernel) + controls.controls[i])
        scale = max(1.0, float(np.max(np.abs(expected))))
        worst = max(worst, float(np.max(np.abs(traj.states[i + 1] - expected))) / scale)
    return worst


def dissipativity_check(traj: Trajectory, controls: ControlSequence, params: ModelParams) -> DissipativityReport:
    """Per-step residual of the strict dissipation inequality with zero storage.

    ``residual_i = h w(psi^i, u^i) - h alpha(dist_i)``; a violation is a
    residual below ``-1e-12``.
    """
    if traj.grid != controls.grid:
        raise InvalidInputError("trajectory and controls live on different grids")
    if traj.states.shape[1:] != params.shape or controls.controls.shape[1:] != params.shape:
        raise InvalidInputError("trajectory/control shapes do not match params")
    defect = _dynamics_defect(traj, controls, params)
    if defect > DYNAMICS_TOLERANCE:
        raise InvalidInputError(
            f"trajectory does not satisfy the Euler dynamics (max relative defect {defect:.3e})"
        )
    h = traj.grid.h
    omega = running_costs(traj.states[:-1], controls.controls, params)
    dist = distances_to_static(traj.states[:-1], controls.controls, params)
    residuals = h * omega - h * _alpha_array(dist, params)
    return DissipativityReport(
        residuals=residuals,
        min_residual=float(np.min(residuals)) if residuals.size else 0.0,
        violations=int(np.sum(residuals < -RESIDUAL_SLACK)),
    )


@dataclass
class CheapControlReport:
    value: float
    bound: float
    margin: float
    passed: bool
    kernel_bound: float
    note: str = ""


def cheap_control_inequality_check(
    problem: OcpProblem, solution_value: float, params: ModelParams, ledger: ConstantsLedger
) -> CheapControlReport:
    """Check ``v <= C0 * alpha(||psi^0 - psi_s||_N)``.

    A failure here is a statement about the constants (typically a
    ``kernel_bound`` that does not dominate the kernel along the trajectory),
    not a software error, so it is reported rather than raised.
    """
    static = solve_static(params)
    psi0 = check_matrix(problem.initial, params, "initial state")
    bound = ledger.c0_tilde * alpha(ensemble_norm(psi0 - static.state), params)
    margin = bound - solution_value
    passed = solution_value <= bound + RELATIVE_SLACK * abs(bound)
    note = "" if passed else "bound assumption violated: check kernel_bound against the kernel range"
    return CheapControlReport(float(solution_value), float(bound), float(margin), bool(passed), ledger.kernel_bound, note)


def r1_index(lam: float, m_steps: int) -> int:
    """Start of the tail window, ``floor((1 - lam) M)``."""
    if not 0 < lam < 1:
        raise InvalidInputError(f"lambda must lie in (0, 1), got {lam}")
    if m_steps < 1:
        raise InvalidInputError(f"m_steps must be positive, got {m_steps}")
    return math.floor((1.0 - lam) * m_steps)


def c1_constant(c0_tilde: float, h: float, r1: int) -> float:
    if r1 < 1:
        raise DegenerateHorizonError("r1 must be >= 1; the head window is empty")
    if not h > 0:
        raise InvalidInputError(f"h must be positive, got {h}")
    return c0_tilde * c0_tilde / (h * r1)


@dataclass
class TurnpikeCertificate:
    lam: float
    r1: int
    c0_tilde: float
    c1_tilde: float
    tail_sum: float
    bound: float
    full_sum: float
    value: float
    chain_ok: bool
    dissipativity_violations: int
    min_dissipativity_residual: float
    passed: bool
    kernel_bound: float
    beta: float

    def as_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out


def turnpike_report(
    problem: OcpProblem, solution: OcpSolution, lam: float, ledger: ConstantsLedger
) -> TurnpikeCertificate:
    """Assemble the interior-decay certificate for a converged solution.

    The tail sum over ``i in [r1, M)`` of ``h alpha(dist_i)`` is compared with
    ``C1 * alpha(||psi^0 - psi_s||_N)``.  The chain ``tail <= full sum <= v``
    is recorded as a cross-check.
    """
    if not solution.converged:
        raise InvalidInputError(
            f"turnpike_report needs a converged solution ({solution.message}, "
            f"|grad|/h = {solution.gradient_norm:.3e} after {solution.iterations} iterations)"
        )
    params, grid = problem.params, problem.grid
    m, h = grid.m_steps, grid.h
    r1 = r1_index(lam, m)
    c1 = c1_constant(ledger.c0_tilde, h, r1)

    states = solution.trajectory.states
    controls = solution.controls.controls
    dist = distances_to_static(states[:-1], controls, params)
    terms = h * _alpha_array(dist, params)
    tail_sum = float(np.sum(terms[r1:]))
    full_sum = float(np.sum(terms))
    static = solve_static(params)
    bound = c1 * alpha(ensemble_norm(problem.initial - static.state), params)

    slack = RELATIVE_SLACK * max(abs(solution.value), abs(bound))
    chain_ok = tail_sum <= full_sum + slack and full_sum <= solution.value + slack
    diss = dissipativity_check(solution.trajectory, solution.controls, params)
    passed = tail_sum <= bound + RELATIVE_SLACK * abs(bound) and diss.violations == 0
    return TurnpikeCertificate(
        lam=lam,
        r1=r1,
        c0_tilde=ledger.c0_tilde,
        c1_tilde=c1,
        tail_sum=tail_sum,
        bound=float(bound),
        full_sum=full_sum,
        value=float(solution.value),
        chain_ok=bool(chain_ok),
        dissipativity_violations=diss.violations,
        min_dissipativity_residual=diss.min_residual,
        passed=bool(passed),
        kernel_bound=ledger.kernel_bound,
        beta=ledger.beta,
    )
