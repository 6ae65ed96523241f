"""Discrete-time multi-agent optimal control: dynamics, solver and turnpike certificates."""

from .analysis import (
    TurnpikeCertificate,
    alpha,
    c1_constant,
    cheap_control_inequality_check,
    dissipativity_check,
    r1_index,
    supply_rate,
    turnpike_report,
)
from .cheap import (
    ConstantsLedger,
    c0_constant,
    closed_loop_rollout,
    d0_limit,
    decay_rate,
    feedback_control,
    uniformity_check,
)
from .dynamics import drift, euler_step, rollout
from .errors import (
    ConstraintViolationError,
    DegenerateHorizonError,
    DivergenceError,
    InvalidInputError,
    ModeNotSupportedError,
    TurnpikeError,
)
from .model import (
    ControlSequence,
    InteractionKernel,
    ModelParams,
    StaticSolution,
    TimeGrid,
    Trajectory,
    ensemble_norm,
    lyapunov,
    running_cost,
    solve_static,
    static_residual,
    total_cost,
)
from .solver import OcpProblem, OcpSolution, SolverConfig, dpp_check, objective_and_gradient, solve_ocp

__version__ = "0.1.0"
