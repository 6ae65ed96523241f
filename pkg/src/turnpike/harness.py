"""Experiment harness: config loading, seeded initial states, runs and sweeps.

Configs are TOML documents with ``[model]``, ``[grid]``, ``[run]``,
``[init]``, optional ``[solver]`` and ``[sweep]`` sections, e.g.::

    [model]
    n_agents = 100
    dim = 1
    target = 0.5
    gamma = 0.1
    kernel = "quadratic"

    [grid]
    t0 = 0.0
    t_final = 5.0
    h = 0.01

    [run]
    mode = "cheap"
    beta = 3.0

    [init]
    low = 0.0
    high = 1.0

Outputs go to ``run.output_dir``: ``series.csv``, ``report.json`` and, in
optimal mode, ``certificate.json`` and ``controls.csv``.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .analysis import (
    cheap_control_inequality_check,
    dissipativity_check,
    turnpike_report,
)
from .cheap import ConstantsLedger, c0_constant, closed_loop_rollout, control_bound_check, uniformity_check
from .dynamics import rollout
from .errors import DivergenceError, InvalidInputError, TurnpikeError
from .model import (
    ControlSequence,
    InteractionKernel,
    ModelParams,
    TimeGrid,
    ensemble_norm,
    max_kernel_value,
    running_costs,
    total_cost,
)
from .rng import MASK64, SplitMix64
from .solver import FINITE_DIFFERENCE, OcpProblem, SolverConfig, solve_ocp

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunReport",
    "load_config",
    "parse_config",
    "apply_override",
    "sample_initial",
    "run_experiment",
    "run_sweep",
    "verify",
    "read_controls_csv",
    "write_controls_csv",
    "EXIT_OK",
    "EXIT_VALIDATION",
    "EXIT_SOLVER",
    "EXIT_CERTIFICATE",
]

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2
EXIT_CERTIFICATE = 3

MODES = ("uncontrolled", "cheap", "optimal")
SWEEP_PARAMETERS = ("beta", "h", "n_agents")

DEFAULTS = {
    "model": {"n_agents": 100, "dim": 1, "target": 0.5, "gamma": 0.1, "kernel": "quadratic", "kernel_bound": None},
    "grid": {"t0": 0.0, "t_final": 5.0, "h": 0.01},
    "run": {"mode": "cheap", "beta": None, "lambda": 0.5, "seed": 0, "output_dir": "out",
            "per_agent": False, "warm_start": None},
    "init": {"distribution": "uniform", "low": 0.0, "high": 1.0},
    "solver": {},
    "sweep": {},
}


class ConfigError(InvalidInputError):
    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


def _fmt(x) -> str:
    return format(float(x), ".17g")


@dataclass
class ExperimentConfig:
    """Validated experiment description.  ``raw`` keeps the merged document."""

    model: ModelParams
    grid: TimeGrid
    mode: str
    beta: float | None
    lam: float
    seed: int
    low: float
    high: float
    output_dir: Path
    solver: SolverConfig
    kernel_bound_given: bool
    sweep_parameter: str | None = None
    sweep_values: list = field(default_factory=list)
    per_agent: bool = False
    warm_start: Path | None = None
    raw: dict = field(default_factory=dict)

    def echo(self) -> dict:
        return copy.deepcopy(self.raw)


def _merge(base: dict, doc: dict) -> dict:
    merged = copy.deepcopy(base)
    for section, values in doc.items():
        if not isinstance(values, dict):
            raise ConfigError("top-level keys must be sections", section)
        if section not in merged:
            raise ConfigError("unknown section", section)
        merged[section].update(values)
    return merged


def _number(raw, section, key, kind=float, positive=False, allow_none=False):
    value = raw[section].get(key)
    name = f"{section}.{key}"
    if value is None:
        if allow_none:
            return None
        raise ConfigError("missing required value", name)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", name)
    if kind is int and int(value) != value:
        raise ConfigError(f"expected an integer, got {value!r}", name)
    value = kind(value)
    if not math.isfinite(value):
        raise ConfigError("must be finite", name)
    if positive and not value > 0:
        raise ConfigError(f"must be positive, got {value}", name)
    return value


def parse_config(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a config document (already parsed from TOML) and apply defaults."""
    raw = _merge(DEFAULTS, doc)
    base_dir = base_dir or Path.cwd()

    mode = raw["run"]["mode"]
    if mode not in MODES:
        raise ConfigError(f"must be one of {', '.join(MODES)}, got {mode!r}", "run.mode")

    n = _number(raw, "model", "n_agents", int, positive=True)
    d = _number(raw, "model", "dim", int, positive=True)
    gamma = _number(raw, "model", "gamma", positive=True)
    target = raw["model"]["target"]
    if isinstance(target, (int, float)) and not isinstance(target, bool):
        target = [float(target)] * d
    if not isinstance(target, list) or len(target) != d:
        raise ConfigError(f"expected a number or a list of {d} numbers", "model.target")
    try:
        kernel = InteractionKernel.parse(raw["model"]["kernel"])
    except InvalidInputError as exc:
        raise ConfigError(str(exc), "model.kernel") from None
    kernel_bound = _number(raw, "model", "kernel_bound", allow_none=True)
    if kernel_bound is not None and kernel_bound < 0:
        raise ConfigError("must be >= 0", "model.kernel_bound")

    t0 = _number(raw, "grid", "t0")
    tf = _number(raw, "grid", "t_final")
    h = _number(raw, "grid", "h", positive=True)
    try:
        grid = TimeGrid(t0, tf, h)
    except InvalidInputError as exc:
        raise ConfigError(str(exc), "grid") from None
    try:
        model = ModelParams(n, d, target, gamma, kernel, kernel_bound or 0.0)
    except InvalidInputError as exc:
        raise ConfigError(str(exc), "model") from None

    beta = _number(raw, "run", "beta", positive=True, allow_none=True)
    if mode == "cheap" and beta is None:
        raise ConfigError("required in cheap mode", "run.beta")
    if beta is not None and not grid.h * beta < 1:
        raise ConfigError(f"h*beta must be < 1, got {grid.h}*{beta} = {grid.h * beta}", "run.beta")
    lam = _number(raw, "run", "lambda")
    if not 0 < lam < 1:
        raise ConfigError(f"must lie in (0, 1), got {lam}", "run.lambda")
    seed = _number(raw, "run", "seed", int)
    if not 0 <= seed <= MASK64:
        raise ConfigError("must be an unsigned 64-bit integer", "run.seed")

    if raw["init"]["distribution"] != "uniform":
        raise ConfigError("only 'uniform' is supported", "init.distribution")
    low = _number(raw, "init", "low")
    high = _number(raw, "init", "high")
    if not low < high:
        raise ConfigError(f"low ({low}) must be < high ({high})", "init.low")

    solver_doc = dict(raw["solver"])
    if kernel is InteractionKernel.ABSOLUTE and "gradient_mode" not in solver_doc:
        solver_doc["gradient_mode"] = FINITE_DIFFERENCE
        solver_doc.setdefault("gradient_tolerance", 1e-6)
    try:
        solver = SolverConfig(**solver_doc)
    except TypeError as exc:
        raise ConfigError(str(exc), "solver") from None
    except InvalidInputError as exc:
        raise ConfigError(str(exc), "solver") from None

    sweep_parameter = raw["sweep"].get("parameter")
    sweep_values = list(raw["sweep"].get("values", []))
    if sweep_parameter is not None and sweep_parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"must be one of {', '.join(SWEEP_PARAMETERS)}", "sweep.parameter")

    out = Path(raw["run"]["output_dir"])
    warm = raw["run"].get("warm_start")
    return ExperimentConfig(
        model=model,
        grid=grid,
        mode=mode,
        beta=beta,
        lam=lam,
        seed=seed,
        low=low,
        high=high,
        output_dir=out if out.is_absolute() else base_dir / out,
        solver=solver,
        kernel_bound_given=kernel_bound is not None,
        sweep_parameter=sweep_parameter,
        sweep_values=sweep_values,
        per_agent=bool(raw["run"].get("per_agent", False)),
        warm_start=None if warm is None else (Path(warm) if Path(warm).is_absolute() else base_dir / warm),
        raw=raw,
    )


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply ``section.key=value`` to a raw config document (value parsed as TOML)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"override key {key!r} must be section.key")
    section, name = parts
    doc = copy.deepcopy(doc)
    doc.setdefault(section, {})[name] = _parse_value(text.strip())
    return doc


def read_document(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"parse error in {path}: {exc}") from None


def load_config(path, overrides=(), seed: int | None = None, output_dir=None) -> ExperimentConfig:
    """Read, override and validate a TOML experiment config."""
    path = Path(path)
    doc = read_document(path)
    for assignment in overrides:
        doc = apply_override(doc, assignment)
    if seed is not None:
        doc = apply_override(doc, f"run.seed={int(seed)}")
    if output_dir is not None:
        doc.setdefault("run", {})["output_dir"] = str(output_dir)
    return parse_config(doc, base_dir=path.resolve().parent)


def sample_initial(config: ExperimentConfig) -> np.ndarray:
    """``N x d`` uniform initial state from SplitMix64 seeded with ``run.seed``."""
    rng = SplitMix64(config.seed)
    return rng.uniform(config.low, config.high, config.model.shape)


def _resolve_params(config: ExperimentConfig, initial: np.ndarray) -> ModelParams:
    if config.kernel_bound_given:
        return config.model
    return config.model.replace(kernel_bound=max_kernel_value(initial, config.model.kernel))


def bound_beta(params: ModelParams, h: float) -> float:
    """Gain in ``(0, 1/h)`` that (approximately) minimises ``C0(h)``."""
    candidates = np.linspace(0.0, 1.0 / h, 4002)[1:-1]
    values = [c0_constant(h, b, params.gamma, params.kernel_bound) for b in candidates]
    return float(candidates[int(np.argmin(values))])


@dataclass
class RunReport:
    config: dict
    mode: str
    times: np.ndarray
    lyapunov: np.ndarray
    running_cost: np.ndarray
    control_norm: np.ndarray
    mean_state: np.ndarray
    summary: dict
    certificate: dict | None = None
    exit_code: int = EXIT_OK
    diagnostics: str = ""

    def series_csv(self) -> str:
        d = self.mean_state.shape[1]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "time", "L_N", "g", "u_norm_N", *[f"mean_{j}" for j in range(d)]])
        m = self.running_cost.shape[0]
        for i in range(self.times.shape[0]):
            g = _fmt(self.running_cost[i]) if i < m else ""
            un = _fmt(self.control_norm[i]) if i < m else ""
            writer.writerow([i, _fmt(self.times[i]), _fmt(self.lyapunov[i]), g, un,
                             *[_fmt(v) for v in self.mean_state[i]]])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "mode": self.mode,
            "summary": self.summary,
            "certificate": self.certificate,
            "exit_code": self.exit_code,
            "diagnostics": self.diagnostics,
        }


def fit_decay(lyap: np.ndarray) -> dict:
    """Least-squares fit of ``log L_N`` against the step index."""
    steps = np.arange(lyap.shape[0])
    mask = lyap > 1e-300
    if mask.sum() < 2:
        return {"ratio": None, "r_squared": None}
    x, y = steps[mask], np.log(lyap[mask])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return {"ratio": float(np.exp(slope)), "r_squared": r2}


def _series(states, controls, params, grid, mode, config_echo, summary, **extra) -> RunReport:
    err = states - params.target
    lyap = np.sum(err * err, axis=(1, 2)) / params.n_agents
    g = running_costs(states[:-1], controls, params)
    unorm = np.sqrt(np.sum(controls * controls, axis=(1, 2)))
    means = states.mean(axis=1)
    summary = dict(summary)
    summary["final_L_N"] = float(lyap[-1])
    summary["decay_fit"] = fit_decay(lyap)
    return RunReport(config_echo, mode, grid.times, lyap, g, unorm, means, summary, **extra)


def write_controls_csv(path, controls: np.ndarray) -> None:
    """Array format for control sequences: one row per (step, agent)."""
    m, n, d = controls.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "agent", *[f"u_{j}" for j in range(d)]])
        for i in range(m):
            for k in range(n):
                writer.writerow([i, k, *[_fmt(v) for v in controls[i, k]]])


def read_controls_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["step", "agent"]:
        raise InvalidInputError(f"{path}: not a control sequence file")
    d = len(rows[0]) - 2
    body = np.array([[float(v) for v in r] for r in rows[1:]])
    m = int(body[:, 0].max()) + 1
    n = int(body[:, 1].max()) + 1
    out = np.full((m, n, d), np.nan)
    out[body[:, 0].astype(int), body[:, 1].astype(int)] = body[:, 2:]
    if np.isnan(out).any():
        raise InvalidInputError(f"{path}: missing (step, agent) rows")
    return out


def _write_outputs(report: RunReport, out_dir: Path, states=None, controls=None, per_agent=False) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "series.csv").write_text(report.series_csv())
    (out_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    if report.certificate is not None:
        (out_dir / "certificate.json").write_text(json.dumps(report.certificate, indent=2, sort_keys=True) + "\n")
    if controls is not None and report.mode == "optimal":
        write_controls_csv(out_dir / "controls.csv", controls)
    if per_agent and states is not None:
        n, d = states.shape[1:]
        with open(out_dir / "agents.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "agent", *[f"psi_{j}" for j in range(d)]])
            for i in range(states.shape[0]):
                for k in range(n):
                    writer.writerow([i, k, *[_fmt(v) for v in states[i, k]]])


def run_experiment(config: ExperimentConfig, write: bool = True) -> RunReport:
    """Run one experiment in the configured mode and (optionally) write its files."""
    initial = sample_initial(config)
    params = _resolve_params(config, initial)
    grid = config.grid
    echo = config.echo()
    echo["model"]["kernel_bound"] = params.kernel_bound
    summary = {"n_agents": params.n_agents, "h": grid.h, "m_steps": grid.m_steps,
               "kernel_bound": params.kernel_bound, "initial_L_N": None}
    states = controls = None

    if config.mode == "uncontrolled":
        zero = ControlSequence.zeros(grid, params)
        traj = rollout(initial, zero, params)
        states, controls = traj.states, zero.controls
        summary["J"] = total_cost(traj, zero, params)
        report = _series(states, controls, params, grid, config.mode, echo, summary)
    elif config.mode == "cheap":
        traj, seq = closed_loop_rollout(initial, grid, params, config.beta)
        states, controls = traj.states, seq.controls
        summary["J"] = total_cost(traj, seq, params)
        summary["beta"] = config.beta
        summary["expected_decay_ratio"] = (1.0 - grid.h * config.beta) ** 2
        report = _series(states, controls, params, grid, config.mode, echo, summary)
    else:
        problem = OcpProblem(params, grid, initial)
        warm = None if config.warm_start is None else read_controls_csv(config.warm_start)
        try:
            sol = solve_ocp(problem, config.solver, warm_start=warm)
        except DivergenceError as exc:
            report = RunReport(echo, config.mode, grid.times, np.full(grid.m_steps + 1, np.nan),
                               np.full(grid.m_steps, np.nan), np.full(grid.m_steps, np.nan),
                               np.full((grid.m_steps + 1, params.dim), np.nan), summary,
                               exit_code=EXIT_SOLVER, diagnostics=str(exc))
            if write:
                config.output_dir.mkdir(parents=True, exist_ok=True)
                (config.output_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
                if exc.iterate is not None:
                    write_controls_csv(config.output_dir / "diverged_iterate.csv", np.asarray(exc.iterate))
            return report
        states, controls = sol.trajectory.states, sol.controls.controls
        beta = config.beta if config.beta is not None else bound_beta(params, grid.h)
        summary.update({"v": sol.value, "J": sol.value, "iterations": sol.iterations,
                        "gradient_norm": sol.gradient_norm, "converged": sol.converged,
                        "solver_message": sol.message, "beta": beta})
        cheap_traj, cheap_seq = closed_loop_rollout(initial, grid, params, beta)
        summary["cheap_J"] = total_cost(cheap_traj, cheap_seq, params)
        if not sol.converged:
            report = _series(states, controls, params, grid, config.mode, echo, summary,
                             exit_code=EXIT_SOLVER, diagnostics=f"solver did not converge: {sol.message}")
        else:
            ledger = ConstantsLedger.for_params(params, grid, beta)
            cert = turnpike_report(problem, sol, config.lam, ledger).as_dict()
            cc = cheap_control_inequality_check(problem, sol.value, params, ledger)
            cert["cheap_control_bound"] = cc.bound
            cert["cheap_control_passed"] = cc.passed
            cert["d0_tilde"] = ledger.d0_tilde
            code = EXIT_OK if cert["passed"] else EXIT_CERTIFICATE
            report = _series(states, controls, params, grid, config.mode, echo, summary,
                             certificate=cert, exit_code=code)
    report.summary["initial_L_N"] = float(report.lyapunov[0])
    if write:
        _write_outputs(report, config.output_dir, states, controls, config.per_agent)
    return report


def _override_config(config: ExperimentConfig, parameter: str, value) -> ExperimentConfig:
    doc = {k: dict(v) for k, v in config.raw.items()}
    section = {"beta": "run", "h": "grid", "n_agents": "model"}[parameter]
    doc[section][parameter] = value
    doc["run"]["output_dir"] = str(config.output_dir / f"{parameter}={value}")
    doc["sweep"] = {}
    doc["run"]["warm_start"] = None if config.warm_start is None else str(config.warm_start)
    return parse_config(doc)


def _run_entry(args):
    config, parameter, value, write = args
    try:
        sub = _override_config(config, parameter, value)
        return value, run_experiment(sub, write=write), ""
    except TurnpikeError as exc:
        return value, None, str(exc)


def run_sweep(config: ExperimentConfig, workers: int = 1, write: bool = True):
    """Run one experiment per sweep value; returns ``(reports, table_rows)``.

    Failed entries are recorded in the table and do not stop the sweep.
    """
    if not config.sweep_parameter or not config.sweep_values:
        raise ConfigError("sweep needs a parameter and a non-empty list of values", "sweep")
    jobs = [(config, config.sweep_parameter, v, write) for v in config.sweep_values]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_entry, jobs))
    else:
        results = [_run_entry(job) for job in jobs]

    reports, rows = [], []
    for value, report, error in results:
        reports.append(report)
        if report is None:
            rows.append({"parameter": config.sweep_parameter, "value": value, "final_L_N": "", "J": "",
                         "v": "", "certificate_passed": "", "decay_ratio": "", "status": f"failed: {error}"})
            continue
        s = report.summary
        ratio = s["decay_fit"]["ratio"]
        rows.append({
            "parameter": config.sweep_parameter,
            "value": value,
            "final_L_N": _fmt(s["final_L_N"]),
            "J": _fmt(s["J"]),
            "v": _fmt(s["v"]) if "v" in s else "",
            "certificate_passed": "" if report.certificate is None else str(report.certificate["passed"]).lower(),
            "decay_ratio": "" if ratio is None else _fmt(ratio),
            "status": "ok" if report.exit_code == EXIT_OK else f"exit {report.exit_code}",
        })
    if write:
        config.output_dir.mkdir(parents=True, exist_ok=True)
        with open(config.output_dir / "sweep.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return reports, rows


def verify(config: ExperimentConfig, write: bool = True) -> dict:
    """Solve the optimal problem and run every certificate check on it."""
    initial = sample_initial(config)
    params = _resolve_params(config, initial)
    grid = config.grid
    problem = OcpProblem(params, grid, initial)
    beta = config.beta if config.beta is not None else bound_beta(params, grid.h)
    ledger = ConstantsLedger.for_params(params, grid, beta)
    result: dict = {"config": config.echo(), "constants": ledger.as_dict()}
    result["config"]["model"]["kernel_bound"] = params.kernel_bound

    cheap_traj, cheap_seq = closed_loop_rollout(initial, grid, params, beta)
    cheap_J = total_cost(cheap_traj, cheap_seq, params)
    cc_cheap = cheap_control_inequality_check(problem, cheap_J, params, ledger)
    result["cheap_control_closed_loop"] = vars(cc_cheap)
    result["control_bound"] = control_bound_check(cheap_traj, cheap_seq, params, beta)
    h_samples = sorted({grid.h, *[h for h in (0.9 / beta, 0.1 / beta, 0.01 / beta, 1e-6 / beta)]})
    uni = uniformity_check(beta, params.gamma, params.kernel_bound, h_samples)
    result["uniformity"] = {"passed": uni.passed, "d0_tilde": uni.d0_tilde,
                            "samples": [{"h": h, "c0_tilde": c} for h, c in uni.samples], "reason": uni.reason}

    code = EXIT_OK
    try:
        sol = solve_ocp(problem, config.solver)
    except DivergenceError as exc:
        result["solver"] = {"converged": False, "message": str(exc)}
        sol = None
        code = EXIT_SOLVER
    if sol is not None:
        result["solver"] = {"converged": sol.converged, "v": sol.value, "iterations": sol.iterations,
                            "gradient_norm": sol.gradient_norm, "message": sol.message}
        if not sol.converged:
            code = EXIT_SOLVER
        else:
            diss = dissipativity_check(sol.trajectory, sol.controls, params)
            result["dissipativity"] = {"violations": diss.violations, "min_residual": diss.min_residual,
                                       "passed": diss.passed}
            result["cheap_control_optimal"] = vars(cheap_control_inequality_check(problem, sol.value, params, ledger))
            cert = turnpike_report(problem, sol, config.lam, ledger)
            result["certificate"] = cert.as_dict()
            checks = [diss.passed, result["cheap_control_optimal"]["passed"], cc_cheap.passed,
                      cert.passed, uni.passed, result["control_bound"]["status"] != "fail"]
            if not all(checks):
                code = EXIT_CERTIFICATE
    result["exit_code"] = code
    result["passed"] = code == EXIT_OK
    if write:
        config.output_dir.mkdir(parents=True, exist_ok=True)
        (config.output_dir / "verify.json").write_text(json.dumps(result, indent=2, sort_keys=True, default=float) + "\n")
    return result
