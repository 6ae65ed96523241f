import numpy as np
import pytest

from turnpike import (
    ControlSequence,
    DegenerateHorizonError,
    DivergenceError,
    InteractionKernel,
    InvalidInputError,
    ModeNotSupportedError,
    ModelParams,
    OcpProblem,
    SolverConfig,
    TimeGrid,
    closed_loop_rollout,
    dpp_check,
    objective_and_gradient,
    rollout,
    solve_ocp,
    total_cost,
)


def cost_of(problem, u):
    seq = ControlSequence(u, problem.grid)
    return total_cost(rollout(problem.initial, seq, problem.params), seq, problem.params)


def central_differences(problem, u, step=1e-6):
    """Independent oracle: perturb one control entry at a time through the public API."""
    grad = np.zeros_like(u)
    for idx in np.ndindex(u.shape):
        up, um = u.copy(), u.copy()
        up[idx] += step
        um[idx] -= step
        grad[idx] = (cost_of(problem, up) - cost_of(problem, um)) / (2 * step)
    return grad


def random_problem(rng, kernel=InteractionKernel.QUADRATIC):
    n, d, m = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 11))
    h = float(rng.uniform(0.05, 0.2))
    p = ModelParams(n, d, rng.uniform(-0.5, 0.5, d), float(rng.uniform(0.05, 1.0)), kernel)
    prob = OcpProblem(p, TimeGrid.from_steps(0.0, h, m), rng.uniform(-1, 1, (n, d)))
    return prob, rng.normal(scale=0.5, size=(m, n, d))


class TestObjectiveAndGradient:
    def test_stationary(self):
        p = ModelParams(3, 2, [0.5, 0.1], 0.1)
        prob = OcpProblem(p, TimeGrid(0, 1, 0.1), np.tile(p.target, (3, 1)))
        value, grad = objective_and_gradient(prob, ControlSequence.zeros(prob.grid, p))
        assert value == 0.0 and not grad.any()

    @pytest.mark.parametrize("u0", [0.0, 0.7, -2.0])
    @pytest.mark.parametrize("gamma", [0.1, 1.0, 3.0])
    def test_single_step_analytic(self, u0, gamma):
        p = ModelParams(1, 1, [0.0], gamma)
        prob = OcpProblem(p, TimeGrid(0, 1, 1), [[1.0]])
        value, grad = objective_and_gradient(prob, ControlSequence(np.array([[[u0]]]), prob.grid))
        assert value == pytest.approx(1 + gamma * u0**2, rel=1e-15)
        assert grad[0, 0, 0] == pytest.approx(2 * gamma * u0, rel=1e-15, abs=1e-300)

    def test_small_instance_against_fd(self, rng):
        p = ModelParams(3, 2, [0.1, -0.2], 0.3)
        prob = OcpProblem(p, TimeGrid.from_steps(0.0, 0.1, 5), rng.uniform(-1, 1, (3, 2)))
        u = rng.normal(size=(5, 3, 2))
        _, grad = objective_and_gradient(prob, ControlSequence(u, prob.grid))
        fd = central_differences(prob, u)
        assert np.max(np.abs(grad - fd)) / np.max(np.abs(fd)) <= 1e-6

    @pytest.mark.parametrize("kernel", [InteractionKernel.QUADRATIC, InteractionKernel.ZERO])
    def test_random_instances(self, kernel, rng):
        for _ in range(20):
            prob, u = random_problem(rng, kernel)
            _, grad = objective_and_gradient(prob, ControlSequence(u, prob.grid))
            fd = central_differences(prob, u)
            assert np.max(np.abs(grad - fd)) / np.max(np.abs(fd)) <= 1e-6

    def test_internal_fd_mode_agrees(self, rng):
        prob, u = random_problem(rng)
        seq = ControlSequence(u, prob.grid)
        _, ga = objective_and_gradient(prob, seq)
        _, gf = objective_and_gradient(prob, seq, mode="finite-difference")
        assert np.max(np.abs(ga - gf)) / np.max(np.abs(ga)) <= 1e-6

    def test_absolute_kernel_needs_fd(self, rng):
        prob, u = random_problem(rng, InteractionKernel.ABSOLUTE)
        seq = ControlSequence(u, prob.grid)
        with pytest.raises(ModeNotSupportedError):
            objective_and_gradient(prob, seq)
        value, grad = objective_and_gradient(prob, seq, mode="finite-difference")
        assert value == pytest.approx(cost_of(prob, u), rel=1e-14)
        assert np.all(np.isfinite(grad))


class TestSolve:
    def test_stationary_start(self):
        p = ModelParams(4, 1, [0.5], 0.1)
        prob = OcpProblem(p, TimeGrid(0, 1, 0.1), np.full((4, 1), 0.5))
        sol = solve_ocp(prob)
        assert sol.converged and sol.iterations == 0 and sol.value == 0.0
        assert not sol.controls.controls.any()

    @pytest.mark.parametrize("gamma", [0.01, 0.1, 5.0])
    def test_single_step(self, gamma):
        p = ModelParams(1, 1, [0.0], gamma)
        sol = solve_ocp(OcpProblem(p, TimeGrid(0, 1, 1), [[1.0]]))
        assert sol.converged and sol.value == 1.0
        assert sol.controls.controls[0, 0, 0] == 0.0

    def test_solution_invariants(self, desk_solution):
        problem, sol = desk_solution
        assert sol.converged
        replay = rollout(problem.initial, sol.controls, problem.params)
        np.testing.assert_array_equal(replay.states, sol.trajectory.states)
        assert sol.value == pytest.approx(total_cost(replay, sol.controls, problem.params), rel=1e-14)

    @pytest.mark.parametrize("beta", [1.0, 3.0, 8.0, 15.0, 19.9])
    def test_value_below_cheap_control(self, desk_solution, beta):
        problem, sol = desk_solution
        traj, u = closed_loop_rollout(problem.initial, problem.grid, problem.params, beta)
        assert sol.value <= total_cost(traj, u, problem.params)

    def test_monotone_descent(self, desk_solution):
        _, sol = desk_solution
        hist = np.array(sol.history)
        rise = hist[1:] - hist[:-1]
        assert np.all(rise <= 64 * np.finfo(float).eps * np.abs(hist[:-1]))
        assert hist[-1] < hist[0]

    def test_shift_invariance(self, desk_solution):
        problem, sol = desk_solution
        grid = TimeGrid(7.25, 12.25, 0.05)
        shifted = solve_ocp(OcpProblem(problem.params, grid, problem.initial))
        assert shifted.converged
        np.testing.assert_allclose(shifted.controls.controls, sol.controls.controls, rtol=0, atol=1e-9)
        assert shifted.value == pytest.approx(sol.value, rel=1e-10)

    def test_warm_start(self, desk_solution):
        problem, sol = desk_solution
        again = solve_ocp(problem, warm_start=sol.controls)
        assert again.converged and again.iterations == 0
        with pytest.raises(InvalidInputError):
            solve_ocp(problem, warm_start=np.zeros((3, 10, 1)))

    def test_iteration_limit(self, rng):
        prob, _ = random_problem(rng)
        sol = solve_ocp(prob, SolverConfig(max_iterations=1, gradient_tolerance=1e-14))
        assert not sol.converged and sol.iterations == 1

    def test_absolute_kernel_fd_mode(self, rng):
        p = ModelParams(3, 1, [0.5], 0.1, InteractionKernel.ABSOLUTE)
        x0 = rng.uniform(0, 1, (3, 1))
        prob = OcpProblem(p, TimeGrid(0, 1, 0.1), x0)
        with pytest.raises(ModeNotSupportedError):
            solve_ocp(prob)
        sol = solve_ocp(prob, SolverConfig(gradient_mode="finite-difference", gradient_tolerance=1e-6))
        assert sol.converged
        traj, u = closed_loop_rollout(x0, prob.grid, p, 3.0)
        assert sol.value <= total_cost(traj, u, p)

    def test_divergence(self):
        p = ModelParams(2, 1, [0.0], 0.1)
        prob = OcpProblem(p, TimeGrid(0, 20, 1.0), [[0.0], [1e3]])
        with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
            solve_ocp(prob)
        assert info.value.iterate is not None

    @pytest.mark.parametrize("kwargs", [
        dict(gradient_tolerance=0.0), dict(shrink=1.0), dict(shrink=0.0), dict(memory=0),
        dict(gradient_mode="newton"), dict(sufficient_decrease=0.7),
    ])
    def test_config_validation(self, kwargs):
        with pytest.raises(InvalidInputError):
            SolverConfig(**kwargs)


class TestDpp:
    @pytest.mark.parametrize("frac", [4, 2])
    def test_desk_splits(self, desk_solution, frac):
        problem, sol = desk_solution
        rep = dpp_check(problem, sol, problem.grid.m_steps // frac)
        assert rep.passed, rep

    def test_stationary(self):
        p = ModelParams(3, 1, [0.5], 0.1)
        prob = OcpProblem(p, TimeGrid(0, 1, 0.1), np.full((3, 1), 0.5))
        sol = solve_ocp(prob)
        for a in (1, 5, 9):
            rep = dpp_check(prob, sol, a)
            assert rep.passed and rep.tail_cost == 0.0 and rep.resolved_value == 0.0

    @pytest.mark.parametrize("split", [0, 100, 150, -1])
    def test_rejects_split(self, desk_solution, split):
        problem, sol = desk_solution
        with pytest.raises(DegenerateHorizonError):
            dpp_check(problem, sol, split)
