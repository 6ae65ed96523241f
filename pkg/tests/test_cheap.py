import numpy as np
import pytest

from turnpike import (
    ConstantsLedger,
    ConstraintViolationError,
    ControlSequence,
    InteractionKernel,
    InvalidInputError,
    ModelParams,
    TimeGrid,
    alpha,
    c0_constant,
    closed_loop_rollout,
    d0_limit,
    decay_rate,
    drift,
    ensemble_norm,
    feedback_control,
    lyapunov,
    rollout,
    solve_static,
    total_cost,
    uniformity_check,
)
from turnpike.cheap import CheapControlParams, control_bound_check

KERNELS = list(InteractionKernel)


def c0_reference(h, beta, gamma, p):
    """Formula exactly as written, without the algebraic simplification."""
    return h / (1 - (1 - h * beta) ** 2) * (2 / gamma + 4 * (beta**2 + 2 * beta * p + 2 * p**2))


class TestFeedback:
    def test_single_agent(self):
        p = ModelParams(1, 1, [0.5], 0.1)
        np.testing.assert_allclose(feedback_control([[0.0]], p, 1.0), [[0.5]], rtol=1e-15)

    def test_at_target(self):
        p = ModelParams(4, 2, [0.5, 1.0], 0.1)
        assert not feedback_control(np.tile(p.target, (4, 1)), p, 3.0).any()

    def test_two_agents(self):
        p = ModelParams(2, 1, [0.5], 0.1)
        np.testing.assert_allclose(feedback_control([[0.0], [1.0]], p, 2.0), [[0.5], [-0.5]], rtol=1e-15)

    @pytest.mark.parametrize("kernel", KERNELS)
    def test_cancels_interaction(self, kernel, rng):
        p = ModelParams(6, 2, [0.3, -0.3], 0.1, kernel)
        x = rng.normal(size=(6, 2))
        u = feedback_control(x, p, 2.5)
        np.testing.assert_allclose(drift(x, u, p), 2.5 * (p.target - x), atol=1e-13)


class TestClosedLoop:
    def test_constant_at_target(self):
        p = ModelParams(3, 1, [0.5], 0.1)
        traj, u = closed_loop_rollout(np.full((3, 1), 0.5), TimeGrid(0, 1, 0.1), p, 3.0)
        assert np.all(traj.states == 0.5) and not u.controls.any()

    def test_single_agent_values(self):
        p = ModelParams(1, 1, [0.5], 0.1)
        traj, _ = closed_loop_rollout([[0.0]], TimeGrid(0, 0.2, 0.1), p, 1.0)
        np.testing.assert_allclose(traj.states[1:, 0, 0], [0.05, 0.095], rtol=1e-14)

    def test_rejects_large_gain(self):
        p = ModelParams(1, 1, [0.5], 0.1)
        with pytest.raises(ConstraintViolationError):
            closed_loop_rollout([[0.0]], TimeGrid(0, 1, 0.1), p, 10.0)

    @pytest.mark.parametrize("kernel", KERNELS)
    def test_geometric_error(self, kernel, rng):
        p = ModelParams(5, 2, [0.5, 0.5], 0.1, kernel)
        grid = TimeGrid(0, 1, 0.02)
        x0 = rng.uniform(0, 1, size=(5, 2))
        traj, _ = closed_loop_rollout(x0, grid, p, 3.0)
        err0 = np.linalg.norm(x0 - p.target, axis=1)
        for i in range(grid.m_steps + 1):
            err = np.linalg.norm(traj.states[i] - p.target, axis=1)
            np.testing.assert_allclose(err, (1 - 0.06) ** i * err0, rtol=1e-11)

    @pytest.mark.parametrize("kernel", KERNELS)
    def test_matches_open_loop_replay(self, kernel, rng):
        p = ModelParams(8, 2, [0.5, 0.5], 0.1, kernel)
        grid = TimeGrid(0, 2, 0.05)
        x0 = rng.uniform(0, 1, size=(8, 2))
        traj, u = closed_loop_rollout(x0, grid, p, 3.0)
        np.testing.assert_allclose(rollout(x0, u, p).states, traj.states, atol=1e-12, rtol=0)

    @pytest.mark.parametrize("h,beta", [(0.01, 1), (0.01, 3), (0.01, 8), (0.1, 3)])
    def test_lyapunov_decay(self, h, beta, rng):
        p = ModelParams(10, 2, [0.5, 0.5], 0.1)
        grid = TimeGrid.from_steps(0.0, h, 100)
        traj, _ = closed_loop_rollout(rng.uniform(0, 1, (10, 2)), grid, p, beta)
        l0 = lyapunov(traj.states[0], p)
        r = decay_rate(h, beta)
        for i in range(101):
            assert lyapunov(traj.states[i], p) == pytest.approx(r**i * l0, rel=1e-10)


class TestConstants:
    @pytest.mark.parametrize("h,beta,expected", [(0.01, 3, 0.9409), (0.1, 1, 0.81)])
    def test_decay_rate(self, h, beta, expected):
        assert decay_rate(h, beta) == pytest.approx(expected, rel=1e-14)

    def test_decay_rate_limit(self):
        assert decay_rate(1e-12, 1.0) == pytest.approx(1.0, abs=1e-11)

    @pytest.mark.parametrize("h,beta", [(0.1, 10), (0.5, 3)])
    def test_decay_rate_rejects(self, h, beta):
        with pytest.raises(ConstraintViolationError):
            decay_rate(h, beta)

    def test_c0_examples(self):
        assert c0_constant(0.01, 3, 0.1, 1.0) == pytest.approx(88 / 5.91, rel=1e-13)
        assert c0_constant(0.01, 3, 0.1, 1.0) == pytest.approx(14.890, abs=5e-4)
        assert c0_constant(0.01, 3, 0.1, 0.0) == pytest.approx(56 / 5.91, rel=1e-13)
        assert c0_constant(0.01, 3, 0.1, 0.0) == pytest.approx(9.476, abs=1e-3)

    def test_c0_matches_unsimplified_formula(self, rng):
        for _ in range(200):
            beta = rng.uniform(0.1, 10)
            h = rng.uniform(0.01, 0.99) / beta
            gamma, p = rng.uniform(0.01, 2), rng.uniform(0, 3)
            assert c0_constant(h, beta, gamma, p) == pytest.approx(c0_reference(h, beta, gamma, p), rel=1e-10)

    def test_c0_grows_with_h(self):
        assert c0_constant(0.001, 3, 0.1, 1) < c0_constant(0.01, 3, 0.1, 1)

    def test_c0_rejects(self):
        with pytest.raises(ConstraintViolationError):
            c0_constant(0.5, 3, 0.1, 1)
        with pytest.raises(InvalidInputError):
            c0_constant(0.01, 3, 0.0, 1)

    def test_d0(self):
        assert d0_limit(3, 0.1, 1) == pytest.approx(44 / 3, rel=1e-14)
        assert d0_limit(1, 1, 0) == pytest.approx(3.0, rel=1e-15)
        assert c0_constant(1e-6, 3, 0.1, 1) == pytest.approx(44 / 3, rel=1e-4)

    def test_ledger(self):
        led = ConstantsLedger(0.01, 3, 0.1, 1.0)
        assert led.d0_tilde < led.c0_tilde <= 2 * led.d0_tilde
        assert CheapControlParams(3.0, TimeGrid(0, 1, 0.01)).beta == 3.0
        with pytest.raises(ConstraintViolationError):
            CheapControlParams(100.0, TimeGrid(0, 1, 0.01))


class TestUniformity:
    def test_paper_samples(self):
        rep = uniformity_check(3, 0.1, 1, [0.3, 0.1, 0.01, 0.001])
        assert rep.passed, rep.reason

    def test_tiny_step(self):
        rep = uniformity_check(3, 0.1, 1, [1e-8])
        assert rep.passed
        (_, c0), = rep.samples
        assert rep.d0_tilde < c0 <= 2 * rep.d0_tilde

    @pytest.mark.parametrize("h", [1 / 3, 0.5, 0.0, -1.0])
    def test_rejects_outside_interval(self, h):
        with pytest.raises(InvalidInputError):
            uniformity_check(3, 0.1, 1, [0.1, h])


@pytest.mark.parametrize("beta", [1.0, 3.0, 8.0])
@pytest.mark.parametrize("h", [0.1, 0.01])
def test_cheap_cost_bound(beta, h, rng):
    grid = TimeGrid(0, 5, h)
    for _ in range(100 // 6 + 1):
        n = int(rng.integers(2, 12))
        x0 = rng.uniform(0, 1, size=(n, 1))
        kb = float(np.max(InteractionKernel.QUADRATIC.matrix(x0)))
        p = ModelParams(n, 1, [0.5], 0.1, InteractionKernel.QUADRATIC, kb)
        traj, u = closed_loop_rollout(x0, grid, p, beta)
        j = total_cost(traj, u, p)
        bound = c0_constant(h, beta, p.gamma, kb) * alpha(ensemble_norm(x0 - solve_static(p).state), p)
        assert j <= bound


def test_control_bound_applicable(rng):
    x0 = rng.uniform(0, 1, size=(10, 1))
    kb = float(np.max(InteractionKernel.QUADRATIC.matrix(x0)))
    p = ModelParams(10, 1, [0.5], 0.1, InteractionKernel.QUADRATIC, kb)
    traj, u = closed_loop_rollout(x0, TimeGrid(0, 5, 0.01), p, 3.0)
    rep = control_bound_check(traj, u, p, 3.0)
    assert rep["status"] == "pass" and rep["max_ratio"] <= 1


def test_control_bound_not_applicable(rng):
    x0 = rng.uniform(0, 1, size=(10, 1))
    p = ModelParams(10, 1, [0.5], 0.1, InteractionKernel.QUADRATIC, 0.0)
    traj, u = closed_loop_rollout(x0, TimeGrid(0, 1, 0.01), p, 3.0)
    assert control_bound_check(traj, u, p, 3.0)["status"] == "not applicable"
