import json

import numpy as np
import pytest

from safedyn.config import BarrierConfig
from safedyn.errors import InfeasibleIterate
from safedyn.lbsgd import (BarrierOptState, LagrangianOptState, barrier_gradient, barrier_value, bench_optimizer,
                           decay_eta, lagrangian_step, lbsgd_step, step_size)


def test_barrier_value_examples():
    assert barrier_value(1.0, -1.0, 0.1) == pytest.approx(1.0)
    assert barrier_value(0.0, -np.exp(-1.0), 0.3) == pytest.approx(0.3)
    with pytest.raises(InfeasibleIterate):
        barrier_value(2.0, 0.0, 0.1)


def test_barrier_gradient_examples():
    g = barrier_gradient(np.array([1.0, 0.0]), np.array([0.0, 1.0]), -0.5, 0.1)
    assert np.allclose(g, [1.0, 0.2])
    gJ = np.array([0.3, -0.7])
    assert np.array_equal(barrier_gradient(gJ, np.zeros(2), -2.0, 0.5), gJ)
    with pytest.raises(InfeasibleIterate):
        barrier_gradient(gJ, gJ, 1e-9, 0.1)


def test_barrier_gradient_is_exact_gradient_of_barrier_value():
    """Randomized closed forms: J(x) = a.x + x.x / 2, J_c(x) = b.x - c with c > |b.x|."""
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(1000):
        a, b, x = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3) * 0.5
        c = abs(b @ x) + rng.uniform(0.1, 2.0)
        eta = rng.uniform(0.01, 1.0)

        def value(y):
            return barrier_value(a @ y + 0.5 * y @ y, b @ y - c, eta)

        g = barrier_gradient(a + x, b, b @ x - c, eta)
        # B = J - eta log(-J_c) so dB/dx = gJ - eta * gJ_c / J_c = gJ + eta * gJ_c / (-J_c)
        numeric = np.array([(value(x + h * e) - value(x - h * e)) / (2 * h) for e in np.eye(3)])
        err = np.abs(g - numeric) / np.maximum(np.maximum(np.abs(g), np.abs(numeric)), 1e-8)
        assert np.all(err <= 1e-4)


def test_step_size_far_from_boundary_is_base_rate():
    d = np.array([0.5, 0.0])
    assert step_size(d, np.zeros(2), -10.0, 1.0, 0.05) == 0.05


def test_step_size_caps_step_length_for_long_directions():
    d = np.array([0.0, 50.0])
    gamma = step_size(d, np.zeros(2), -10.0, 1.0, 0.05)
    # alpha = 10 / (2 * (0 + 1 * 10)) = 0.5
    assert gamma == pytest.approx(0.01)
    assert gamma * np.linalg.norm(d) == pytest.approx(0.5)

    # u = (0.6, 0.8), <gJ_c, u> = 5, alpha = 2 / (2 * (5 + 0.5 * 2)) = 1 / 6
    gamma = step_size(np.array([30.0, 40.0]), np.array([3.0, 4.0]), -2.0, 0.5, 0.05)
    assert gamma == pytest.approx(1.0 / 300.0)


def test_step_size_shrinks_near_boundary():
    d = np.array([1.0, 1.0])
    gc = np.array([0.5, 2.0])
    near = step_size(d, gc, -0.01, 1.0, 0.05)
    far = step_size(d, gc, -10.0, 1.0, 0.05)
    assert near <= far
    assert near < 0.05


def test_lbsgd_step_far_from_boundary_is_plain_sgd():
    state = BarrierOptState(eta=0.1, learning_rate=0.05)
    params = np.zeros(2)
    new, state = lbsgd_step(params, np.array([1.0, 0.0]), np.zeros(2), -10.0, state, lambda p: -10.0)
    assert np.allclose(new, [0.05, 0.0])
    assert state.ledger[-1].accepted
    assert state.ledger[-1].gamma == 0.05


def test_lbsgd_step_stays_inside_linear_constraint():
    # J_c(x) = x_0 - 0.01, the objective pushes straight at the boundary
    state = BarrierOptState(eta=1e-4, learning_rate=0.05)
    x = np.zeros(2)
    new, state = lbsgd_step(x, np.array([1.0, 0.0]), np.array([1.0, 0.0]), -0.01, state, lambda p: p[0] - 0.01)
    entry = state.ledger[-1]
    assert entry.accepted
    assert entry.gamma < 0.05
    assert new[0] - 0.01 < 0
    assert new[0] > 0


def test_lbsgd_step_backtracks_and_rejects():
    state = BarrierOptState(eta=0.1, learning_rate=0.05, max_backtracks=3)
    x = np.zeros(2)
    new, state = lbsgd_step(x, np.array([1.0, 0.0]), np.zeros(2), -1.0, state, lambda p: 1.0)
    assert np.array_equal(new, x)
    entry = state.ledger[-1]
    assert not entry.accepted
    assert entry.backtracks == 3
    assert entry.J_c < 0
    assert state.violations() == 0

    calls = []

    def halving_guard(p):
        calls.append(p.copy())
        return -1.0 if len(calls) > 2 else 1.0

    new, state = lbsgd_step(x, np.array([1.0, 0.0]), np.zeros(2), -1.0, BarrierOptState(), halving_guard)
    assert state.ledger[-1].backtracks == 2
    assert np.allclose(new, calls[0] / 4)


def test_lbsgd_step_rejects_infeasible_entry():
    with pytest.raises(InfeasibleIterate):
        lbsgd_step(np.zeros(2), np.ones(2), np.ones(2), 0.0, BarrierOptState(), lambda p: -1.0)


def test_curvature_estimate_tracks_constraint_gradient_changes():
    state = BarrierOptState(curvature=1.0, curvature_ema=0.5)
    lbsgd_step(np.zeros(2), np.ones(2), np.zeros(2), -10.0, state, lambda p: -10.0)
    lbsgd_step(np.array([1.0, 0.0]), np.ones(2), np.array([3.0, 0.0]), -10.0, state, lambda p: -10.0)
    assert state.curvature == pytest.approx(0.5 * 1.0 + 0.5 * 3.0)


def test_decay_eta():
    state = BarrierOptState(eta=0.1, eta_decay=0.97, eta_min=1e-3)
    decay_eta(state)
    assert state.eta == pytest.approx(0.097)
    state.eta = 1e-3
    decay_eta(state)
    assert state.eta == 1e-3
    state = BarrierOptState.from_config(BarrierConfig())
    for _ in range(200):
        decay_eta(state)
    assert state.eta == pytest.approx(max(1e-3, 0.1 * 0.97 ** 200))


def test_lagrangian_step_inactive_constraint_is_sgd():
    state = LagrangianOptState(multiplier=0.0, learning_rate=0.1)
    new, state = lagrangian_step(np.zeros(2), np.array([1.0, 2.0]), np.array([5.0, 5.0]), -1.0, state)
    assert np.allclose(new, [0.1, 0.2])


def test_lagrangian_multiplier_is_projected():
    state = LagrangianOptState(multiplier=0.05, multiplier_lr=0.1)
    lagrangian_step(np.zeros(2), np.zeros(2), np.zeros(2), -1.0, state)
    assert state.multiplier == 0.0


def test_lagrangian_penalty_grows_after_patience():
    state = LagrangianOptState(penalty=1.0, penalty_growth=1.5, patience=2, penalty_max=2.0)
    for expected in (1.0, 1.5, 1.5, 2.0):
        lagrangian_step(np.zeros(2), np.zeros(2), np.zeros(2), 0.5, state)
        assert state.penalty == expected


@pytest.mark.parametrize("problem_id,optimum", [("ball-projection", (1.0, 0.0)), ("linear-cut", (0.5, 0.5)),
                                                ("noisy-quadratic", (1.0, 0.0))])
@pytest.mark.parametrize("noise", [0.0, 0.01])
def test_lbsgd_bench_keeps_every_iterate_feasible(problem_id, optimum, noise):
    result = bench_optimizer(problem_id, "lbsgd", iterations=500, noise=noise, seed=1)
    assert result.violations == 0
    assert all(entry.J_c < 0 for entry in result.ledger)
    assert np.linalg.norm(result.final - np.array(optimum)) <= 1e-2


def test_lagrangian_bench_converges_on_linear_cut():
    result = bench_optimizer("linear-cut", "lagrangian", iterations=500, noise=0.0)
    assert result.error <= 1e-2


def test_bench_rejects_unknown_optimizer():
    with pytest.raises(ValueError):
        bench_optimizer("linear-cut", "newton")


def test_ledger_export(tmp_path):
    result = bench_optimizer("ball-projection", "lbsgd", iterations=5)
    state = BarrierOptState(ledger=result.ledger)
    path = tmp_path / "ledger.jsonl"
    state.export_ledger(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 5
    first = json.loads(lines[0])
    assert first["iteration"] == 1 and first["accepted"] is True
    assert set(first) >= {"iteration", "eta", "gamma", "J", "J_c", "accepted", "backtracks"}
