import numpy as np
import pytest

from safedyn.envs import (CMDPSpec, Dynamics, EnvState, Hazard, PointHazardEnv, PointHazardLayout, analytic_problem,
                          default_layout, grid_search_optimum, load_layout, save_layout, SPAWN_MARGIN)
from safedyn.errors import LayoutError, ProblemError, ProtocolError


def _open_layout(**kwargs):
    return PointHazardLayout(goal=np.array([1.5, 1.5]), goal_radius=0.3, hazards=[], half_width=2.0, **kwargs)


def test_spec_validation():
    with pytest.raises(ValueError):
        CMDPSpec(horizon=0)
    with pytest.raises(ValueError):
        CMDPSpec(budget=-1.0)
    with pytest.raises(ValueError):
        CMDPSpec(action_low=np.array([1.0, -1.0]), action_high=np.array([1.0, 1.0]))
    spec = CMDPSpec()
    assert np.array_equal(spec.clip_action([3.0, -3.0]), [1.0, -1.0])


def test_layout_rejects_goal_inside_hazard():
    with pytest.raises(LayoutError):
        PointHazardLayout(goal=np.zeros(2), goal_radius=0.3, hazards=[Hazard(np.zeros(2), 0.5)], half_width=2.0)
    with pytest.raises(LayoutError):
        PointHazardLayout(goal=np.array([3.0, 0.0]), goal_radius=0.3, hazards=[], half_width=2.0)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_default_layout_has_safe_spawn(seed):
    layout = default_layout(seed)
    assert len(layout.hazards) == 8
    assert layout.has_safe_spawn()
    assert not layout.in_hazard(layout.goal)
    assert np.linalg.norm(layout.goal) >= 1.2


def test_layout_round_trip(tmp_path):
    layout = default_layout(7)
    path = tmp_path / "layout.json"
    save_layout(layout, path)
    loaded = load_layout(path)
    assert np.array_equal(loaded.goal, layout.goal)
    assert [h.center.tolist() for h in loaded.hazards] == [h.center.tolist() for h in layout.hazards]


def test_reset_without_safe_spawn_raises():
    layout = _open_layout()
    layout.hazards = [Hazard(np.zeros(2), 1.0)]
    env = PointHazardEnv(layout)
    with pytest.raises(LayoutError):
        env.reset(0)


def test_reset_is_deterministic_and_clear_of_hazards():
    env = PointHazardEnv(default_layout(0))
    a, b = env.reset(11), env.reset(11)
    assert np.array_equal(a.position, b.position)
    assert not env.layout.in_hazard(a.position, SPAWN_MARGIN)
    assert np.array_equal(a.velocity, np.zeros(2))
    assert a.step == 0


def test_zero_action_is_stationary_without_noise():
    env = PointHazardEnv(default_layout(0), CMDPSpec(horizon=30), Dynamics(noise_std=0.0))
    state = env.reset(3)
    start = state.position.copy()
    total_cost = 0.0
    for _ in range(30):
        state, reward, cost, done = env.step(state, np.zeros(2))
        assert reward == 0.0
        total_cost += cost
    assert done
    assert np.array_equal(state.position, start)
    assert total_cost == 0.0


def test_step_past_horizon_raises():
    env = PointHazardEnv(_open_layout(), CMDPSpec(horizon=2))
    state = env.reset(0)
    state, *_ = env.step(state, np.zeros(2))
    state, _, _, done = env.step(state, np.zeros(2))
    assert done
    with pytest.raises(ProtocolError):
        env.step(state, np.zeros(2))


def test_position_stays_in_arena_and_actions_are_clipped():
    env = PointHazardEnv(_open_layout(), CMDPSpec(horizon=200), Dynamics(beta=1.0, noise_std=0.0))
    state = env.reset(0)
    for _ in range(200):
        state, *_ = env.step(state, np.array([50.0, 0.0]))
    assert state.position[0] == pytest.approx(2.0)
    # clipped to 1.0 per step, undamped: v = 0.1 * steps
    assert state.velocity[0] == pytest.approx(0.1 * 200)


def test_goal_bonus_and_distance_reward():
    layout = _open_layout(spawn_center=np.array([1.5, 1.25]), spawn_half_width=0.01)
    env = PointHazardEnv(layout, CMDPSpec(horizon=5), Dynamics(beta=0.0, noise_std=0.0))
    state = env.reset(0)
    before = np.linalg.norm(state.position - layout.goal)
    state, reward, cost, _ = env.step(state, np.array([0.0, 1.0]))
    after = np.linalg.norm(state.position - layout.goal)
    assert after <= layout.goal_radius
    assert reward == pytest.approx(before - after + 1.0)
    assert cost == 0.0


def test_cost_counts_steps_inside_hazard_band():
    hazard = Hazard(np.array([0.9, 0.0]), 0.3)
    layout = PointHazardLayout(goal=np.array([1.8, 1.8]), goal_radius=0.1, hazards=[hazard], half_width=2.0,
                               spawn_half_width=0.05)
    env = PointHazardEnv(layout, CMDPSpec(horizon=200), Dynamics(beta=0.0, noise_std=0.0))
    state = env.reset(5)
    x0, y0 = state.position
    costs = 0.0
    for _ in range(200):
        state, _, cost, _ = env.step(state, np.array([1.0, 0.0]))
        costs += cost
    # beta = 0: every step moves dt * dt * a = 0.01 m to the right
    xs = x0 + 0.01 * np.arange(1, 201)
    inside = np.hypot(xs - 0.9, y0) <= 0.3
    assert costs == inside.sum()
    assert costs > 0


@pytest.mark.parametrize("problem_id", ["ball-projection", "linear-cut", "noisy-quadratic"])
def test_analytic_problems_know_their_optimum(problem_id):
    problem = analytic_problem(problem_id, noise=0.0)
    assert problem.constraint(problem.start) < 0
    assert np.allclose(problem.reference_solution(), problem.optimum, atol=1e-4)
    assert np.allclose(grid_search_optimum(problem), problem.optimum, atol=1e-2)


def test_analytic_gradients_and_noise():
    problem = analytic_problem("ball-projection")
    x = np.array([0.3, -0.2])
    assert np.allclose(problem.objective_gradient(x), 2 * (x - [2.0, 0.0]))
    assert np.allclose(problem.constraint_gradient(x), 2 * x)
    noisy = analytic_problem("ball-projection", noise=0.1, seed=1)
    assert noisy.constraint(x) == problem.constraint(x)
    assert not np.allclose(noisy.objective_gradient(x), problem.objective_gradient(x))


def test_unknown_problem():
    with pytest.raises(ProblemError):
        analytic_problem("no-such-problem")


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_default_layout_puts_a_hazard_on_the_straight_path(seed):
    layout = default_layout(seed)
    length = np.linalg.norm(layout.goal - layout.spawn_center)
    heading = (layout.goal - layout.spawn_center) / length

    def distance_to_path(center):
        along = np.clip((center - layout.spawn_center) @ heading, 0.0, length)
        return np.linalg.norm(layout.spawn_center + along * heading - center)

    assert any(distance_to_path(h.center) < h.radius for h in layout.hazards)
    hw = layout.spawn_half_width
    for corner in ([hw, hw], [hw, -hw], [-hw, hw], [-hw, -hw], [0.0, 0.0]):
        assert not layout.in_hazard(layout.spawn_center + np.array(corner), SPAWN_MARGIN)


def test_step_from_rest():
    env = PointHazardEnv(_open_layout(), CMDPSpec(horizon=5), Dynamics(beta=0.9, dt=0.1, noise_std=0.0))
    state = EnvState(position=np.zeros(2), velocity=np.zeros(2), step=0, rng=np.random.default_rng(0))
    state, _, cost, done = env.step(state, np.array([1.0, 0.0]))
    assert np.allclose(state.velocity, [0.1, 0.0])
    assert np.allclose(state.position, [0.01, 0.0])
    assert state.step == 1
    assert cost == 0.0
    assert not done


def test_reward_telescopes_without_goal_bonus():
    layout = _open_layout()
    env = PointHazardEnv(layout, CMDPSpec(horizon=60), Dynamics(noise_std=0.0))
    rng = np.random.default_rng(4)
    state = env.reset(2)
    start = np.linalg.norm(state.position - layout.goal)
    total = 0.0
    done = False
    while not done:
        state, reward, _, done = env.step(state, rng.uniform(-1.0, 1.0, size=2))
        assert np.linalg.norm(state.position - layout.goal) > layout.goal_radius
        total += reward
    assert total == pytest.approx(start - np.linalg.norm(state.position - layout.goal), abs=1e-9)
