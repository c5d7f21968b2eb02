"""
Episodic CMDP environments: the 2D PointHazard navigation task and analytic
constrained problems for exercising the optimizers in isolation.
"""
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .diffcore import Tape, backward, forward
from .errors import LayoutError, ProblemError, ProtocolError
from .utils import DTYPE

logger = logging.getLogger(__name__)

SPAWN_MARGIN = 0.2
LAYOUT_VERSION = 1


@dataclass
class CMDPSpec:
    """
    Dimensions, horizon and budget of a CMDP.

    Attributes:
        state_dim (int): n, here (x, y, vx, vy).
        action_dim (int): m.
        horizon (int): T, steps per episode.
        budget (float): d, expected cost units per episode (already prorated to T).
        action_low, action_high (np.ndarray): Per-dimension action box.
    """
    state_dim: int = 4
    action_dim: int = 2
    horizon: int = 200
    budget: float = 5.0
    action_low: np.ndarray = field(default_factory=lambda: -np.ones(2))
    action_high: np.ndarray = field(default_factory=lambda: np.ones(2))

    def __post_init__(self):
        self.action_low = np.asarray(self.action_low, dtype=DTYPE)
        self.action_high = np.asarray(self.action_high, dtype=DTYPE)
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.budget < 0:
            raise ValueError(f"budget must be >= 0, got {self.budget}")
        if self.action_low.shape != (self.action_dim,) or self.action_high.shape != (self.action_dim,):
            raise ValueError("action bounds must have one entry per action dimension")
        if not (np.all(np.isfinite(self.action_low)) and np.all(np.isfinite(self.action_high))):
            raise ValueError("action bounds must be finite")
        if np.any(self.action_low >= self.action_high):
            raise ValueError("action lower bound must be below upper bound")

    @property
    def action_center(self):
        return 0.5 * (self.action_high + self.action_low)

    @property
    def action_scale(self):
        return 0.5 * (self.action_high - self.action_low)

    def clip_action(self, action):
        return np.clip(np.asarray(action, dtype=DTYPE), self.action_low, self.action_high)


@dataclass
class Hazard:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=DTYPE)
        if self.center.shape != (2,) or self.radius <= 0:
            raise LayoutError(f"invalid hazard {self.center!r} r={self.radius}")

    def contains(self, position, margin=0.0):
        return bool(np.linalg.norm(np.asarray(position) - self.center) <= self.radius + margin)


@dataclass
class PointHazardLayout:
    """
    Goal, hazards and arena of the PointHazard task (all lengths in meters).

    The spawn region is the square of half-width `spawn_half_width` around `spawn_center`,
    minus every hazard inflated by SPAWN_MARGIN.
    """
    goal: np.ndarray
    goal_radius: float
    hazards: list
    half_width: float
    seed: int = 0
    spawn_center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    spawn_half_width: float = 0.3

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=DTYPE)
        self.spawn_center = np.asarray(self.spawn_center, dtype=DTYPE)
        self.hazards = [h if isinstance(h, Hazard) else Hazard(**h) for h in self.hazards]
        if self.half_width <= 0 or self.goal_radius <= 0 or self.spawn_half_width <= 0:
            raise LayoutError("arena half-width, goal radius and spawn half-width must be positive")
        if np.any(np.abs(self.goal) > self.half_width):
            raise LayoutError(f"goal {self.goal.tolist()} lies outside the arena")
        for hazard in self.hazards:
            if hazard.contains(self.goal):
                raise LayoutError(f"goal {self.goal.tolist()} lies inside hazard at {hazard.center.tolist()}")

    def in_hazard(self, position, margin=0.0):
        return any(h.contains(position, margin) for h in self.hazards)

    def has_safe_spawn(self, resolution=41):
        """Checks a grid over the spawn square for at least one point clear of every inflated hazard."""
        axis = np.linspace(-self.spawn_half_width, self.spawn_half_width, resolution)
        for dx in axis:
            for dy in axis:
                if not self.in_hazard(self.spawn_center + (dx, dy), SPAWN_MARGIN):
                    return True
        return False

    def to_dict(self):
        return {
            "version": LAYOUT_VERSION,
            "goal": self.goal.tolist(),
            "goal_radius": self.goal_radius,
            "hazards": [{"center": h.center.tolist(), "radius": h.radius} for h in self.hazards],
            "half_width": self.half_width,
            "seed": self.seed,
            "spawn_center": self.spawn_center.tolist(),
            "spawn_half_width": self.spawn_half_width,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        version = data.pop("version", LAYOUT_VERSION)
        if version != LAYOUT_VERSION:
            raise LayoutError(f"unsupported layout version {version}")
        try:
            return cls(**data)
        except TypeError as e:
            raise LayoutError(f"invalid layout fields: {e}") from e


def save_layout(layout, filename):
    with open(filename, "w") as f:
        json.dump(layout.to_dict(), f, indent=2)
        f.write("\n")
    logger.debug(f"Saved layout to {filename}")


def load_layout(filename):
    """
    Loads a layout file (JSON, schema in docs/formats.rst).

    Raises:
        FileNotFoundError: If the file does not exist.
        LayoutError: If the content is not a valid layout.
    """
    logger.debug(f"Loading layout from {filename}")
    try:
        with open(filename, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise LayoutError(f"layout file {filename} is not valid JSON: {e}") from e
    return PointHazardLayout.from_dict(data)


def default_layout(seed=0, n_hazards=8, hazard_radius=0.4, half_width=2.0, clearance=0.3, path_hazards=1,
                   max_tries=10000):
    """
    Samples a layout.

    The first `path_hazards` hazards sit on the straight line from the spawn center to the goal,
    just outside the spawn square inflated by the spawn margin, so a policy heading straight
    for the goal drives through them. The remaining hazards are rejection-sampled at least
    `clearance` away from that inflated square. No hazard covers the goal.
    """
    rng = np.random.default_rng(seed)
    spawn_center = np.zeros(2)
    spawn_half_width = 0.3
    keep_out = spawn_half_width * np.sqrt(2.0) + SPAWN_MARGIN
    goal_gap = hazard_radius + 0.25
    path_hazards = min(path_hazards, n_hazards)
    # nearest distance of a path hazard center to the spawn center
    path_start = hazard_radius + keep_out + 0.05
    min_goal_distance = max(1.2, path_start + goal_gap + 0.05) if path_hazards else 1.2

    tries = 0
    while True:
        tries += 1
        if tries > max_tries:
            raise LayoutError(f"could not place a goal {min_goal_distance:.2f} m from the spawn in {max_tries} tries")
        goal = rng.uniform(-half_width + 0.3, half_width - 0.3, size=2)
        if np.linalg.norm(goal - spawn_center) >= min_goal_distance:
            break

    hazards = []
    distance = np.linalg.norm(goal - spawn_center)
    heading = (goal - spawn_center) / distance
    normal = np.array([-heading[1], heading[0]])
    for _ in range(path_hazards):
        along = rng.uniform(path_start, distance - goal_gap)
        across = rng.uniform(-0.5, 0.5) * hazard_radius
        hazards.append(Hazard(spawn_center + along * heading + across * normal, hazard_radius))

    tries = 0
    while len(hazards) < n_hazards:
        tries += 1
        if tries > max_tries:
            raise LayoutError(f"could not place {n_hazards} hazards in {max_tries} tries")
        center = rng.uniform(-half_width, half_width, size=2)
        if np.linalg.norm(center - spawn_center) <= hazard_radius + keep_out + clearance:
            continue
        if np.linalg.norm(center - goal) <= hazard_radius + 0.25:
            continue
        hazards.append(Hazard(center, hazard_radius))

    return PointHazardLayout(goal=goal, goal_radius=0.3, hazards=hazards, half_width=half_width, seed=seed,
                             spawn_center=spawn_center, spawn_half_width=spawn_half_width)


@dataclass
class EnvState:
    """
    Position (m), velocity (m/s), step index and the episode RNG.

    The RNG is shared along an episode: `step` returns a new EnvState that carries the
    advanced generator.
    """
    position: np.ndarray
    velocity: np.ndarray
    step: int
    rng: np.random.Generator

    def as_vector(self):
        return np.concatenate([self.position, self.velocity])


@dataclass
class Dynamics:
    beta: float = 0.9
    dt: float = 0.1
    noise_std: float = 0.01


class PointHazardEnv:
    """
    Double-integrator point robot in a square arena with circular hazards.

    vel' = beta * vel + dt * a + noise_std * xi,  pos' = clip(pos + dt * vel', arena).
    Reward is the decrease of distance to the goal plus 1.0 inside the goal radius; cost is
    1 when the post-step position lies inside any hazard.
    """

    def __init__(self, layout, spec=None, dynamics=None):
        self.layout = layout
        self.spec = spec or CMDPSpec()
        self.dynamics = dynamics or Dynamics()
        if self.spec.state_dim != 4 or self.spec.action_dim != 2:
            raise ValueError("PointHazardEnv has 4 state and 2 action dimensions")

    def reset(self, seed):
        """
        Samples the initial state uniformly from the safe spawn region.

        Raises:
            LayoutError: If the spawn region holds no point clear of the hazards.
        """
        if not self.layout.has_safe_spawn():
            logger.error("Layout has no safe spawn point")
            raise LayoutError("layout leaves no safe spawn region")
        rng = np.random.default_rng(seed)
        hw = self.layout.spawn_half_width
        for _ in range(10000):
            position = self.layout.spawn_center + rng.uniform(-hw, hw, size=2)
            if not self.layout.in_hazard(position, SPAWN_MARGIN):
                return EnvState(position=position, velocity=np.zeros(2), step=0, rng=rng)
        raise LayoutError("rejection sampling of the spawn position failed")

    def step(self, state, action):
        """
        Advances one time step.

        Returns:
            tuple: (EnvState, reward, cost, done)

        Raises:
            ProtocolError: If the episode is already done.
        """
        if state.step >= self.spec.horizon:
            raise ProtocolError(f"episode finished after {self.spec.horizon} steps; call reset")
        action = self.spec.clip_action(action)
        d = self.dynamics
        noise = state.rng.standard_normal(2) if d.noise_std > 0 else np.zeros(2)
        velocity = d.beta * state.velocity + d.dt * action + d.noise_std * noise
        hw = self.layout.half_width
        position = np.clip(state.position + d.dt * velocity, -hw, hw)

        prev_dist = np.linalg.norm(state.position - self.layout.goal)
        new_dist = np.linalg.norm(position - self.layout.goal)
        reward = float(prev_dist - new_dist)
        if new_dist <= self.layout.goal_radius:
            reward += 1.0
        cost = 1.0 if self.layout.in_hazard(position) else 0.0

        new_state = EnvState(position=position, velocity=velocity, step=state.step + 1, rng=state.rng)
        return new_state, reward, cost, new_state.step >= self.spec.horizon


def make_env(env_config):
    """Builds the PointHazard env described by an EnvConfig."""
    if env_config.layout:
        layout = load_layout(env_config.layout)
    else:
        layout = default_layout(env_config.layout_seed, env_config.n_hazards, env_config.hazard_radius,
                                env_config.half_width)
    spec = CMDPSpec(horizon=env_config.horizon, budget=env_config.scaled_budget)
    dynamics = Dynamics(beta=env_config.beta, dt=env_config.dt, noise_std=env_config.noise_std)
    return PointHazardEnv(layout, spec, dynamics)


class TapeFunction:
    """Scalar function of one vector input, evaluated and differentiated through a tape."""

    def __init__(self, build, dim, name):
        self.tape = Tape(name=name)
        x = self.tape.input("x", (dim,))
        self.tape.mark_output(build(self.tape, x))

    def __call__(self, x):
        return float(forward(self.tape, {"x": x}))

    def gradient(self, x):
        forward(self.tape, {"x": x})
        return backward(self.tape)["x"]


class AnalyticProblem:
    """
    min f(x) s.t. g(x) <= 0 with tape-differentiable f and g.

    With `noise` > 0 the objective value and both gradients carry i.i.d. zero-mean Gaussian
    noise; the constraint value stays exact, it is the feasibility oracle.

    Attributes:
        name (str): Registered problem id.
        optimum (np.ndarray): Known constrained minimizer.
        start (np.ndarray): Strictly feasible start point.
    """

    def __init__(self, name, f, g, optimum, start, noise=0.0, seed=0):
        self.name = name
        self.f = f
        self.g = g
        self.optimum = np.asarray(optimum, dtype=DTYPE)
        self.start = np.asarray(start, dtype=DTYPE)
        self.noise = noise
        self.rng = np.random.default_rng(seed)

    def _jitter(self, size=None):
        if self.noise <= 0:
            return 0.0 if size is None else np.zeros(size)
        return self.noise * self.rng.standard_normal(size)

    def objective(self, x):
        return self.f(x) + self._jitter()

    def objective_gradient(self, x):
        return self.f.gradient(x) + self._jitter(self.start.size)

    def constraint(self, x):
        return self.g(x)

    def constraint_gradient(self, x):
        return self.g.gradient(x) + self._jitter(self.start.size)

    def reference_solution(self):
        """Constrained minimizer of the noiseless problem found by SLSQP."""
        constraint = {"type": "ineq", "fun": lambda x: -self.g(x), "jac": lambda x: -self.g.gradient(x)}
        result = minimize(self.f, self.start, jac=self.f.gradient, method="SLSQP", constraints=[constraint],
                          options={"ftol": 1e-12, "maxiter": 500})
        if not result.success:
            logger.warning(f"SLSQP did not converge on {self.name}: {result.message}")
        return result.x


def _ball_projection(tape, x):
    d = x - np.array([2.0, 0.0])
    return tape.sum(d * d)


def _unit_ball(tape, x):
    return tape.sum(x * x) - 1.0


def _linear_cut_objective(tape, x):
    d = x - 1.0
    return tape.sum(d * d)


def _linear_cut_constraint(tape, x):
    return tape.sum(x) - 1.0


def _quadratic(tape, x):
    return 0.5 * tape.sum(x * x * np.array([1.0, 3.0])) - tape.sum(x * np.array([3.0, 0.0]))


# id -> (objective builder, constraint builder, optimum, start, default noise)
PROBLEMS = {
    "ball-projection": (_ball_projection, _unit_ball, (1.0, 0.0), (0.0, 0.0), 0.0),
    "linear-cut": (_linear_cut_objective, _linear_cut_constraint, (0.5, 0.5), (0.0, 0.0), 0.0),
    "noisy-quadratic": (_quadratic, _unit_ball, (1.0, 0.0), (0.0, 0.0), 0.01),
}


def analytic_problem(problem_id, noise=None, seed=0):
    """
    Returns a registered analytic problem.

    Args:
        problem_id (str): One of PROBLEMS.
        noise (float, optional): Evaluation-noise scale; defaults to the problem's own default.
        seed (int, optional): Seed of the evaluation noise.

    Raises:
        ProblemError: Unknown id.
    """
    if problem_id not in PROBLEMS:
        raise ProblemError(f"unknown problem {problem_id!r}; choose from {sorted(PROBLEMS)}")
    f_build, g_build, optimum, start, default_noise = PROBLEMS[problem_id]
    f = TapeFunction(f_build, 2, name=f"{problem_id}/f")
    g = TapeFunction(g_build, 2, name=f"{problem_id}/g")
    return AnalyticProblem(problem_id, f, g, optimum, start, default_noise if noise is None else noise, seed)


def grid_search_optimum(problem, lo=-2.0, hi=2.0, resolution=201, refine=2):
    """
    Best feasible grid point of the noiseless problem, refined `refine` times on a 10x finer
    grid around the incumbent. A derivative-free oracle for tests.
    """
    best, best_value = None, np.inf
    center, half, n = None, None, resolution
    for _ in range(refine + 1):
        if center is None:
            axes = (np.linspace(lo, hi, n), np.linspace(lo, hi, n))
        else:
            axes = tuple(np.linspace(c - half, c + half, 41) for c in center)
        for x1 in axes[0]:
            for x2 in axes[1]:
                x = np.array([x1, x2])
                if problem.g(x) > 0:
                    continue
                value = problem.f(x)
                if value < best_value:
                    best, best_value = x, value
        spacing = axes[0][1] - axes[0][0]
        center, half = best, 2.0 * spacing
    return best
