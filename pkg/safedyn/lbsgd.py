"""
Log-barrier stochastic gradient ascent with a feasibility-preserving step size, and an
augmented-Lagrangian baseline that tolerates infeasible iterates.

Both optimizers maximize an objective J subject to J_c <= 0 over a flat parameter vector.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .config import BarrierConfig, LagrangianConfig
from .envs import analytic_problem
from .errors import InfeasibleIterate
from .utils import DTYPE

logger = logging.getLogger(__name__)


@dataclass
class LedgerEntry:
    """
    One optimizer step.

    For the barrier optimizer J_c is the constraint at the iterate the step ended on, so a
    feasible run only ever records J_c < 0. The Lagrangian baseline records J_c at entry.
    """
    iteration: int
    eta: float
    gamma: float
    J: Optional[float]
    J_c: float
    accepted: bool
    backtracks: int = 0
    multiplier: Optional[float] = None
    penalty: Optional[float] = None


def export_ledger(entries, filename):
    """Writes ledger entries as JSON lines."""
    with open(filename, "w") as f:
        for entry in entries:
            f.write(json.dumps(asdict(entry), sort_keys=True) + "\n")
    logger.debug(f"Wrote {len(entries)} ledger entries to {filename}")


@dataclass
class BarrierOptState:
    """
    State of the log-barrier optimizer.

    Attributes:
        eta (float): Barrier coefficient, > 0 and non-increasing.
        curvature (float): Running estimate M2 of the constraint gradient's Lipschitz constant.
        ledger (list): LedgerEntry per step.
    """
    eta: float = 0.1
    eta_decay: float = 0.97
    eta_min: float = 1e-3
    learning_rate: float = 0.05
    curvature: float = 1.0
    curvature_ema: float = 0.9
    max_backtracks: int = 10
    iteration: int = 0
    ledger: list = field(default_factory=list)
    prev_params: Optional[np.ndarray] = None
    prev_grad_c: Optional[np.ndarray] = None

    @classmethod
    def from_config(cls, config=None):
        config = config or BarrierConfig()
        return cls(eta=config.eta0, eta_decay=config.eta_decay, eta_min=config.eta_min,
                   learning_rate=config.learning_rate, curvature=config.curvature_init,
                   curvature_ema=config.curvature_ema, max_backtracks=config.max_backtracks)

    def violations(self):
        return sum(1 for e in self.ledger if not e.J_c < 0)

    def export_ledger(self, filename):
        export_ledger(self.ledger, filename)


def _require_feasible(J_c):
    if not J_c < 0:
        logger.error(f"Constraint value {J_c} is not strictly negative")
        raise InfeasibleIterate(J_c)


def barrier_value(J, J_c, eta):
    """B = J - eta * log(-J_c); raises InfeasibleIterate for J_c >= 0."""
    _require_feasible(J_c)
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    return J - eta * np.log(-J_c)


def barrier_gradient(gJ, gJ_c, J_c, eta):
    """g = gJ + eta * gJ_c / (-J_c), elementwise; raises InfeasibleIterate for J_c >= 0."""
    _require_feasible(J_c)
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    return np.asarray(gJ, dtype=DTYPE) + eta * np.asarray(gJ_c, dtype=DTYPE) / (-J_c)


def step_size(direction, gJ_c, J_c, curvature, learning_rate):
    """
    Step multiplier for params + gamma * direction.

    The step length along the unit direction is capped at
    alpha = (-J_c) / (2 * (|<gJ_c, u>| + M2 * (-J_c))), so the predicted change of J_c is at
    most half the distance to the boundary; gamma = min(learning_rate, alpha / |direction|).
    """
    norm = np.linalg.norm(direction)
    if norm == 0:
        return learning_rate
    distance = -J_c
    denom = 2.0 * (abs(float(np.dot(gJ_c, direction / norm))) + curvature * distance)
    if denom == 0:
        return learning_rate
    return min(learning_rate, distance / denom / norm)


def _update_curvature(params, gJ_c, state):
    if state.prev_params is not None:
        moved = np.linalg.norm(params - state.prev_params)
        if moved > 0:
            ratio = np.linalg.norm(gJ_c - state.prev_grad_c) / moved
            state.curvature = state.curvature_ema * state.curvature + (1.0 - state.curvature_ema) * ratio
    state.prev_params = params.copy()
    state.prev_grad_c = np.array(gJ_c, dtype=DTYPE)


def lbsgd_step(params, gJ, gJ_c, J_c, state, constraint_fn, J=None):
    """
    One feasibility-preserving barrier ascent step.

    Args:
        params (np.ndarray): Current flat parameters, strictly feasible.
        gJ (np.ndarray): Gradient of the objective.
        gJ_c (np.ndarray): Gradient of the constraint.
        J_c (float): Constraint value at `params`, must be < 0.
        state (BarrierOptState): Optimizer state, updated in place.
        constraint_fn (callable): Exact (model-evaluated) constraint at candidate parameters.
        J (float, optional): Objective value, recorded in the ledger.

    Returns:
        tuple: (params', state). params' is params itself when every backtracking attempt failed.

    Raises:
        InfeasibleIterate: If J_c >= 0 on entry.
    """
    _require_feasible(J_c)
    params = np.asarray(params, dtype=DTYPE)
    gJ = np.asarray(gJ, dtype=DTYPE)
    gJ_c = np.asarray(gJ_c, dtype=DTYPE)
    # ascent on J + eta * log(-J_c)
    direction = -barrier_gradient(-gJ, gJ_c, J_c, state.eta)
    _update_curvature(params, gJ_c, state)
    gamma = step_size(direction, gJ_c, J_c, state.curvature, state.learning_rate)

    state.iteration += 1
    for backtracks in range(state.max_backtracks + 1):
        candidate = params + gamma * direction
        value = constraint_fn(candidate)
        if value < 0:
            state.ledger.append(LedgerEntry(state.iteration, state.eta, gamma, J, float(value), True, backtracks))
            if backtracks:
                logger.debug(f"Step {state.iteration} accepted after {backtracks} backtracks (gamma={gamma:.3g})")
            return candidate, state
        gamma *= 0.5

    logger.warning(f"Step {state.iteration} rejected after {state.max_backtracks} backtracks")
    state.ledger.append(LedgerEntry(state.iteration, state.eta, 0.0, J, float(J_c), False, state.max_backtracks))
    return params, state


def decay_eta(state):
    """eta <- max(eta_min, eta * decay)."""
    state.eta = max(state.eta_min, state.eta * state.eta_decay)
    return state


@dataclass
class LagrangianOptState:
    """
    State of the augmented-Lagrangian baseline.

    Attributes:
        multiplier (float): lambda >= 0.
        penalty (float): mu > 0, non-decreasing.
        streak (int): Consecutive steps with J_c > 0.
    """
    multiplier: float = 0.0
    penalty: float = 1.0
    multiplier_lr: float = 0.05
    penalty_growth: float = 1.5
    penalty_max: float = 1e4
    learning_rate: float = 0.05
    patience: int = 2
    streak: int = 0
    iteration: int = 0
    ledger: list = field(default_factory=list)

    @classmethod
    def from_config(cls, config=None):
        config = config or LagrangianConfig()
        return cls(multiplier=config.multiplier0, penalty=config.penalty0, multiplier_lr=config.multiplier_lr,
                   penalty_growth=config.penalty_growth, penalty_max=config.penalty_max,
                   learning_rate=config.learning_rate, patience=config.patience)

    def export_ledger(self, filename):
        export_ledger(self.ledger, filename)


def lagrangian_step(params, gJ, gJ_c, J_c, state, J=None):
    """
    Ascent on J - lambda * J_c - (mu / 2) * max(0, J_c)^2, then the projected dual update
    lambda <- max(0, lambda + lr * J_c). mu grows after `patience` consecutive violations.
    """
    params = np.asarray(params, dtype=DTYPE)
    weight = state.multiplier + state.penalty * max(0.0, J_c)
    new_params = params + state.learning_rate * (np.asarray(gJ, dtype=DTYPE) - weight * np.asarray(gJ_c, dtype=DTYPE))

    state.iteration += 1
    state.ledger.append(LedgerEntry(state.iteration, 0.0, state.learning_rate, J, float(J_c), True,
                                    multiplier=state.multiplier, penalty=state.penalty))
    state.multiplier = max(0.0, state.multiplier + state.multiplier_lr * J_c)
    state.streak = state.streak + 1 if J_c > 0 else 0
    if state.streak >= state.patience:
        state.penalty = min(state.penalty_max, state.penalty * state.penalty_growth)
        state.streak = 0
        logger.debug(f"Penalty raised to {state.penalty:.4g}")
    return new_params, state


@dataclass
class BenchResult:
    """
    Optimizer-only run on an analytic problem.

    Attributes:
        final (np.ndarray): Last iterate.
        error (float): Distance of the last iterate to the known optimum.
        violations (int): Iterates with g(x) >= 0 under the exact constraint.
        ledger (list): Per-step LedgerEntry records.
    """
    problem: str
    optimizer: str
    final: np.ndarray
    error: float
    violations: int
    iterations: int
    ledger: list

    def summary(self):
        return {"problem": self.problem, "optimizer": self.optimizer, "final": self.final.tolist(),
                "error": self.error, "violations": self.violations, "iterations": self.iterations}


def bench_optimizer(problem_id, optimizer="lbsgd", iterations=500, noise=None, seed=0, barrier=None,
                    lagrangian=None):
    """
    Runs one optimizer on a registered analytic problem (maximizing -f subject to g <= 0).

    The barrier coefficient decays once per iteration.

    Raises:
        ProblemError: Unknown problem id.
        ValueError: Unknown optimizer.
    """
    problem = analytic_problem(problem_id, noise=noise, seed=seed)
    x = problem.start.copy()
    violations = 0

    if optimizer == "lbsgd":
        state = BarrierOptState.from_config(barrier)
        for _ in range(iterations):
            J_c = problem.constraint(x)
            x, state = lbsgd_step(x, -problem.objective_gradient(x), problem.constraint_gradient(x), J_c, state,
                                  problem.constraint, J=-problem.objective(x))
            decay_eta(state)
        violations = state.violations()
    elif optimizer == "lagrangian":
        state = LagrangianOptState.from_config(lagrangian)
        for _ in range(iterations):
            J_c = problem.constraint(x)
            x, state = lagrangian_step(x, -problem.objective_gradient(x), problem.constraint_gradient(x), J_c, state,
                                       J=-problem.objective(x))
            if problem.constraint(x) >= 0:
                violations += 1
    else:
        raise ValueError(f"unknown optimizer {optimizer!r}")

    error = float(np.linalg.norm(x - problem.optimum))
    logger.info(f"{optimizer} on {problem_id}: final {np.round(x, 4).tolist()}, error {error:.2e}, "
                f"{violations} infeasible iterates")
    return BenchResult(problem_id, optimizer, x, error, violations, iterations, state.ledger)
