"""
Policy evaluation under the set of plausible models.

Every ensemble member is rolled out in imagination from the same start states with the same
frozen noise. The constraint is evaluated pessimistically (max over members), the objective
as the ensemble mean, and gradients come from backpropagation through the rollout tapes.
"""
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .diffcore import Tape, backward, forward
from .ensemble import member_transition
from .errors import EvaluationError, InfeasibleIterate
from .utils import DTYPE

logger = logging.getLogger(__name__)


@dataclass
class ImaginedBatch:
    """
    Start states and frozen noise of one imagination minibatch.

    Attributes:
        initial_states (np.ndarray): (B, n) states drawn from the replay buffer.
        horizon (int): Rollout length H.
        state_noise (np.ndarray): (B, H, n) standard normal draws for the model transitions.
        action_noise (np.ndarray): (B, H, m) standard normal draws for the policy.
    """
    initial_states: np.ndarray
    horizon: int
    state_noise: np.ndarray
    action_noise: np.ndarray

    def __post_init__(self):
        self.initial_states = np.atleast_2d(np.asarray(self.initial_states, dtype=DTYPE))
        b, n = self.initial_states.shape
        if self.horizon < 1 or b < 1:
            raise ValueError(f"imagination batch needs H >= 1 and B >= 1, got H={self.horizon}, B={b}")
        if self.state_noise.shape != (b, self.horizon, n):
            raise ValueError(f"state noise shape {self.state_noise.shape} != {(b, self.horizon, n)}")
        if self.action_noise.shape[:2] != (b, self.horizon):
            raise ValueError(f"action noise shape {self.action_noise.shape} does not match B={b}, H={self.horizon}")

    @property
    def size(self):
        return len(self.initial_states)

    @classmethod
    def sample(cls, buffer, batch_size, horizon, action_dim, rng):
        states = buffer.sample_states(batch_size, rng)
        return cls(states, horizon,
                   rng.standard_normal((batch_size, horizon, buffer.state_dim)),
                   rng.standard_normal((batch_size, horizon, action_dim)))


def prorated_budget(budget, horizon, episode_horizon):
    """Share d * H / T of the episode budget d allotted to an imagination horizon H."""
    return budget * horizon / episode_horizon


def build_rollout_tape(policy, member, batch):
    """
    Records an H-step imagined rollout of `policy` under `member`.

    Policy parameters are the only tape inputs; start states, noise and member weights are
    constants. Outputs: "reward" (mean over the batch of the summed predicted rewards) and
    "cost" (same for the expected costs). `tape.meta["steps"]` holds the per-step next-state nodes.
    """
    tape = Tape(name="rollout")
    w = policy.input_nodes(tape)
    member_weights = {name: tape.const(value) for name, value in member.weights.items()}
    s = tape.const(batch.initial_states)
    rewards, costs, steps = [], [], []
    for t in range(batch.horizon):
        a = policy.action_graph(tape, w, s, tape.const(batch.action_noise[:, t, :]))
        out = member_transition(tape, member, s, a, tape.const(batch.state_noise[:, t, :]), member_weights)
        rewards.append(tape.sum(out.reward))
        costs.append(tape.sum(out.cost))
        steps.append(out.next_state)
        s = out.next_state
    inv_b = 1.0 / batch.size
    total_r, total_c = rewards[0], costs[0]
    for r, c in zip(rewards[1:], costs[1:]):
        total_r = total_r + r
        total_c = total_c + c
    tape.mark_output(total_r * inv_b, "reward")
    tape.mark_output(total_c * inv_b, "cost")
    tape.meta["steps"] = steps
    logger.debug(f"Rollout tape with {len(tape)} nodes (H={batch.horizon}, B={batch.size})")
    return tape


def _check_finite(tape, member_index):
    for t, node in enumerate(tape.meta["steps"]):
        if not np.all(np.isfinite(node.value)):
            logger.error(f"Non-finite imagined state at step {t} of member {member_index}")
            raise EvaluationError("non-finite imagined state", step=t, member=member_index)
    for name in ("reward", "cost"):
        if not np.isfinite(tape.value(name)):
            raise EvaluationError(f"non-finite imagined {name}", step=len(tape.meta["steps"]) - 1,
                                  member=member_index)


def imagine_rollout(policy, member, batch, member_index=None):
    """
    Imagined return and cost of the policy under one member.

    Returns:
        tuple: (J, J_c, tape) with the tape evaluated at the current policy parameters.

    Raises:
        EvaluationError: A non-finite intermediate value; carries the step index.
    """
    tape = build_rollout_tape(policy, member, batch)
    forward(tape, policy.bindings())
    _check_finite(tape, member_index)
    return float(tape.value("reward")), float(tape.value("cost")), tape


@dataclass
class PessimisticEstimate:
    """
    Per-member evaluations of one policy on one imagination batch.

    Attributes:
        member_costs (np.ndarray): Budget-shifted J^c of every member.
        member_rewards (np.ndarray): J of every member.
        argmax (int): Index of the worst-case member (lowest index on ties).
        reward (float): Objective estimate J, the ensemble mean of member_rewards.
        tapes (list): Evaluated rollout tape of every member.
        params (np.ndarray): Flat policy parameters the tapes were evaluated at.
        layout (ParamLayout): Policy parameter layout, unflattens `params` into tape bindings.
        budget (float): Shift subtracted from the imagined costs.
    """
    member_costs: np.ndarray
    member_rewards: np.ndarray
    argmax: int
    reward: float
    tapes: list
    params: np.ndarray
    layout: object
    budget: float = 0.0
    _grads: tuple = field(default=None, repr=False)

    @property
    def constraint(self):
        """J_P^c, the worst-case member's budget-shifted cost."""
        return float(self.member_costs[self.argmax])

    def _bindings(self, flat):
        return self.layout.unflatten(flat)

    def gradients(self):
        """
        Flat gradients (grad J, grad J_P^c) at `params`.

        grad J averages the members' reward gradients; grad J_P^c is the gradient of the
        argmax member's cost tape.
        """
        if self._grads is None:
            bindings = self._bindings(self.params)
            grad_j = np.zeros_like(self.params)
            for tape in self.tapes:
                forward(tape, bindings)
                grad_j += self.layout.flatten(backward(tape, "reward"))
            grad_j /= len(self.tapes)
            worst = self.tapes[self.argmax]
            forward(worst, bindings)
            grad_c = self.layout.flatten(backward(worst, "cost"))
            self._grads = (grad_j, grad_c)
        return self._grads

    def constraint_at(self, flat):
        """Model-evaluated J_P^c at other policy parameters, on the same batch and noise."""
        bindings = self._bindings(flat)
        values = []
        for tape in self.tapes:
            forward(tape, bindings)
            values.append(float(tape.value("cost")))
        value = max(values) - self.budget
        return value if np.isfinite(value) else np.inf


def pessimistic_eval(policy, ensemble, batch, budget=0.0):
    """
    Evaluates the policy under every member with shared frozen noise.

    Args:
        policy (Policy): Current policy.
        ensemble (EnsembleModel): Plausible models.
        batch (ImaginedBatch): Start states and frozen noise.
        budget (float, optional): Budget share subtracted from each member's imagined cost.

    Returns:
        PessimisticEstimate: J_P^c = max_i J^c_i, J = mean_i J_i.

    Raises:
        ValueError: Empty ensemble.
    """
    if ensemble is None or len(ensemble) == 0:
        raise ValueError("pessimistic evaluation needs at least one ensemble member")
    rewards, costs, tapes = [], [], []
    for i, member in enumerate(ensemble.members):
        j, jc, tape = imagine_rollout(policy, member, batch, member_index=i)
        rewards.append(j)
        costs.append(jc - budget)
        tapes.append(tape)
    costs = np.asarray(costs, dtype=DTYPE)
    rewards = np.asarray(rewards, dtype=DTYPE)
    argmax = int(np.argmax(costs))
    logger.debug(f"Member costs {np.round(costs, 4).tolist()}, worst member {argmax}")
    return PessimisticEstimate(member_costs=costs, member_rewards=rewards, argmax=argmax,
                               reward=float(rewards.mean()), tapes=tapes, params=policy.params.copy(),
                               layout=policy.layout, budget=budget)


class BarrierTerms(NamedTuple):
    J: float
    J_c: float
    grad_J: np.ndarray
    grad_J_c: np.ndarray


def barrier_terms(policy, ensemble, batch, eta, budget=0.0, estimate=None):
    """
    Objective, pessimistic constraint and their gradients for one barrier step.

    Raises:
        InfeasibleIterate: If J_P^c >= 0; never clipped.
        ValueError: If eta <= 0.
    """
    if eta <= 0:
        raise ValueError(f"barrier coefficient must be positive, got {eta}")
    if estimate is None:
        estimate = pessimistic_eval(policy, ensemble, batch, budget)
    if estimate.constraint >= 0:
        logger.error(f"Pessimistic constraint {estimate.constraint:.4g} is not strictly feasible")
        raise InfeasibleIterate(estimate.constraint)
    grad_j, grad_c = estimate.gradients()
    return BarrierTerms(estimate.reward, estimate.constraint, grad_j, grad_c)
