"""
The policy, real-environment episodes and the training loop
(collect, fit the ensemble, pessimistic policy improvement, evaluate).
"""
import logging
import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import CheckpointManager
from .config import config_hash, to_dict
from .diffcore import Tape, forward
from .ensemble import ReplayBuffer, fit
from .envs import make_env
from .errors import EvaluationError, InfeasibleIterate, TrainingError
from .lbsgd import BarrierOptState, LagrangianOptState, decay_eta, lagrangian_step, lbsgd_step
from .metrics import EpochRecord, RunHeader, RunMetrics
from .pessimism import ImaginedBatch, barrier_terms, pessimistic_eval, prorated_budget
from .utils import DTYPE, ParamLayout, seed_streams

logger = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
PREFIX = "policy/"


class Policy:
    """
    Tanh-squashed Gaussian policy on a two-layer tanh network.

    a = center + scale * tanh(mean(s) + exp(clip(log_std(s), -5, 1)) * eps)

    The output heads start at zero weights, so the initial policy has zero pre-squash mean and
    log-std `init_log_std` everywhere.

    Attributes:
        spec (CMDPSpec): Dimensions and action bounds.
        layout (ParamLayout): Named parameter shapes, names prefixed with "policy/".
        params (np.ndarray): Flat parameter vector.
    """

    def __init__(self, spec, hidden=32, init_log_std=-1.0, seed=0):
        self.spec = spec
        self.hidden = hidden
        n, m, h = spec.state_dim, spec.action_dim, hidden
        shapes = {"W0": (n, h), "b0": (h,), "W1": (h, h), "b1": (h,),
                  "Wm": (h, m), "bm": (m,), "Ws": (h, m), "bs": (m,)}
        self.layout = ParamLayout({PREFIX + k: v for k, v in shapes.items()})
        rng = np.random.default_rng(seed)
        weights = {
            PREFIX + "W0": rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, h)),
            PREFIX + "b0": np.zeros(h),
            PREFIX + "W1": rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, h)),
            PREFIX + "b1": np.zeros(h),
            PREFIX + "Wm": np.zeros((h, m)),
            PREFIX + "bm": np.zeros(m),
            PREFIX + "Ws": np.zeros((h, m)),
            PREFIX + "bs": np.full(m, init_log_std),
        }
        self.params = self.layout.flatten(weights)
        self._act_tape = None

    def bindings(self, params=None):
        return self.layout.unflatten(self.params if params is None else params)

    def input_nodes(self, tape):
        """Registers the parameters as tape inputs; returns short name -> node."""
        return {name[len(PREFIX):]: tape.input(name, shape) for name, shape in self.layout.shapes.items()}

    def action_graph(self, tape, w, s, eps):
        """Squashed reparameterized action for a batch of states (B, n) and noise (B, m)."""
        h0 = tape.tanh(tape.affine(s, w["W0"], w["b0"]))
        h1 = tape.tanh(tape.affine(h0, w["W1"], w["b1"]))
        mean = tape.affine(h1, w["Wm"], w["bm"])
        log_std = tape.clip(tape.affine(h1, w["Ws"], w["bs"]), LOG_STD_MIN, LOG_STD_MAX)
        pre = mean + tape.exp(log_std) * eps
        return tape.tanh(pre) * self.spec.action_scale + self.spec.action_center

    def _tape(self):
        if self._act_tape is None:
            tape = Tape(name="act")
            w = self.input_nodes(tape)
            s = tape.input("state", (1, self.spec.state_dim))
            eps = tape.input("eps", (1, self.spec.action_dim))
            tape.mark_output(self.action_graph(tape, w, s, eps), "action")
            self._act_tape = tape
        return self._act_tape

    def state_dict(self):
        return {"params": self.params.copy(), "hidden": self.hidden, "layout": dict(self.layout.shapes)}

    def load_state_dict(self, state):
        params = np.asarray(state["params"], dtype=DTYPE)
        if params.shape != (self.layout.size,):
            raise ValueError(f"policy parameters of size {params.size} do not fit layout of size {self.layout.size}")
        self.params = params.copy()


def act(policy, state, mode="stochastic", rng=None):
    """
    Action for one state.

    Args:
        policy (Policy): The policy.
        state (np.ndarray): State vector (n,).
        mode (str): "stochastic" samples eps ~ N(0, I) from `rng`; "mean" uses eps = 0.
        rng (np.random.Generator): Required in stochastic mode.

    Returns:
        np.ndarray: Action within the spec's bounds.

    Raises:
        ValueError: Non-finite state, unknown mode, or a stochastic call without rng.
    """
    state = np.asarray(state, dtype=DTYPE)
    if not np.all(np.isfinite(state)):
        raise ValueError(f"act called with non-finite state {state.tolist()}")
    if mode == "mean":
        eps = np.zeros((1, policy.spec.action_dim))
    elif mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic mode needs an rng")
        eps = rng.standard_normal((1, policy.spec.action_dim))
    else:
        raise ValueError(f"unknown action mode {mode!r}")
    bindings = policy.bindings()
    bindings.update(state=state.reshape(1, -1), eps=eps)
    tape = policy._tape()
    forward(tape, bindings)
    return policy.spec.clip_action(tape.value("action")[0])


@dataclass
class Trajectory:
    """
    One fixed-horizon episode.

    Attributes:
        states (np.ndarray): (T, n) states s_0..s_{T-1}.
        actions (np.ndarray): (T, m).
        rewards (np.ndarray): (T,).
        costs (np.ndarray): (T,) in {0, 1}.
        next_states (np.ndarray): (T, n), s_1..s_T.
        seed (int): Reset seed of the episode.
    """
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    seed: int

    def __len__(self):
        return len(self.rewards)

    @property
    def terminal_state(self):
        return self.next_states[-1]

    @property
    def total_reward(self):
        return float(self.rewards.sum())

    @property
    def total_cost(self):
        return float(self.costs.sum())

    def transitions(self):
        return self.states, self.actions, self.next_states, self.rewards, self.costs


def collect_episode(policy, env, rng, mode="stochastic"):
    """Runs one full episode; the reset seed and the action noise come from `rng`."""
    seed = int(rng.integers(2 ** 31))
    state = env.reset(seed)
    states, actions, rewards, costs, next_states = [], [], [], [], []
    done = False
    while not done:
        s = state.as_vector()
        a = act(policy, s, mode, rng)
        state, reward, cost, done = env.step(state, a)
        states.append(s)
        actions.append(a)
        rewards.append(reward)
        costs.append(cost)
        next_states.append(state.as_vector())
    return Trajectory(np.array(states), np.array(actions), np.array(rewards), np.array(costs),
                      np.array(next_states), seed)


def evaluate(policy, env, n_episodes=10, rng=None):
    """
    Mean episode return and cost over `n_episodes` mean-mode episodes.

    Returns:
        tuple: (J_hat, Jc_hat)
    """
    if n_episodes < 1:
        raise ValueError(f"n_episodes must be >= 1, got {n_episodes}")
    rng = rng if rng is not None else np.random.default_rng(0)
    returns, costs = [], []
    for _ in range(n_episodes):
        traj = collect_episode(policy, env, rng, mode="mean")
        returns.append(traj.total_reward)
        costs.append(traj.total_cost)
    return float(np.mean(returns)), float(np.mean(costs))


def _checkpoint_payload(config, policy, ensemble, J_hat, Jc_hat):
    return {"config": to_dict(config), "policy": policy.state_dict(), "ensemble": ensemble,
            "J_hat": J_hat, "Jc_hat": Jc_hat}


def train(config, env=None, sink=None, checkpoint_dir=None, ledger_path=None):
    """
    Full learning loop.

    Epoch 1 only collects data with the initial policy and fits the ensemble; later epochs also
    run `updates_per_epoch` policy updates on fresh imagination minibatches.

    Args:
        config (TrainConfig): Run configuration.
        env (PointHazardEnv, optional): Environment; built from config.env when omitted.
        sink (MetricsWriter, optional): Receives the header and every epoch record.
        checkpoint_dir (str, optional): Where to write end-of-epoch checkpoints.
        ledger_path (str, optional): Where to write the optimizer ledger (JSON lines).

    Returns:
        RunMetrics: All epoch records. An infeasible iterate, a model-fit failure or a non-finite
                    imagined rollout ends the run with a record flagged `aborted`.
    """
    env = env or make_env(config.env)
    spec = env.spec
    streams = seed_streams(config.seed, ["policy", "env", "model", "imagine", "eval"])
    policy = Policy(spec, config.policy.hidden, config.policy.init_log_std,
                    seed=int(streams["policy"].integers(2 ** 31)))
    buffer = ReplayBuffer(spec.state_dim, spec.action_dim, config.buffer_capacity)
    budget_share = prorated_budget(spec.budget, config.horizon, spec.horizon)
    if config.optimizer == "lbsgd":
        opt = BarrierOptState.from_config(config.barrier)
    else:
        opt = LagrangianOptState.from_config(config.lagrangian)

    header = RunHeader(config_hash(config), config.seed, config.optimizer, time.time(), spec.budget)
    metrics = RunMetrics(header)
    if sink is not None:
        sink.write_header(header)
    checkpoints = CheckpointManager(checkpoint_dir) if checkpoint_dir else None
    logger.info(f"Training {config.optimizer} for {config.epochs} epochs, seed {config.seed}, "
                f"budget {spec.budget:.3g} per episode ({budget_share:.3g} per imagined rollout)")

    ensemble = None
    env_steps = 0
    accumulated = 0.0
    episodes = 0
    exceeded = 0
    violations = 0
    model_constraint = None

    for epoch in range(1, config.epochs + 1):
        start = time.time()
        for _ in range(config.episodes_per_epoch):
            traj = collect_episode(policy, env, streams["env"])
            buffer.add_episode(*traj.transitions())
            env_steps += len(traj)
            accumulated += traj.total_cost
            episodes += 1
            exceeded += traj.total_cost > spec.budget

        reason = None
        try:
            ensemble = fit(buffer, config.model, previous=ensemble, seed=int(streams["model"].integers(2 ** 31)))
            if epoch > 1:
                for _ in range(config.updates_per_epoch):
                    batch = ImaginedBatch.sample(buffer, config.batch_size, config.horizon, spec.action_dim,
                                                 streams["imagine"])
                    estimate = pessimistic_eval(policy, ensemble, batch, budget_share)
                    if config.optimizer == "lbsgd":
                        terms = barrier_terms(policy, ensemble, batch, opt.eta, budget_share, estimate)
                        policy.params, opt = lbsgd_step(policy.params, terms.grad_J, terms.grad_J_c, terms.J_c, opt,
                                                        estimate.constraint_at, J=terms.J)
                        model_constraint = opt.ledger[-1].J_c
                    else:
                        grad_j, grad_c = estimate.gradients()
                        policy.params, opt = lagrangian_step(policy.params, grad_j, grad_c, estimate.constraint, opt,
                                                             J=estimate.reward)
                        model_constraint = estimate.constraint_at(policy.params)
                        violations += model_constraint >= 0
                if config.optimizer == "lbsgd":
                    decay_eta(opt)
                    violations = opt.violations()
        except InfeasibleIterate as e:
            reason = f"infeasible iterate: J_P^c = {e.value:.4g}"
        except TrainingError as e:
            reason = f"model fit failed: {e}"
        except EvaluationError as e:
            reason = f"imagined rollout failed: {e}"
        if reason:
            logger.error(f"Aborting run at epoch {epoch}: {reason}")

        J_hat, Jc_hat = evaluate(policy, env, config.eval_episodes, streams["eval"])
        record = EpochRecord(
            epoch=epoch, env_steps=env_steps, J_hat=J_hat, Jc_hat=Jc_hat, accumulated_cost=accumulated,
            eta=opt.eta if config.optimizer == "lbsgd" else None,
            multiplier=opt.multiplier if config.optimizer == "lagrangian" else None,
            violations=int(violations), exceedance_rate=exceeded / episodes,
            model_constraint=None if model_constraint is None else float(model_constraint),
            wall_time=time.time() - start, aborted=reason is not None, reason=reason)
        metrics.records.append(record)
        if sink is not None:
            sink.write(record)
        logger.info(f"Epoch {epoch}: J_hat={J_hat:.3f} Jc_hat={Jc_hat:.2f} accumulated cost={accumulated:.1f} "
                    f"violations={violations}")
        if checkpoints is not None and ensemble is not None:
            checkpoints.save(epoch, _checkpoint_payload(config, policy, ensemble, J_hat, Jc_hat), score=J_hat,
                             feasible=Jc_hat <= spec.budget)
        if reason:
            break

    if ledger_path is not None:
        opt.export_ledger(ledger_path)
    return metrics
