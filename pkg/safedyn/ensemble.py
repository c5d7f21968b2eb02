"""
Probabilistic ensemble of learned dynamics / reward / cost models.

Each member maps (s, a) to a Gaussian over the state delta s' - s, a reward mean and a cost
logit. Members share architecture and normalization statistics and differ by initialization
and bootstrap resampling of the replay buffer.
"""
import logging
import pickle
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .config import FitConfig
from .diffcore import Tape, backward, forward
from .errors import TrainingError
from .utils import DTYPE, seed_streams

logger = logging.getLogger(__name__)

LOGVAR_MIN = np.log(1e-6)
LOGVAR_MAX = np.log(1e2)
STD_FLOOR = 1e-8
# cost head bias starts at the observed cost rate, never below this
COST_RATE_FLOOR = 1e-3
CHECKPOINT_VERSION = 1


class ReplayBuffer:
    """
    Flat transition store (s, a, s', r, c) with episode boundaries.

    Episodes are stored contiguously and in order. When an episode does not fit, the oldest
    whole episodes are evicted.

    Attributes:
        size (int): Number of stored transitions.
        episode_starts (list): Start offset of every stored episode.
    """

    def __init__(self, state_dim, action_dim, capacity=100_000):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim), dtype=DTYPE)
        self.actions = np.zeros((capacity, action_dim), dtype=DTYPE)
        self.next_states = np.zeros((capacity, state_dim), dtype=DTYPE)
        self.rewards = np.zeros(capacity, dtype=DTYPE)
        self.costs = np.zeros(capacity, dtype=DTYPE)
        self.size = 0
        self.episode_starts = []

    def __len__(self):
        return self.size

    def add_episode(self, states, actions, next_states, rewards, costs):
        n = len(states)
        if n > self.capacity:
            raise ValueError(f"episode of {n} transitions exceeds buffer capacity {self.capacity}")
        while self.size + n > self.capacity:
            self._evict_oldest()
        sl = slice(self.size, self.size + n)
        self.states[sl] = states
        self.actions[sl] = actions
        self.next_states[sl] = next_states
        self.rewards[sl] = rewards
        self.costs[sl] = costs
        self.episode_starts.append(self.size)
        self.size += n

    def _evict_oldest(self):
        cut = self.episode_starts[1] if len(self.episode_starts) > 1 else self.size
        for arr in (self.states, self.actions, self.next_states, self.rewards, self.costs):
            arr[:self.size - cut] = arr[cut:self.size]
        self.size -= cut
        self.episode_starts = [s - cut for s in self.episode_starts[1:]]
        logger.debug(f"Evicted {cut} transitions from the replay buffer")

    def transitions(self):
        n = self.size
        return self.states[:n], self.actions[:n], self.next_states[:n], self.rewards[:n], self.costs[:n]

    def sample_states(self, k, rng):
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return self.states[rng.integers(0, self.size, size=k)].copy()


@dataclass
class Normalizer:
    """Per-dimension mean/std of states, actions, state deltas and rewards (std >= 1e-8)."""
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    delta_mean: np.ndarray
    delta_std: np.ndarray
    reward_mean: np.ndarray
    reward_std: np.ndarray

    @classmethod
    def from_buffer(cls, buffer):
        s, a, s2, r, _ = buffer.transitions()
        d = s2 - s

        def stats(x):
            return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)

        sm, ss = stats(s)
        am, as_ = stats(a)
        dm, ds = stats(d)
        rm, rs = stats(r[:, None])
        return cls(sm, ss, am, as_, dm, ds, rm, rs)

    @classmethod
    def identity(cls, state_dim, action_dim):
        n, m = np.zeros(state_dim), np.ones(state_dim)
        return cls(n, m, np.zeros(action_dim), np.ones(action_dim), n.copy(), m.copy(), np.zeros(1), np.ones(1))

    @property
    def logvar_bounds(self):
        """Clamp bounds of the normalized log-variance matching [1e-6, 1e2] in state units."""
        shift = 2.0 * np.log(self.delta_std)
        return LOGVAR_MIN - shift, LOGVAR_MAX - shift


@dataclass
class MemberParams:
    """
    Weights of one ensemble member plus the shared normalizer.

    Weight names: W0s, W0a, b0 (first layer split by state/action input), W1, b1,
    Wmu, bmu (delta mean), Wlv, blv (delta log-variance), Wr, br (reward), Wc, bc (cost logit).
    """
    weights: dict
    normalizer: Normalizer

    @property
    def state_dim(self):
        return self.weights["W0s"].shape[0]

    @property
    def action_dim(self):
        return self.weights["W0a"].shape[0]


def member_shapes(state_dim, action_dim, hidden):
    n, m, h = state_dim, action_dim, hidden
    return {"W0s": (n, h), "W0a": (m, h), "b0": (h,), "W1": (h, h), "b1": (h,),
            "Wmu": (h, n), "bmu": (n,), "Wlv": (h, n), "blv": (n,),
            "Wr": (h, 1), "br": (1,), "Wc": (h, 1), "bc": (1,)}


def init_member_weights(state_dim, action_dim, hidden, rng):
    weights = {}
    fan_in = {"W0s": state_dim + action_dim, "W0a": state_dim + action_dim}
    for name, shape in member_shapes(state_dim, action_dim, hidden).items():
        if name.startswith("W"):
            scale = 1.0 / np.sqrt(fan_in.get(name, shape[0]))
            weights[name] = rng.normal(0.0, scale, size=shape)
        else:
            weights[name] = np.zeros(shape)
    return weights


@dataclass
class MemberNodes:
    """Tape nodes of one member's heads for a batch of (s, a)."""
    delta_mean: object
    logvar: object
    reward: object
    logit: object


def member_graph(tape, w, normalizer, s, a):
    """
    Adds one member's network to a tape.

    Args:
        tape (Tape): Target tape.
        w (dict): Weight name -> node (inputs while training, constants while planning).
        normalizer (Normalizer): Shared statistics, embedded as constants.
        s, a (Node): Batches of states (B, n) and actions (B, m) in environment units.

    Returns:
        MemberNodes: Normalized delta mean, clamped normalized log-variance, normalized reward, cost logit.
    """
    s_n = (s - normalizer.state_mean) * (1.0 / normalizer.state_std)
    a_n = (a - normalizer.action_mean) * (1.0 / normalizer.action_std)
    h0 = tape.tanh(tape.affine(s_n, w["W0s"], w["b0"]) + a_n @ w["W0a"])
    h1 = tape.tanh(tape.affine(h0, w["W1"], w["b1"]))
    lo, hi = normalizer.logvar_bounds
    return MemberNodes(
        delta_mean=tape.affine(h1, w["Wmu"], w["bmu"]),
        logvar=tape.clip(tape.affine(h1, w["Wlv"], w["blv"]), lo, hi),
        reward=tape.affine(h1, w["Wr"], w["br"]),
        logit=tape.affine(h1, w["Wc"], w["bc"]),
    )


@dataclass
class TransitionNodes:
    next_state: object
    reward: object
    cost: object


def member_transition(tape, member, s, a, noise, weights=None):
    """
    Reparameterized transition s' = s + mu + sigma * xi in environment units.

    Gradients flow to `s` and `a` through mu and sigma; `noise` (B, n) is frozen.
    Returns next state (B, n), reward (B, 1) and expected cost, i.e. cost probability (B, 1).
    """
    norm = member.normalizer
    if weights is None:
        weights = {name: tape.const(value) for name, value in member.weights.items()}
    heads = member_graph(tape, weights, norm, s, a)
    mean = s + heads.delta_mean * norm.delta_std + norm.delta_mean
    logvar = heads.logvar + 2.0 * np.log(norm.delta_std)
    std = tape.exp(logvar * 0.5)
    return TransitionNodes(
        next_state=mean + std * noise,
        reward=heads.reward * norm.reward_std + norm.reward_mean,
        cost=tape.sigmoid(heads.logit),
    )


def _check_inputs(s, a, member):
    s = np.asarray(s, dtype=DTYPE)
    a = np.asarray(a, dtype=DTYPE)
    single = s.ndim == 1
    s2, a2 = np.atleast_2d(s), np.atleast_2d(a)
    if s2.shape[1] != member.state_dim or a2.shape[1] != member.action_dim or len(s2) != len(a2):
        raise ValueError(f"state/action shapes {s.shape}/{a.shape} do not match member dimensions")
    if not (np.all(np.isfinite(s2)) and np.all(np.isfinite(a2))):
        raise ValueError("predict called with non-finite state or action")
    return s2, a2, single


def predict(member, s, a):
    """
    Predictive distribution of one member.

    Args:
        member (MemberParams): The member.
        s (np.ndarray): State (n,) or batch (B, n).
        a (np.ndarray): Action (m,) or batch (B, m).

    Returns:
        tuple: (mu, var, reward, cost_prob); mu and var are next-state mean and variance in
               environment units, var within [1e-6, 1e2].

    Raises:
        ValueError: Non-finite inputs or wrong dimensions.
    """
    s2, a2, single = _check_inputs(s, a, member)
    tape = Tape(name="predict")
    weights = {name: tape.const(value) for name, value in member.weights.items()}
    heads = member_graph(tape, weights, member.normalizer, tape.const(s2), tape.const(a2))
    forward(tape, {})
    norm = member.normalizer
    mu = s2 + heads.delta_mean.value * norm.delta_std + norm.delta_mean
    var = np.exp(np.clip(heads.logvar.value + 2.0 * np.log(norm.delta_std), LOGVAR_MIN, LOGVAR_MAX))
    reward = (heads.reward.value * norm.reward_std + norm.reward_mean)[:, 0]
    cost = expit(heads.logit.value)[:, 0]
    if single:
        return mu[0], var[0], float(reward[0]), float(cost[0])
    return mu, var, reward, cost


def sample_next(member, s, a, rng=None, noise=None):
    """
    Draws s' = mu + sigma * xi; xi comes from `noise` if given, else from `rng`.
    """
    mu, var, _, _ = predict(member, s, a)
    if noise is None:
        if rng is None:
            raise ValueError("sample_next needs an rng or explicit noise")
        noise = rng.standard_normal(mu.shape)
    return mu + np.sqrt(var) * np.asarray(noise, dtype=DTYPE)


class Adam:
    """Adam update for a dict of parameter arrays, in place."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.learning_rate * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _loss_tape(member, batch_size):
    """Training tape: mean over the batch of Gaussian NLL (delta) + squared error (reward) + BCE (cost)."""
    n, m = member.state_dim, member.action_dim
    tape = Tape(name="member-loss")
    w = {name: tape.input(name, value.shape) for name, value in member.weights.items()}
    s = tape.input("s", (batch_size, n))
    a = tape.input("a", (batch_size, m))
    delta = tape.input("delta", (batch_size, n))
    reward = tape.input("reward", (batch_size, 1))
    cost = tape.input("cost", (batch_size, 1))
    heads = member_graph(tape, w, member.normalizer, s, a)
    nll = -1.0 * tape.gaussian_logpdf(delta, heads.delta_mean, heads.logvar)
    err = heads.reward - reward
    bce = tape.sum(tape.softplus(heads.logit) - heads.logit * cost)
    tape.mark_output((nll + tape.sum(err * err) + bce) * (1.0 / batch_size), "loss")
    return tape


class EnsembleModel:
    """
    N members realizing the plausible-model set.

    Attributes:
        members (list): MemberParams, all sharing one Normalizer.
        normalizer (Normalizer): Shared statistics.
        config (FitConfig): Training configuration snapshot.
        loss_history (list): Per member, mean training loss of every epoch.
    """

    def __init__(self, members, normalizer, config=None, loss_history=None):
        if len(members) < 1:
            raise ValueError("an ensemble needs at least one member")
        self.members = members
        self.normalizer = normalizer
        self.config = config or FitConfig(members=len(members))
        self.loss_history = loss_history or [[] for _ in members]

    def __len__(self):
        return len(self.members)

    def subset(self, k):
        """Ensemble of the first k members (same normalizer, shared weights)."""
        return EnsembleModel(self.members[:k], self.normalizer, self.config, self.loss_history[:k])

    def predict_all(self, s, a):
        """Stacked member predictions: (mu (N, B, n), var (N, B, n), reward (N, B), cost (N, B))."""
        out = [predict(member, s, a) for member in self.members]
        return tuple(np.stack([o[i] for o in out]) for i in range(4))

    def disagreement(self, s, a):
        """Variance of the member means across the ensemble, averaged over state dimensions."""
        mu = self.predict_all(s, a)[0]
        return mu.var(axis=0).mean(axis=-1)

    def save(self, filename):
        """
        Saves the ensemble with pickle (highest protocol).

        Reloading yields bit-identical float64 weights and statistics.
        """
        payload = {"version": CHECKPOINT_VERSION,
                   "members": [m.weights for m in self.members],
                   "normalizer": self.normalizer,
                   "config": self.config,
                   "loss_history": self.loss_history}
        with open(filename, "wb") as f:
            logger.debug(f"Saving ensemble to {filename}")
            pickle.dump(payload, f, protocol=pickle.HIGHEST_PROTOCOL)

    @staticmethod
    def load(filename):
        """
        Loads an ensemble saved by `save`.

        Raises:
            FileNotFoundError: If the file does not exist.
            pickle.UnpicklingError: If the file is corrupt or of another version.
        """
        logger.debug(f"Loading ensemble from {filename}")
        try:
            with open(filename, "rb") as f:
                payload = pickle.load(f)
        except FileNotFoundError as e:
            logger.error(f"File not found: {filename}")
            raise e
        except (pickle.UnpicklingError, EOFError) as e:
            logger.error(f"Error loading file: {filename}. Reason: {e}")
            raise e
        if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
            raise pickle.UnpicklingError(f"{filename} is not a version {CHECKPOINT_VERSION} ensemble checkpoint")
        norm = payload["normalizer"]
        members = [MemberParams(w, norm) for w in payload["members"]]
        return EnsembleModel(members, norm, payload["config"], payload["loss_history"])


def fit(buffer, config, previous=None, seed=None):
    """
    Trains (or fine-tunes) an ensemble on the replay buffer.

    Args:
        buffer (ReplayBuffer): Training data.
        config (FitConfig): Architecture and schedule.
        previous (EnsembleModel, optional): Warm-start weights, used when config.warm_start is set.
        seed (int, optional): Overrides config.seed, so callers can draw a fresh seed per fit.

    Returns:
        EnsembleModel: Members trained with Adam on bootstrapped minibatches; normalization
                       statistics recomputed from the buffer.

    Raises:
        TrainingError: Too few transitions, or a non-finite loss (diagnostics attached).
    """
    if buffer.size < config.min_transitions:
        logger.error(f"Replay buffer holds {buffer.size} transitions, {config.min_transitions} required")
        raise TrainingError(f"insufficient data: {buffer.size} < {config.min_transitions} transitions",
                            transitions=buffer.size)

    normalizer = Normalizer.from_buffer(buffer)
    s, a, s2, r, c = buffer.transitions()
    delta_n = (s2 - s - normalizer.delta_mean) / normalizer.delta_std
    reward_n = ((r[:, None] - normalizer.reward_mean) / normalizer.reward_std)
    cost = c[:, None]
    batch_size = min(config.batch_size, buffer.size)

    streams = seed_streams(config.seed if seed is None else seed, [f"member{i}" for i in range(config.members)])
    warm = previous is not None and config.warm_start and len(previous) == config.members
    members, history = [], []
    for i in range(config.members):
        rng = streams[f"member{i}"]
        if warm:
            weights = {k: v.copy() for k, v in previous.members[i].weights.items()}
        else:
            weights = init_member_weights(buffer.state_dim, buffer.action_dim, config.hidden, rng)
            weights["bc"][:] = logit(np.clip(c.mean(), COST_RATE_FLOOR, 1.0 - COST_RATE_FLOOR))
        member = MemberParams(weights, normalizer)
        boot = rng.integers(0, buffer.size, size=buffer.size)
        tape = _loss_tape(member, batch_size)
        adam = Adam(weights, config.learning_rate)
        losses = []
        for epoch in range(config.epochs):
            total = 0.0
            for step in range(config.steps_per_epoch):
                idx = boot[rng.integers(0, len(boot), size=batch_size)]
                bindings = dict(weights)
                bindings.update(s=s[idx], a=a[idx], delta=delta_n[idx], reward=reward_n[idx], cost=cost[idx])
                loss = float(forward(tape, bindings))
                if not np.isfinite(loss):
                    logger.error(f"Non-finite loss in member {i}, epoch {epoch}, step {step}")
                    raise TrainingError("non-finite training loss", member=i, epoch=epoch, step=step, loss=loss)
                grads = backward(tape)
                adam.update(weights, grads)
                total += loss
            losses.append(total / config.steps_per_epoch)
        logger.debug(f"Member {i}: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
        members.append(member)
        history.append(losses)

    logger.info(f"Fitted {config.members} members on {buffer.size} transitions "
                f"(final mean loss {np.mean([h[-1] for h in history]):.4f})")
    return EnsembleModel(members, normalizer, config, history)
