import pickle

import numpy as np
import pytest

from safedyn.config import FitConfig
from safedyn.ensemble import (LOGVAR_MAX, LOGVAR_MIN, EnsembleModel, MemberParams, Normalizer, ReplayBuffer, fit,
                              init_member_weights, predict, sample_next)
from safedyn.errors import TrainingError


def _linear_buffer(n_episodes=4, length=50, seed=0, noise=1e-3, cost_threshold=0.5):
    """s' = s + 0.1 * [a, a] plus Gaussian noise, cost 1 when x > cost_threshold."""
    rng = np.random.default_rng(seed)
    buffer = ReplayBuffer(4, 2, capacity=10_000)
    for _ in range(n_episodes):
        s = rng.uniform(-1, 1, size=(length, 4))
        a = rng.uniform(-1, 1, size=(length, 2))
        s2 = s + 0.1 * np.concatenate([a, a], axis=1) + noise * rng.standard_normal((length, 4))
        r = -np.linalg.norm(s2[:, :2], axis=1)
        c = (s2[:, 0] > cost_threshold).astype(float)
        buffer.add_episode(s, a, s2, r, c)
    return buffer


def test_buffer_counts_and_evicts_whole_episodes():
    buffer = ReplayBuffer(1, 1, capacity=25)
    for k in range(3):
        n = 10
        buffer.add_episode(np.full((n, 1), k), np.zeros((n, 1)), np.zeros((n, 1)), np.zeros(n), np.zeros(n))
    assert buffer.size == 20
    assert buffer.episode_starts == [0, 10]
    states = buffer.transitions()[0]
    assert np.array_equal(states[:, 0], [1.0] * 10 + [2.0] * 10)
    with pytest.raises(ValueError):
        buffer.add_episode(np.zeros((30, 1)), np.zeros((30, 1)), np.zeros((30, 1)), np.zeros(30), np.zeros(30))


def test_fit_requires_enough_data():
    buffer = _linear_buffer(n_episodes=1, length=20)
    with pytest.raises(TrainingError) as info:
        fit(buffer, FitConfig(members=1, min_transitions=100))
    assert info.value.diagnostics["transitions"] == 20


def test_fit_reduces_loss_and_is_deterministic():
    buffer = _linear_buffer()
    config = FitConfig(members=2, hidden=16, epochs=5, steps_per_epoch=30, batch_size=32, learning_rate=3e-3,
                       min_transitions=50)
    model = fit(buffer, config, seed=3)
    again = fit(buffer, config, seed=3)
    assert len(model) == 2
    for history in model.loss_history:
        assert history[-1] < history[0]
    for m1, m2 in zip(model.members, again.members):
        for name in m1.weights:
            assert np.array_equal(m1.weights[name], m2.weights[name])
    # members differ by initialization and bootstrap
    assert not np.array_equal(model.members[0].weights["W1"], model.members[1].weights["W1"])


def test_fit_reports_non_finite_loss():
    buffer = _linear_buffer()
    buffer.rewards[:buffer.size] = np.inf
    with pytest.raises(TrainingError) as info:
        fit(buffer, FitConfig(members=1, hidden=4, epochs=1, steps_per_epoch=2, min_transitions=10))
    assert info.value.diagnostics["member"] == 0


def test_warm_start_reuses_previous_weights():
    buffer = _linear_buffer()
    config = FitConfig(members=1, hidden=8, epochs=1, steps_per_epoch=1, learning_rate=1e-6, min_transitions=10)
    first = fit(buffer, config, seed=0)
    second = fit(buffer, config, previous=first, seed=99)
    assert np.allclose(first.members[0].weights["W0s"], second.members[0].weights["W0s"], atol=1e-4)


def test_predict_shapes_and_variance_bounds():
    model = fit(_linear_buffer(), FitConfig(members=1, hidden=8, epochs=1, steps_per_epoch=5, min_transitions=10))
    member = model.members[0]
    mu, var, reward, cost = predict(member, np.zeros(4), np.zeros(2))
    assert mu.shape == (4,) and var.shape == (4,)
    assert isinstance(reward, float) and 0.0 < cost < 1.0
    mu, var, reward, cost = predict(member, np.zeros((6, 4)), np.zeros((6, 2)))
    assert mu.shape == (6, 4) and reward.shape == (6,) and cost.shape == (6,)
    assert np.all(var >= np.exp(LOGVAR_MIN) * (1 - 1e-12)) and np.all(var <= np.exp(LOGVAR_MAX) * (1 + 1e-12))
    with pytest.raises(ValueError):
        predict(member, np.full(4, np.nan), np.zeros(2))


def test_zero_weight_member_predicts_its_biases():
    rng = np.random.default_rng(0)
    weights = {k: np.zeros_like(v) for k, v in init_member_weights(4, 2, 3, rng).items()}
    weights["br"][:] = 2.0
    normalizer = Normalizer.identity(4, 2)
    member = MemberParams(weights, normalizer)
    s = np.array([0.1, 0.2, 0.3, 0.4])
    mu, var, reward, cost = predict(member, s, np.ones(2))
    assert np.array_equal(mu, s)
    assert np.allclose(var, 1.0)
    assert reward == 2.0
    assert cost == 0.5
    assert np.allclose(sample_next(member, s, np.ones(2), noise=np.ones(4)), s + 1.0)


def test_sample_next_with_common_noise_is_reproducible():
    model = fit(_linear_buffer(), FitConfig(members=1, hidden=8, epochs=1, steps_per_epoch=5, min_transitions=10))
    member = model.members[0]
    s, a = np.zeros(4), np.ones(2)
    x1 = sample_next(member, s, a, rng=np.random.default_rng(5))
    x2 = sample_next(member, s, a, rng=np.random.default_rng(5))
    assert np.array_equal(x1, x2)
    with pytest.raises(ValueError):
        sample_next(member, s, a)


def test_learned_model_tracks_linear_dynamics():
    buffer = _linear_buffer(n_episodes=8)
    model = fit(buffer, FitConfig(members=1, hidden=32, epochs=20, steps_per_epoch=50, batch_size=64,
                                  learning_rate=3e-3, min_transitions=50), seed=1)
    s = np.array([0.2, -0.1, 0.0, 0.3])
    a = np.array([0.5, -0.5])
    mu, _, _, _ = predict(model.members[0], s, a)
    assert np.allclose(mu, s + 0.1 * np.array([0.5, -0.5, 0.5, -0.5]), atol=0.03)


def test_save_load_is_bit_identical(tmp_path):
    model = fit(_linear_buffer(), FitConfig(members=2, hidden=8, epochs=1, steps_per_epoch=3, min_transitions=10))
    path = tmp_path / "ensemble.pkl"
    model.save(path)
    loaded = EnsembleModel.load(path)
    s, a = np.full((3, 4), 0.1), np.full((3, 2), -0.2)
    for m1, m2 in zip(model.members, loaded.members):
        for x, y in zip(predict(m1, s, a), predict(m2, s, a)):
            assert np.array_equal(x, y)
    assert loaded.loss_history == model.loss_history


def test_load_rejects_foreign_pickle(tmp_path):
    path = tmp_path / "other.pkl"
    with open(path, "wb") as f:
        pickle.dump({"version": 99}, f)
    with pytest.raises(pickle.UnpicklingError):
        EnsembleModel.load(path)
    with pytest.raises(FileNotFoundError):
        EnsembleModel.load(tmp_path / "missing.pkl")


def test_subset_and_disagreement():
    model = fit(_linear_buffer(), FitConfig(members=3, hidden=8, epochs=1, steps_per_epoch=3, min_transitions=10))
    assert len(model.subset(2)) == 2
    assert model.subset(2).members[1] is model.members[1]
    d = model.disagreement(np.zeros((5, 4)), np.zeros((5, 2)))
    assert d.shape == (5,) and np.all(d >= 0)


def _held_out(n, seed=100):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1, 1, size=(n, 4))
    a = rng.uniform(-1, 1, size=(n, 2))
    return s, a, s + 0.1 * np.concatenate([a, a], axis=1)


def test_mean_prediction_error_on_noiseless_linear_data():
    buffer = _linear_buffer(n_episodes=10, length=500, seed=2, noise=0.0)
    model = fit(buffer, FitConfig(members=2, hidden=32, epochs=30, steps_per_epoch=100, batch_size=64,
                                  learning_rate=3e-3, min_transitions=50), seed=4)
    s, a, truth = _held_out(500)
    mu = model.predict_all(s, a)[0].mean(axis=0)
    rmse = np.sqrt(np.mean((mu - truth) ** 2))
    assert rmse <= 1e-2


def test_members_disagree_more_off_distribution():
    model = fit(_linear_buffer(n_episodes=8, seed=3),
                FitConfig(members=3, hidden=16, epochs=10, steps_per_epoch=40, batch_size=64, learning_rate=3e-3,
                          min_transitions=50), seed=5)
    rng = np.random.default_rng(6)
    a = rng.uniform(-1, 1, size=(200, 2))
    inside = model.disagreement(rng.uniform(-1, 1, size=(200, 4)), a)
    outside = model.disagreement(rng.uniform(4, 6, size=(200, 4)), a)
    assert np.median(outside) / np.median(inside) > 1.0


def test_cost_head_learns_a_cost_free_world():
    buffer = _linear_buffer(n_episodes=8, seed=7, cost_threshold=np.inf)
    assert not buffer.transitions()[4].any()
    model = fit(buffer, FitConfig(members=2, hidden=16, epochs=10, steps_per_epoch=40, batch_size=64,
                                  learning_rate=3e-3, min_transitions=50), seed=8)
    s, a, _ = _held_out(300, seed=9)
    assert model.predict_all(s, a)[3].max() <= 0.05


def test_sample_next_mean_matches_predicted_mean():
    model = fit(_linear_buffer(), FitConfig(members=1, hidden=8, epochs=2, steps_per_epoch=10, min_transitions=10))
    member = model.members[0]
    n = 100_000
    s = np.tile([0.2, -0.3, 0.1, 0.0], (n, 1))
    a = np.tile([0.5, -0.5], (n, 1))
    mu, var, _, _ = predict(member, s[0], a[0])
    samples = sample_next(member, s, a, rng=np.random.default_rng(10))
    assert samples.shape == (n, 4)
    assert np.all(np.abs(samples.mean(axis=0) - mu) <= 3.0 * np.sqrt(var) / np.sqrt(n))
    assert np.allclose(samples.var(axis=0), var, rtol=0.05)
