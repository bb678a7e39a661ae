"""
Tests for the constrained soft actor-critic.

The critic tests train on tiny finite systems whose fixed points are known
in closed form; the policy test checks the hand-assembled actor gradient
against finite differences of the actor loss.
"""

import os
import sys

import numpy as np
import pytest
from scipy.stats import norm

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from conftest import TINY_TRAINING

from rads.agent import (
    Batch,
    ReplayBuffer,
    _policy_sample,
    bundle_from_checkpoint,
    bundle_to_checkpoint,
    compute_reward,
    dual_step,
    init_bundle,
    make_policy,
    make_reward_fn,
    mean_safety_value,
    polyak_update,
    policy_loss_and_grads,
    q_value,
    safety_targets,
    sample_action,
    task_targets,
    temperature_gradient,
    train,
    update_lambda,
    update_policy,
    update_safety_critic,
    update_task_critics,
    update_temperature,
)
from rads.approximator import Net, OptimState, checkpoint_bytes, checkpoint_from_bytes
from rads.dynamics import CaptionEmbedding, SystemState, ToyDenoiser, Transition
from rads.errors import CheckpointError, DimensionError, DivergenceError, RadsError
from rads.harness.config import apply_overrides
from rads.models.schemas import AgentConfig, EnvConfig, PolicyMode
from rads.reachability import make_ell_fn


def _linear(weights, bias) -> Net:
    return Net([np.atleast_2d(np.asarray(weights, dtype=np.float64))], [np.atleast_1d(np.asarray(bias, dtype=np.float64))])


def _const(in_dim: int, c: float) -> Net:
    return _linear(np.zeros((1, in_dim)), [c])


def _transition(i: int, obs_dim: int = 3, d: int = 1) -> Transition:
    return Transition(
        state=SystemState(np.zeros(2), 0),
        observation=np.full(obs_dim, float(i)),
        action=np.zeros(d),
        reward=float(i),
        ell=0.1 * i,
        next_state=SystemState(np.zeros(2), 1),
        next_observation=np.full(obs_dim, float(i + 1)),
        terminal=i % 2 == 0,
        ell_terminal=-0.1,
    )


def _tiny_agent_config(default_config, **update) -> AgentConfig:
    cfg = apply_overrides(default_config.model_dump(mode="json"), TINY_TRAINING)
    return AgentConfig(**cfg["agent"]).model_copy(update=update)


class TestReplayBuffer:
    """FIFO storage and uniform minibatches."""

    def test_capacity_drops_oldest(self):
        buf = ReplayBuffer(3)
        buf.push([_transition(i) for i in range(5)])
        assert len(buf) == 3
        batch = buf.sample(3, np.random.default_rng(0))
        assert set(batch.rewards.tolist()) <= {2.0, 3.0, 4.0}

    def test_capacity_keeps_newest_in_order(self):
        buf = ReplayBuffer(3)
        buf.push([_transition(i) for i in range(2)])
        buf.push([_transition(i) for i in range(2, 5)])
        rewards = set()
        rng = np.random.default_rng(0)
        for _ in range(40):
            rewards.update(buf.sample(2, rng).rewards.tolist())
        assert rewards == {2.0, 3.0, 4.0}
        assert [t.reward for t in buf._items] == [2.0, 3.0, 4.0]

    def test_sample_below_batch_size(self):
        buf = ReplayBuffer(10)
        buf.push([_transition(0)])
        with pytest.raises(RadsError):
            buf.sample(2, np.random.default_rng(0))

    def test_batch_fields(self):
        batch = Batch.from_transitions([_transition(i) for i in range(4)])
        assert len(batch) == 4
        assert batch.obs.shape == (4, 3)
        assert batch.terminal.tolist() == [True, False, True, False]
        assert batch.ell.tolist() == pytest.approx([0.0, 0.1, 0.2, 0.3])

    def test_empty_batch(self):
        with pytest.raises(DimensionError):
            Batch.from_transitions([])

    def test_bad_capacity(self):
        with pytest.raises(DimensionError):
            ReplayBuffer(0)


class TestPolicy:
    """Squashed-Gaussian sampling."""

    def _policy(self, mean, log_std, obs_dim=2):
        d = len(mean)
        return _linear(np.zeros((2 * d, obs_dim)), np.concatenate([mean, log_std]))

    def test_deterministic_is_tanh_mean(self):
        net = self._policy([0.3, -1.0], [np.log(0.5), 0.0])
        action, logp = sample_action(net, np.zeros(2), PolicyMode.deterministic)
        assert np.allclose(action, np.tanh([0.3, -1.0]))
        expected = sum(
            -ls - 0.5 * np.log(2 * np.pi) - np.log(1 - np.tanh(m) ** 2)
            for m, ls in [(0.3, np.log(0.5)), (-1.0, 0.0)]
        )
        assert logp == pytest.approx(expected)

    def test_stochastic_density(self):
        net = self._policy([0.3], [np.log(0.5)])
        action, logp = sample_action(net, np.zeros(2), PolicyMode.stochastic, np.random.default_rng(5))
        xi = np.random.default_rng(5).standard_normal((1, 1))[0, 0]
        pre = 0.3 + 0.5 * xi
        assert action[0] == pytest.approx(np.tanh(pre))
        expected = -0.5 * xi ** 2 - np.log(0.5) - 0.5 * np.log(2 * np.pi) - np.log(1 - np.tanh(pre) ** 2)
        assert logp == pytest.approx(expected, rel=1e-9)

    def test_saturated_mean_stays_finite(self):
        net = self._policy([30.0], [0.0])
        _, logp = sample_action(net, np.zeros(2), PolicyMode.deterministic)
        assert np.isfinite(logp)

    def test_log_std_clamped(self):
        wide = self._policy([0.0], [50.0])
        capped = self._policy([0.0], [2.0])
        rng_a, rng_b = np.random.default_rng(1), np.random.default_rng(1)
        a, _ = sample_action(wide, np.zeros(2), PolicyMode.stochastic, rng_a)
        b, _ = sample_action(capped, np.zeros(2), PolicyMode.stochastic, rng_b)
        assert np.array_equal(a, b)

    def test_batch_actions_in_bounds(self):
        net = init_bundle(11, 2, AgentConfig(hidden_width=16, hidden_layers=2), seed=0).policy
        obs = np.random.default_rng(0).standard_normal((500, 11))
        actions, logp = sample_action(net, obs, PolicyMode.stochastic, np.random.default_rng(1))
        assert actions.shape == (500, 2)
        assert logp.shape == (500,)
        assert np.all(np.abs(actions) < 1.0)

    @pytest.mark.parametrize("mean,log_std", [(0.3, np.log(0.5)), (-0.8, 0.0)])
    def test_many_draws_in_bounds(self, mean, log_std):
        net = self._policy([mean], [log_std])
        actions, logp = sample_action(net, np.zeros((100_000, 2)), PolicyMode.stochastic, np.random.default_rng(7))
        assert np.all(np.abs(actions) < 1.0)
        assert np.all(np.isfinite(logp))

    def test_widest_policy_stays_finite(self):
        net = self._policy([0.0], [2.0])
        actions, logp = sample_action(net, np.zeros((100_000, 2)), PolicyMode.stochastic, np.random.default_rng(8))
        assert np.all(np.abs(actions) <= 1.0)
        assert np.all(np.isfinite(logp))

    def test_density_integrates_to_one(self):
        mean, sigma = 0.3, 0.5
        net = self._policy([mean], [np.log(sigma)])
        u = np.linspace(-1 + 1e-9, 1 - 1e-9, 200_001)
        xi = (np.arctanh(u) - mean) / sigma
        density = np.exp(_policy_sample(net, np.zeros((len(u), 2)), xi[:, None]).log_prob)
        assert np.trapezoid(density, u) == pytest.approx(1.0, abs=1e-4)

        draws, _ = sample_action(net, np.zeros((100_000, 2)), PolicyMode.stochastic, np.random.default_rng(9))
        assert np.trapezoid(u * density, u) == pytest.approx(draws.mean(), abs=0.01)

    def test_density_matches_cdf_slope(self):
        mean, sigma = 0.3, 0.5
        net = self._policy([mean], [np.log(sigma)])
        actions, logp = sample_action(net, np.zeros((50, 2)), PolicyMode.stochastic, np.random.default_rng(10))

        def cdf(a):
            return norm.cdf((np.arctanh(a) - mean) / sigma)

        h = 1e-6
        slope = (cdf(actions[:, 0] + h) - cdf(actions[:, 0] - h)) / (2 * h)
        assert np.allclose(np.exp(logp), slope, rtol=1e-4)

    def test_stochastic_needs_rng(self):
        with pytest.raises(DimensionError):
            sample_action(self._policy([0.0], [0.0]), np.zeros(2), PolicyMode.stochastic)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            sample_action(self._policy([0.0], [0.0]), np.zeros(3), PolicyMode.deterministic)

    def test_make_policy_snapshots_weights(self):
        net = self._policy([0.2], [0.0])
        act = make_policy(net, PolicyMode.deterministic)
        net.biases[0][0] = 5.0
        assert act(np.zeros(2), None)[0] == pytest.approx(np.tanh(0.2))


class TestReward:
    """Terminal cosine alignment."""

    @pytest.fixture
    def env(self):
        return ToyDenoiser.from_config(EnvConfig(n_x=2, n_e=4, d=2, T=3))

    def test_hand_case(self, env):
        # image feature (1, 0, 8, 0) against caption (1, 0, 0, 0)
        r = compute_reward(SystemState(np.array([1.0, 0.0]), 3), CaptionEmbedding(np.array([1.0, 0.0, 0.0, 0.0])), env)
        assert r == pytest.approx(1.0 / np.sqrt(65.0))

    def test_zero_before_horizon(self, env):
        r = compute_reward(SystemState(np.array([1.0, 0.0]), 2), CaptionEmbedding(np.array([1.0, 0.0, 0.0, 0.0])), env)
        assert r == 0.0

    def test_zero_embedding_warns(self, env, caplog):
        r = compute_reward(SystemState(np.array([1.0, 0.0]), 3), CaptionEmbedding(np.zeros(4), caption_id="blank"), env)
        assert r == 0.0
        assert "Zero-norm vector" in caplog.text

    def test_bounded(self, env):
        rng = np.random.default_rng(0)
        for _ in range(50):
            r = compute_reward(SystemState(rng.standard_normal(2) * 10, 3), CaptionEmbedding(rng.standard_normal(4)), env)
            assert -1.0 <= r <= 1.0


class TestCriticTargets:
    """Targets with constant critics, where every term is known."""

    @pytest.fixture
    def bundle(self):
        b = init_bundle(3, 1, AgentConfig(hidden_width=8, hidden_layers=1, gamma=0.9), seed=0)
        for name in ("q1", "q2", "q_safe"):
            setattr(b, f"{name}_target", _const(4, 0.4))
            setattr(b, name, _const(4, -0.2))
        b.log_alpha = float(np.log(1e-12))
        return b

    @pytest.fixture
    def batch(self):
        return Batch.from_transitions([_transition(i) for i in range(4)])

    def test_safety_targets(self, bundle, batch):
        targets = safety_targets(bundle, batch, np.random.default_rng(0))
        ell = np.array([0.0, 0.1, 0.2, 0.3])
        expected = 0.1 * ell + 0.9 * np.minimum(ell, 0.4)
        expected[[0, 2]] = -0.1
        assert np.allclose(targets, expected)

    def test_task_targets(self, bundle, batch):
        targets = task_targets(bundle, batch, np.random.default_rng(0))
        assert np.allclose(targets, [0.0, 1.0 + 0.9 * 0.4, 2.0, 3.0 + 0.9 * 0.4], atol=1e-9)

    def test_mean_safety_value(self, bundle, batch):
        assert mean_safety_value(bundle, batch, np.random.default_rng(0)) == pytest.approx(-0.2)

    def test_q_value_shape(self, bundle, batch):
        assert q_value(bundle.q1, batch.obs, batch.actions).shape == (4,)


class TestCriticConvergence:
    """Critics trained on finite chains reach the known fixed points."""

    def _train(self, bundle, make_batch, update, names, iterations=(3000, 1000)):
        rng = np.random.default_rng(0)
        for lr, n in zip((3e-3, 3e-4), iterations):
            for name in names:
                bundle.optims[name].lr = lr
            for _ in range(n):
                update(bundle, make_batch(rng), rng)
                for name in names:
                    polyak_update(getattr(bundle, name), getattr(bundle, f"{name}_target"), 0.05)

    def test_safety_critic_fixed_point(self):
        cfg = AgentConfig(hidden_width=32, hidden_layers=2, gamma=0.9)
        bundle = init_bundle(3, 1, cfg, seed=0)
        states = np.repeat(np.arange(3), 20)
        nxt = np.array([1, 2, 2])[states]
        ell = np.array([0.5, 0.2, -0.3])[states]
        eye = np.eye(3)

        def make_batch(rng):
            return Batch(
                obs=eye[states], actions=rng.uniform(-1, 1, (len(states), 1)), rewards=np.zeros(len(states)),
                ell=ell, next_obs=eye[nxt], terminal=np.zeros(len(states), dtype=bool),
                ell_terminal=np.zeros(len(states)),
            )

        self._train(bundle, make_batch, update_safety_critic, ["q_safe"])
        q = q_value(bundle.q_safe, eye, np.zeros((3, 1)))
        assert np.allclose(q, [-0.175, -0.25, -0.3], atol=0.05)

    def test_task_critics_fixed_point(self):
        cfg = AgentConfig(hidden_width=32, hidden_layers=2, gamma=0.9)
        bundle = init_bundle(2, 1, cfg, seed=0)
        bundle.log_alpha = float(np.log(1e-6))
        states = np.repeat(np.arange(2), 20)
        eye = np.eye(2)

        def make_batch(rng):
            n = len(states)
            return Batch(
                obs=eye[states], actions=rng.uniform(-1, 1, (n, 1)), rewards=(states == 1).astype(float),
                ell=np.zeros(n), next_obs=eye[np.ones(n, dtype=int)], terminal=states == 1,
                ell_terminal=np.zeros(n),
            )

        self._train(bundle, make_batch, update_task_critics, ["q1", "q2"])
        for name in ("q1", "q2"):
            q = q_value(getattr(bundle, name), eye, np.zeros((2, 1)))
            assert np.allclose(q, [0.9, 1.0], atol=0.03)


class TestPolicyGradient:
    """Hand-assembled actor gradient against finite differences of the actor loss."""

    @pytest.mark.parametrize("offset", [50.0, -50.0])
    def test_matches_finite_differences(self, offset):
        rng = np.random.default_rng(11)
        bundle = init_bundle(5, 2, AgentConfig(hidden_width=16, hidden_layers=2), seed=3)
        bundle.q1 = _linear(rng.standard_normal((1, 7)), [0.0])
        bundle.q2 = _linear(rng.standard_normal((1, 7)), [offset])
        bundle.q_safe = _linear(rng.standard_normal((1, 7)), [0.1])
        bundle.lam = 0.7
        bundle.log_alpha = float(np.log(0.2))
        obs = rng.standard_normal((8, 5))
        xi = rng.standard_normal((8, 2))

        _, grads = policy_loss_and_grads(bundle, obs, xi)
        eps = 1e-6
        for k, p in enumerate(bundle.policy.parameters()):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + eps
                up = policy_loss_and_grads(bundle, obs, xi)[0]
                p[idx] = old - eps
                down = policy_loss_and_grads(bundle, obs, xi)[0]
                p[idx] = old
                assert grads[k][idx] == pytest.approx((up - down) / (2 * eps), rel=1e-3, abs=1e-6)

class TestActorObjective:
    """Special cases of the actor loss with hand-computable gradients."""

    def _bundle(self, lam=0.0, alpha=0.2, twin=False):
        bundle = init_bundle(2, 1, AgentConfig(hidden_width=8, hidden_layers=1, twin_safety=twin), seed=0)
        bundle.policy = _linear(np.zeros((2, 2)), [0.3, np.log(0.5)])
        bundle.q1, bundle.q2, bundle.q_safe = _const(3, 0.3), _const(3, 0.5), _const(3, -0.2)
        bundle.lam = lam
        bundle.log_alpha = float(np.log(alpha))
        return bundle

    @staticmethod
    def _log_prob(mean, log_std, xi):
        pre = mean + np.exp(log_std) * xi
        return -0.5 * xi ** 2 - log_std - 0.5 * np.log(2 * np.pi) - np.log(1 - np.tanh(pre) ** 2)

    def test_constant_critics_leave_pure_entropy_gradient(self):
        rng = np.random.default_rng(2)
        obs, xi = rng.standard_normal((6, 2)), rng.standard_normal((6, 1))
        bundle = self._bundle(lam=0.7)
        loss, grads = policy_loss_and_grads(bundle, obs, xi)

        alpha, n, sigma = 0.2, 6, 0.5
        logp = self._log_prob(0.3, np.log(sigma), xi[:, 0])
        assert loss == pytest.approx(alpha * logp.mean() - 0.3 + 0.7 * 0.2)

        u = np.tanh(0.3 + sigma * xi[:, 0])
        d_mean = alpha / n * 2.0 * u
        d_log_std = d_mean * sigma * xi[:, 0] - alpha / n
        upstream = np.stack([d_mean, d_log_std], axis=1)
        assert np.allclose(grads[0], upstream.T @ obs)
        assert np.allclose(grads[1], upstream.sum(axis=0))

    def test_zero_lambda_ignores_safety_critic(self):
        rng = np.random.default_rng(3)
        obs, xi = rng.standard_normal((8, 2)), rng.standard_normal((8, 1))
        bundle = self._bundle(lam=0.0)
        bundle.q1 = _linear(rng.standard_normal((1, 3)), [0.1])
        bundle.q2 = _linear(rng.standard_normal((1, 3)), [-0.1])
        loss, grads = policy_loss_and_grads(bundle, obs, xi)

        bundle.q_safe = _linear(rng.standard_normal((1, 3)) * 10.0, [5.0])
        loss_b, grads_b = policy_loss_and_grads(bundle, obs, xi)
        assert loss == loss_b
        for g, h in zip(grads, grads_b):
            assert np.array_equal(g, h)

        u = np.tanh(0.3 + 0.5 * xi[:, 0])[:, None]
        sac = 0.2 * self._log_prob(0.3, np.log(0.5), xi[:, 0]) - np.minimum(
            q_value(bundle.q1, obs, u), q_value(bundle.q2, obs, u)
        )
        assert loss == pytest.approx(sac.mean())

    def test_safety_term_pulls_mean_toward_safer_actions(self):
        bundle = init_bundle(2, 1, AgentConfig(hidden_width=8, hidden_layers=1), seed=0)
        bundle.policy = _linear(np.zeros((2, 2)), [0.0, np.log(0.1)])
        bundle.optims["policy"] = OptimState.for_params(bundle.policy.parameters(), 1e-2)
        bundle.q1, bundle.q2 = _const(3, 0.0), _const(3, 0.0)
        # Q_safe rises with u
        bundle.q_safe = _linear([[0.0, 0.0, 1.0]], [0.0])
        bundle.lam = 1.0
        bundle.log_alpha = float(np.log(1e-6))
        rng = np.random.default_rng(0)
        batch = Batch.from_transitions([_transition(0, obs_dim=2)] * 16)
        for _ in range(200):
            update_policy(bundle, batch, rng)
        action, _ = sample_action(bundle.policy, np.zeros(2), PolicyMode.deterministic)
        assert action[0] > 0.5


class TestTwinSafety:
    """Optional second safety critic combined by minimum."""

    def test_off_by_default(self):
        bundle = init_bundle(3, 1, AgentConfig(hidden_width=8, hidden_layers=1), seed=0)
        assert bundle.q_safe2 is None and bundle.q_safe2_target is None
        assert bundle.critic_names == ("q1", "q2", "q_safe")
        assert "q_safe2" not in bundle.optims

    def test_flag_adds_network_target_and_optimizer(self):
        bundle = init_bundle(3, 1, AgentConfig(hidden_width=8, hidden_layers=1, twin_safety=True), seed=0)
        assert bundle.q_safe2.widths == bundle.q_safe.widths
        assert np.array_equal(bundle.q_safe2.weights[0], bundle.q_safe2_target.weights[0])
        assert not np.array_equal(bundle.q_safe2.weights[0], bundle.q_safe.weights[0])
        assert bundle.critic_names == ("q1", "q2", "q_safe", "q_safe2")
        assert "q_safe2" in bundle.optims

    def test_same_seed_keeps_single_critic_weights(self):
        single = init_bundle(3, 1, AgentConfig(hidden_width=8, hidden_layers=1), seed=5)
        twin = init_bundle(3, 1, AgentConfig(hidden_width=8, hidden_layers=1, twin_safety=True), seed=5)
        assert np.array_equal(single.q_safe.weights[0], twin.q_safe.weights[0])

    def test_targets_take_the_minimum(self):
        bundle = init_bundle(3, 1, AgentConfig(hidden_width=8, hidden_layers=1, gamma=0.9, twin_safety=True), seed=0)
        bundle.q_safe_target, bundle.q_safe2_target = _const(4, 0.4), _const(4, 0.05)
        batch = Batch.from_transitions([_transition(i) for i in range(4)])
        ell = np.array([0.0, 0.1, 0.2, 0.3])
        expected = 0.1 * ell + 0.9 * np.minimum(ell, 0.05)
        expected[[0, 2]] = -0.1
        assert np.allclose(safety_targets(bundle, batch, np.random.default_rng(0)), expected)

    def test_both_critics_regress(self):
        bundle = init_bundle(3, 1, AgentConfig(hidden_width=8, hidden_layers=1, twin_safety=True), seed=0)
        before = [bundle.q_safe.weights[0].copy(), bundle.q_safe2.weights[0].copy()]
        batch = Batch.from_transitions([_transition(i) for i in range(4)])
        loss = update_safety_critic(bundle, batch, np.random.default_rng(0))
        assert np.isfinite(loss)
        assert not np.array_equal(before[0], bundle.q_safe.weights[0])
        assert not np.array_equal(before[1], bundle.q_safe2.weights[0])

    def test_policy_loss_uses_the_smaller_critic(self):
        rng = np.random.default_rng(4)
        obs, xi = rng.standard_normal((5, 2)), rng.standard_normal((5, 1))
        bundle = init_bundle(2, 1, AgentConfig(hidden_width=8, hidden_layers=1, twin_safety=True), seed=0)
        bundle.policy = _linear(np.zeros((2, 2)), [0.3, np.log(0.5)])
        bundle.q1, bundle.q2 = _const(3, 0.0), _const(3, 0.0)
        bundle.q_safe, bundle.q_safe2 = _const(3, 0.3), _const(3, -0.2)
        bundle.lam = 1.0
        twin_loss, _ = policy_loss_and_grads(bundle, obs, xi)
        bundle.q_safe2 = None
        single_loss, _ = policy_loss_and_grads(bundle, obs, xi)
        assert twin_loss - single_loss == pytest.approx(0.5)

    def test_policy_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        bundle = init_bundle(5, 2, AgentConfig(hidden_width=16, hidden_layers=2, twin_safety=True), seed=3)
        bundle.q1 = _linear(rng.standard_normal((1, 7)), [0.0])
        bundle.q2 = _linear(rng.standard_normal((1, 7)), [50.0])
        bundle.q_safe = _linear(rng.standard_normal((1, 7)), [0.1])
        bundle.q_safe2 = _linear(rng.standard_normal((1, 7)), [-50.0])
        bundle.lam = 0.7
        obs, xi = rng.standard_normal((8, 5)), rng.standard_normal((8, 2))

        _, grads = policy_loss_and_grads(bundle, obs, xi)
        eps = 1e-6
        for k, p in enumerate(bundle.policy.parameters()):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + eps
                up = policy_loss_and_grads(bundle, obs, xi)[0]
                p[idx] = old - eps
                down = policy_loss_and_grads(bundle, obs, xi)[0]
                p[idx] = old
                assert grads[k][idx] == pytest.approx((up - down) / (2 * eps), rel=1e-3, abs=1e-6)

    def test_checkpoint_round_trip(self):
        cfg = AgentConfig(hidden_width=8, hidden_layers=2, twin_safety=True)
        bundle = init_bundle(11, 2, cfg, seed=4)
        ckpt = checkpoint_from_bytes(checkpoint_bytes(bundle_to_checkpoint(bundle)))
        restored = bundle_from_checkpoint(ckpt, 11, 2, cfg)
        for name in ("q_safe2", "q_safe2_target"):
            for p, q in zip(getattr(bundle, name).parameters(), getattr(restored, name).parameters()):
                assert np.array_equal(p, q)
        assert "q_safe2" in restored.optims

    def test_single_checkpoint_rejected_by_twin_config(self):
        ckpt = bundle_to_checkpoint(init_bundle(11, 2, AgentConfig(hidden_width=8, hidden_layers=2), seed=0))
        with pytest.raises(CheckpointError):
            bundle_from_checkpoint(ckpt, 11, 2, AgentConfig(hidden_width=8, hidden_layers=2, twin_safety=True))



class TestDualAndTemperature:
    """λ and α updates."""

    def test_dual_step_increases_when_unsafe(self):
        assert dual_step(0.1, -0.2, 0.0, 3e-5) == pytest.approx(0.1 + 6e-6)

    def test_dual_step_projects_to_zero(self):
        assert dual_step(0.0, 1.0, 0.0, 3e-5) == 0.0

    def test_lambda_stream_unsafe_grows(self):
        lam, history = 0.5, []
        for _ in range(100):
            lam = dual_step(lam, -0.2, 0.0, 3e-5)
            history.append(lam)
        assert all(b > a for a, b in zip(history, history[1:]))

    def test_lambda_stream_safe_hits_zero_and_stays(self):
        lam, history = 1e-4, []
        for _ in range(100):
            lam = dual_step(lam, 0.2, 0.0, 3e-5)
            history.append(lam)
        assert all(v >= 0.0 for v in history)
        assert history[-1] == 0.0
        first_zero = history.index(0.0)
        assert all(v == 0.0 for v in history[first_zero:])

    def test_update_lambda_unconstrained(self):
        bundle = init_bundle(3, 1, AgentConfig(hidden_width=8, hidden_layers=1, constrained=False), seed=0)
        assert bundle.lam == 0.0
        batch = Batch.from_transitions([_transition(i) for i in range(4)])
        assert update_lambda(bundle, batch, np.random.default_rng(0)) == 0.0

    def test_update_lambda_constrained(self):
        bundle = init_bundle(3, 1, AgentConfig(hidden_width=8, hidden_layers=1, lambda_lr=3e-5), seed=0)
        bundle.q_safe = _const(4, -0.2)
        bundle.lam = 0.1
        batch = Batch.from_transitions([_transition(i) for i in range(4)])
        assert update_lambda(bundle, batch, np.random.default_rng(0)) == pytest.approx(0.1 + 6e-6)

    def test_temperature_gradient_constant(self):
        assert temperature_gradient(np.log(0.5), np.array([-1.0, -3.0]), -2.0) == pytest.approx(2.0)

    def test_temperature_gradient_closed_form(self):
        sigma = 0.5
        net = _linear(np.zeros((2, 1)), [0.0, np.log(sigma)])
        _, logp = sample_action(net, np.zeros((200_000, 1)), PolicyMode.stochastic, np.random.default_rng(0))

        p = np.linspace(-8 * sigma, 8 * sigma, 40_001)
        density = np.exp(-0.5 * (p / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
        entropy = 0.5 * np.log(2 * np.pi * np.e * sigma ** 2) + np.trapezoid(density * np.log(1 - np.tanh(p) ** 2), p)

        assert -np.mean(logp) == pytest.approx(entropy, abs=0.01)
        grad = temperature_gradient(np.log(0.2), logp, -1.0)
        assert grad == pytest.approx(0.2 * (entropy + 1.0), abs=0.01)

    def test_update_temperature_lowers_alpha_when_entropy_high(self):
        bundle = init_bundle(3, 2, AgentConfig(hidden_width=8, hidden_layers=1), seed=0)
        batch = Batch.from_transitions([_transition(0, d=2)] * 8)
        before = bundle.alpha
        assert update_temperature(bundle, batch, np.random.default_rng(0)) < before


class TestPolyak:
    def test_tau_one_copies(self):
        main, target = _linear([[1.0, 2.0]], [3.0]), _linear([[0.0, 0.0]], [0.0])
        polyak_update(main, target, 1.0)
        assert np.array_equal(target.weights[0], [[1.0, 2.0]])

    def test_half_step(self):
        main, target = _linear([[1.0, 2.0]], [3.0]), _linear([[3.0, 0.0]], [1.0])
        polyak_update(main, target, 0.5)
        assert np.allclose(target.weights[0], [[2.0, 1.0]])
        assert np.allclose(target.biases[0], [2.0])
        assert np.array_equal(main.weights[0], [[1.0, 2.0]])

    @pytest.mark.parametrize("tau", [0.0, 1.5])
    def test_bad_tau(self, tau):
        with pytest.raises(DimensionError):
            polyak_update(_const(2, 0.0), _const(2, 0.0), tau)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            polyak_update(_const(2, 0.0), _const(3, 0.0), 0.5)


class TestBundleCheckpoint:
    def test_round_trip(self):
        cfg = AgentConfig(hidden_width=8, hidden_layers=2)
        bundle = init_bundle(11, 2, cfg, seed=4)
        bundle.lam, bundle.log_alpha = 0.37, -1.5
        ckpt = checkpoint_from_bytes(checkpoint_bytes(bundle_to_checkpoint(bundle, {"epoch": 3})))
        restored = bundle_from_checkpoint(ckpt, 11, 2, cfg)
        for name in ("policy", "q1", "q2", "q_safe", "q1_target", "q2_target", "q_safe_target"):
            for p, q in zip(getattr(bundle, name).parameters(), getattr(restored, name).parameters()):
                assert np.array_equal(p, q)
        assert restored.lam == 0.37
        assert restored.log_alpha == -1.5
        assert ckpt.scalars["epoch"] == 3
        assert set(restored.optims) == {"policy", "q1", "q2", "q_safe", "alpha"}

    def test_width_mismatch(self):
        bundle = init_bundle(11, 2, AgentConfig(hidden_width=8, hidden_layers=2), seed=0)
        ckpt = bundle_to_checkpoint(bundle)
        with pytest.raises(CheckpointError):
            bundle_from_checkpoint(ckpt, 11, 2, AgentConfig(hidden_width=16, hidden_layers=2))

    def test_same_seed_same_weights(self):
        cfg = AgentConfig(hidden_width=8, hidden_layers=2)
        a, b = init_bundle(11, 2, cfg, seed=9), init_bundle(11, 2, cfg, seed=9)
        assert np.array_equal(a.policy.weights[0], b.policy.weights[0])
        assert np.array_equal(a.q_safe.weights[-1], b.q_safe.weights[-1])


class TestTraining:
    """Short end-to-end training runs on the default environment."""

    def _run(self, default_config, default_env, default_codec, default_captions, **update):
        cfg = _tiny_agent_config(default_config, **update)
        return train(
            default_env, default_codec, cfg, default_captions[::4], seed=0,
            ell_fn=make_ell_fn(default_env, default_codec, default_config.target),
            reward_fn=make_reward_fn(default_env),
        )

    def test_deterministic(self, default_config, default_env, default_codec, default_captions):
        a = self._run(default_config, default_env, default_codec, default_captions)
        b = self._run(default_config, default_env, default_codec, default_captions)
        assert a.log == b.log
        for p, q in zip(a.bundle.policy.parameters(), b.bundle.policy.parameters()):
            assert np.array_equal(p, q)

    def test_log_records(self, default_config, default_env, default_codec, default_captions):
        result = self._run(default_config, default_env, default_codec, default_captions)
        assert [r["epoch"] for r in result.log] == [1, 2]
        for key in ("updates", "task_critic_loss", "safety_critic_loss", "policy_loss", "lambda", "alpha",
                    "mean_q_safe", "train_reward", "train_failure_rate", "eval_score"):
            assert key in result.log[0]
        assert result.log[0]["updates"] == 4 * default_env.T
        assert result.best_epoch in (1, 2)
        assert result.best_score == max(r["eval_score"] for r in result.log)

    def test_unconstrained_keeps_lambda_at_zero(self, default_config, default_env, default_codec, default_captions):
        result = self._run(default_config, default_env, default_codec, default_captions, constrained=False)
        assert all(r["lambda"] == 0.0 for r in result.log)

    def test_zero_epochs(self, default_config, default_env, default_codec, default_captions):
        result = self._run(default_config, default_env, default_codec, default_captions, epochs=0)
        assert result.log == []
        assert result.best_epoch == 0
        assert result.best_score is None

    def test_divergence_aborts_with_state(self, default_config, default_env, default_codec, default_captions):
        with pytest.raises(DivergenceError) as exc:
            self._run(default_config, default_env, default_codec, default_captions, divergence_threshold=1e-12)
        assert exc.value.bundle is not None
        assert exc.value.exit_code == 3


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
