"""
Constrained soft actor-critic.

The agent maximizes the sparse alignment reward while keeping a learned
safety value above δ:

    max_φ  E[ min(Q₁, Q₂)(s, u) − α·log π(u|s) + λ·Q_safe(s, u) ]
    λ ← max(0, λ − lr_λ · (E[Q_safe] − δ))

Q_safe is trained on the discounted safety backup (see
reachability.safety_backup); the task critics use the usual soft Bellman
target with twin-minimum bootstrapping. Freezing λ at 0 recovers plain SAC,
which is the ablation arm.

Networks are `approximator.Net`s and all gradients are assembled by hand
here, so each update function spells out the chain rule it relies on.
"""

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from rads.approximator import (
    Checkpoint,
    Net,
    OptimState,
    adam_step,
    backward,
    forward,
    forward_cached,
    init_net,
    mlp_widths,
)
from rads.codec import CodecParams
from rads.dynamics import CaptionEmbedding, Policy, SystemState, ToyDenoiser, Transition, rollout
from rads.errors import CheckpointError, DimensionError, DivergenceError, NumericError, RadsError
from rads.models.schemas import AgentConfig, PolicyMode
from rads.reachability import safety_backup

logger = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


# ── Replay buffer ───────────────────────────────────────────────────

@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    ell: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray
    ell_terminal: np.ndarray

    @classmethod
    def from_transitions(cls, transitions: list[Transition]) -> "Batch":
        if not transitions:
            raise DimensionError("cannot build an empty batch")
        return cls(
            obs=np.stack([t.observation for t in transitions]),
            actions=np.stack([t.action for t in transitions]),
            rewards=np.array([t.reward for t in transitions]),
            ell=np.array([t.ell for t in transitions]),
            next_obs=np.stack([t.next_observation for t in transitions]),
            terminal=np.array([t.terminal for t in transitions], dtype=bool),
            ell_terminal=np.array([t.ell_terminal for t in transitions]),
        )

    def __len__(self) -> int:
        return len(self.rewards)


class ReplayBuffer:
    """Bounded FIFO store with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise DimensionError(f"replay capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def push(self, transitions: list[Transition]) -> None:
        self._items.extend(transitions)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if len(self._items) < batch_size:
            raise RadsError(f"buffer holds {len(self._items)} transitions, fewer than batch size {batch_size}")
        idx = rng.integers(0, len(self._items), size=batch_size)
        return Batch.from_transitions([self._items[i] for i in idx])


# ── Bundle ──────────────────────────────────────────────────────────

CRITICS = ("q1", "q2", "q_safe")


@dataclass
class AgentBundle:
    policy: Net
    q1: Net
    q2: Net
    q_safe: Net
    q1_target: Net
    q2_target: Net
    q_safe_target: Net
    log_alpha: float
    lam: float
    target_entropy: float
    config: AgentConfig
    optims: dict[str, OptimState] = field(default_factory=dict)
    q_safe2: Net | None = None
    q_safe2_target: Net | None = None

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    @property
    def gamma(self) -> float:
        return self.config.gamma

    @property
    def d(self) -> int:
        return self.policy.output_dim // 2

    @property
    def obs_dim(self) -> int:
        return self.policy.input_dim

    @property
    def critic_names(self) -> tuple[str, ...]:
        return CRITICS + (("q_safe2",) if self.q_safe2 is not None else ())

    @property
    def safety_critics(self) -> list[Net]:
        return [self.q_safe] if self.q_safe2 is None else [self.q_safe, self.q_safe2]

    @property
    def safety_target_nets(self) -> list[Net]:
        return [self.q_safe_target] if self.q_safe2_target is None else [self.q_safe_target, self.q_safe2_target]

    def copy(self) -> "AgentBundle":
        return AgentBundle(
            policy=self.policy.copy(),
            q1=self.q1.copy(), q2=self.q2.copy(), q_safe=self.q_safe.copy(),
            q1_target=self.q1_target.copy(), q2_target=self.q2_target.copy(),
            q_safe_target=self.q_safe_target.copy(),
            log_alpha=self.log_alpha, lam=self.lam, target_entropy=self.target_entropy,
            config=self.config, optims={k: v.copy() for k, v in self.optims.items()},
            q_safe2=None if self.q_safe2 is None else self.q_safe2.copy(),
            q_safe2_target=None if self.q_safe2_target is None else self.q_safe2_target.copy(),
        )


def init_bundle(obs_dim: int, d: int, cfg: AgentConfig, seed: int) -> AgentBundle:
    """Fresh bundle; identical (obs_dim, d, cfg, seed) give identical weights."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    hw, hl = cfg.hidden_width, cfg.hidden_layers
    policy = init_net(mlp_widths(obs_dim, 2 * d, hw, hl), rng)
    critics = {name: init_net(mlp_widths(obs_dim + d, 1, hw, hl), rng) for name in CRITICS}
    bundle = AgentBundle(
        policy=policy,
        q1=critics["q1"], q2=critics["q2"], q_safe=critics["q_safe"],
        q1_target=critics["q1"].copy(), q2_target=critics["q2"].copy(), q_safe_target=critics["q_safe"].copy(),
        log_alpha=float(np.log(cfg.alpha_init)),
        lam=cfg.lambda_init if cfg.constrained else 0.0,
        target_entropy=-float(d),
        config=cfg,
    )
    bundle.optims = {
        "policy": OptimState.for_params(policy.parameters(), cfg.actor_lr),
        "q1": OptimState.for_params(bundle.q1.parameters(), cfg.critic_lr),
        "q2": OptimState.for_params(bundle.q2.parameters(), cfg.critic_lr),
        "q_safe": OptimState.for_params(bundle.q_safe.parameters(), cfg.critic_lr),
        "alpha": OptimState.for_params([np.zeros(1)], cfg.alpha_lr),
    }
    if cfg.twin_safety:
        bundle.q_safe2 = init_net(mlp_widths(obs_dim + d, 1, hw, hl), rng)
        bundle.q_safe2_target = bundle.q_safe2.copy()
        bundle.optims["q_safe2"] = OptimState.for_params(bundle.q_safe2.parameters(), cfg.critic_lr)
    return bundle


# ── Policy ──────────────────────────────────────────────────────────

def _log1m_tanh_sq(pre: np.ndarray) -> np.ndarray:
    """log(1 − tanh²(p)) without cancellation."""
    return 2.0 * (np.log(2.0) - pre - np.logaddexp(0.0, -2.0 * pre))


@dataclass
class PolicySample:
    action: np.ndarray
    log_prob: np.ndarray
    pre: np.ndarray
    xi: np.ndarray
    std: np.ndarray
    raw_log_std: np.ndarray
    cache: object


def _policy_sample(policy: Net, obs: np.ndarray, xi: np.ndarray) -> PolicySample:
    out, cache = forward_cached(policy, obs)
    d = policy.output_dim // 2
    mean, raw = out[:, :d], out[:, d:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    pre = mean + std * xi
    action = np.tanh(pre)
    log_prob = np.sum(-0.5 * xi ** 2 - log_std - _HALF_LOG_2PI - _log1m_tanh_sq(pre), axis=1)
    return PolicySample(action, log_prob, pre, xi, std, raw, cache)


def sample_action(
    policy: Net,
    observation: np.ndarray,
    mode: PolicyMode,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray | float]:
    """Squashed-Gaussian action and its log-density.

    Works on one observation or a batch. Deterministic mode returns
    tanh(mean) and the density at that point.
    """
    obs = np.asarray(observation, dtype=np.float64)
    single = obs.ndim == 1
    batch = obs[None, :] if single else obs
    if batch.shape[1] != policy.input_dim:
        raise DimensionError(f"observation width {batch.shape[1]} does not match policy input {policy.input_dim}")
    d = policy.output_dim // 2
    if PolicyMode(mode) == PolicyMode.deterministic:
        xi = np.zeros((len(batch), d))
    else:
        if rng is None:
            raise DimensionError("stochastic sampling needs an rng")
        xi = rng.standard_normal((len(batch), d))
    s = _policy_sample(policy, batch, xi)
    if single:
        return s.action[0], float(s.log_prob[0])
    return s.action, s.log_prob


def make_policy(policy: Net, mode: PolicyMode) -> Policy:
    """Freeze a policy snapshot into an action source for rollouts."""
    snapshot = policy.copy()

    def act(observation: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return sample_action(snapshot, observation, mode, rng)[0]
    return act


# ── Reward ──────────────────────────────────────────────────────────

def compute_reward(final_state: SystemState, e_base: CaptionEmbedding, env: ToyDenoiser) -> float:
    """Cosine between the image feature of x_0 and the base caption; 0 before T."""
    if final_state.step < env.T:
        return 0.0
    feat = env.image_feature(np.asarray(final_state.x, dtype=np.float64))
    emb = np.asarray(e_base.e, dtype=np.float64)
    nf, ne = np.linalg.norm(feat), np.linalg.norm(emb)
    if nf == 0.0 or ne == 0.0:
        logger.warning("Zero-norm vector in reward for caption '%s'; reward set to 0", e_base.caption_id)
        return 0.0
    return float(np.clip(feat @ emb / (nf * ne), -1.0, 1.0))


def make_reward_fn(env: ToyDenoiser):
    def reward(state: SystemState, e_base: CaptionEmbedding) -> float:
        return compute_reward(state, e_base, env)
    return reward


# ── Critic helpers ──────────────────────────────────────────────────

def q_value(net: Net, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return forward(net, np.concatenate([obs, actions], axis=1))[:, 0]


def safety_value(bundle: AgentBundle, obs: np.ndarray, actions: np.ndarray, target: bool = False) -> np.ndarray:
    """Q_safe; with twin safety critics, the smaller of the two."""
    nets = bundle.safety_target_nets if target else bundle.safety_critics
    return np.min([q_value(net, obs, actions) for net in nets], axis=0)


def _check_loss(name: str, loss: float) -> float:
    if not np.isfinite(loss):
        raise NumericError(f"{name} loss is not finite", detail={"loss": loss})
    return loss


def _regress(bundle: AgentBundle, name: str, obs: np.ndarray, actions: np.ndarray, targets: np.ndarray) -> float:
    """One Adam step of MSE regression for critic `name`; returns the loss before the step."""
    net = getattr(bundle, name)
    sa = np.concatenate([obs, actions], axis=1)
    pred, cache = forward_cached(net, sa)
    err = pred[:, 0] - targets
    loss = _check_loss(name, float(np.mean(err ** 2)))
    grads, _ = backward(net, sa, (2.0 * err / len(err))[:, None], cache)
    adam_step(bundle.optims[name], net.parameters(), grads)
    return loss


def _fresh_actions(bundle: AgentBundle, obs: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    return sample_action(bundle.policy, obs, PolicyMode.stochastic, rng)


# ── Updates ─────────────────────────────────────────────────────────

def safety_targets(bundle: AgentBundle, batch: Batch, rng: np.random.Generator) -> np.ndarray:
    u_next, _ = _fresh_actions(bundle, batch.next_obs, rng)
    q_next = safety_value(bundle, batch.next_obs, u_next, target=True)
    return safety_backup(batch.ell, q_next, bundle.gamma, batch.terminal, batch.ell_terminal)


def update_safety_critic(bundle: AgentBundle, batch: Batch, rng: np.random.Generator) -> float:
    targets = safety_targets(bundle, batch, rng)
    names = ("q_safe", "q_safe2") if bundle.q_safe2 is not None else ("q_safe",)
    return sum(_regress(bundle, name, batch.obs, batch.actions, targets) for name in names)


def task_targets(bundle: AgentBundle, batch: Batch, rng: np.random.Generator) -> np.ndarray:
    u_next, logp_next = _fresh_actions(bundle, batch.next_obs, rng)
    q_next = np.minimum(
        q_value(bundle.q1_target, batch.next_obs, u_next),
        q_value(bundle.q2_target, batch.next_obs, u_next),
    )
    soft = q_next - bundle.alpha * logp_next
    return np.where(batch.terminal, batch.rewards, batch.rewards + bundle.gamma * soft)


def update_task_critics(bundle: AgentBundle, batch: Batch, rng: np.random.Generator) -> float:
    targets = task_targets(bundle, batch, rng)
    return (
        _regress(bundle, "q1", batch.obs, batch.actions, targets)
        + _regress(bundle, "q2", batch.obs, batch.actions, targets)
    )


def _critic_action_grad(net: Net, obs: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sa = np.concatenate([obs, actions], axis=1)
    q, cache = forward_cached(net, sa)
    _, grad_in = backward(net, sa, np.ones_like(q), cache)
    return q[:, 0], grad_in[:, obs.shape[1]:]


def policy_loss_and_grads(bundle: AgentBundle, obs: np.ndarray, xi: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Loss J = mean(α·log π − min(Q₁,Q₂) − λ·Q_safe) at fixed noise xi, and ∂J/∂φ.

    Twin safety critics enter as min(Q_safe, Q_safe2), like the task pair.

    With p = μ + σ·ξ and u = tanh(p):
      ∂u/∂p = 1 − u²,  ∂log π/∂p = 2u,  ∂log π/∂log σ (direct) = −1,  ∂p/∂log σ = σ·ξ
    """
    s = _policy_sample(bundle.policy, obs, xi)
    n = len(obs)
    alpha, lam = bundle.alpha, bundle.lam

    q1, dq1 = _critic_action_grad(bundle.q1, obs, s.action)
    q2, dq2 = _critic_action_grad(bundle.q2, obs, s.action)
    qs, dqs = _critic_action_grad(bundle.q_safe, obs, s.action)
    if bundle.q_safe2 is not None:
        qs2, dqs2 = _critic_action_grad(bundle.q_safe2, obs, s.action)
        dqs = np.where((qs <= qs2)[:, None], dqs, dqs2)
        qs = np.minimum(qs, qs2)
    use_q1 = (q1 <= q2)[:, None]
    dqmin = np.where(use_q1, dq1, dq2)

    loss = float(np.mean(alpha * s.log_prob - np.minimum(q1, q2) - lam * qs))

    d_action = -(dqmin + lam * dqs) / n
    d_pre = d_action * (1.0 - s.action ** 2) + (alpha / n) * 2.0 * s.action
    d_mean = d_pre
    d_log_std = d_pre * s.std * s.xi - alpha / n
    d_raw = d_log_std * ((s.raw_log_std > LOG_STD_MIN) & (s.raw_log_std < LOG_STD_MAX))
    grads, _ = backward(bundle.policy, obs, np.concatenate([d_mean, d_raw], axis=1), s.cache)
    return loss, grads


def update_policy(bundle: AgentBundle, batch: Batch, rng: np.random.Generator) -> float:
    xi = rng.standard_normal((len(batch), bundle.d))
    loss, grads = policy_loss_and_grads(bundle, batch.obs, xi)
    _check_loss("policy", loss)
    adam_step(bundle.optims["policy"], bundle.policy.parameters(), grads)
    return loss


def dual_step(lam: float, mean_q_safe: float, delta: float, lr: float) -> float:
    """Projected dual descent: λ grows while E[Q_safe] < δ."""
    return max(0.0, lam - lr * (mean_q_safe - delta))


def mean_safety_value(bundle: AgentBundle, batch: Batch, rng: np.random.Generator) -> float:
    u, _ = _fresh_actions(bundle, batch.obs, rng)
    return float(np.mean(safety_value(bundle, batch.obs, u)))


def update_lambda(bundle: AgentBundle, batch: Batch, rng: np.random.Generator, mean_q: float | None = None) -> float:
    if not bundle.config.constrained:
        bundle.lam = 0.0
        return 0.0
    if mean_q is None:
        mean_q = mean_safety_value(bundle, batch, rng)
    bundle.lam = dual_step(bundle.lam, mean_q, bundle.config.delta, bundle.config.lambda_lr)
    return bundle.lam


def temperature_gradient(log_alpha: float, log_probs: np.ndarray, target_entropy: float) -> float:
    """∂/∂log α of E[−α·(log π + H̄)]."""
    return -float(np.exp(log_alpha)) * float(np.mean(np.asarray(log_probs) + target_entropy))


def update_temperature(bundle: AgentBundle, batch: Batch, rng: np.random.Generator) -> float:
    _, logp = _fresh_actions(bundle, batch.obs, rng)
    grad = temperature_gradient(bundle.log_alpha, logp, bundle.target_entropy)
    param = np.array([bundle.log_alpha])
    adam_step(bundle.optims["alpha"], [param], [np.array([grad])])
    bundle.log_alpha = float(param[0])
    return bundle.alpha


def polyak_update(main: Net, target: Net, tau: float) -> Net:
    """target ← (1−τ)·target + τ·main, in place."""
    if not 0.0 < tau <= 1.0:
        raise DimensionError(f"polyak tau must lie in (0, 1], got {tau}")
    main_params, target_params = main.parameters(), target.parameters()
    if [p.shape for p in main_params] != [p.shape for p in target_params]:
        raise DimensionError("polyak update between networks of different shapes")
    for m, t in zip(main_params, target_params):
        t *= 1.0 - tau
        t += tau * m
    return target


# ── Checkpointing ───────────────────────────────────────────────────

_NETS = ("policy", "q1", "q2", "q_safe", "q1_target", "q2_target", "q_safe_target")
_TWIN_NETS = ("q_safe2", "q_safe2_target")


def _net_names(bundle: AgentBundle) -> tuple[str, ...]:
    return _NETS + (_TWIN_NETS if bundle.q_safe2 is not None else ())


def bundle_to_checkpoint(bundle: AgentBundle, extra: dict | None = None) -> Checkpoint:
    ckpt = Checkpoint()
    for name in _net_names(bundle):
        ckpt.add_net(name, getattr(bundle, name))
    for name, state in bundle.optims.items():
        ckpt.add_optim(f"optim.{name}", state)
    ckpt.scalars.update({
        "log_alpha": bundle.log_alpha,
        "lambda": bundle.lam,
        "target_entropy": bundle.target_entropy,
        "agent_config": bundle.config.model_dump(mode="json"),
    })
    ckpt.scalars.update(extra or {})
    return ckpt


def bundle_from_checkpoint(ckpt: Checkpoint, obs_dim: int, d: int, cfg: AgentConfig) -> AgentBundle:
    """Rebuild a bundle, rejecting checkpoints whose shapes disagree with the config."""
    expected = init_bundle(obs_dim, d, cfg, seed=0)
    nets = {}
    for name in _net_names(expected):
        net = ckpt.get_net(name)
        want = getattr(expected, name).widths
        if net.widths != want:
            raise CheckpointError(
                f"checkpoint network '{name}' has widths {net.widths}, config expects {want}",
                detail={"network": name, "found": net.widths, "expected": want},
            )
        nets[name] = net
    try:
        scalars = (float(ckpt.scalars["log_alpha"]), float(ckpt.scalars["lambda"]), float(ckpt.scalars["target_entropy"]))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing scalar {exc}") from exc
    bundle = AgentBundle(
        **nets, log_alpha=scalars[0], lam=scalars[1], target_entropy=scalars[2], config=cfg,
    )
    bundle.optims = {
        name: ckpt.get_optim(f"optim.{name}", len(state.m))
        for name, state in expected.optims.items()
    }
    return bundle


# ── Training ────────────────────────────────────────────────────────

@dataclass
class TrainResult:
    bundle: AgentBundle
    best: AgentBundle
    best_epoch: int
    best_score: float | None
    log: list[dict]


def collect_rollouts(
    env: ToyDenoiser,
    codec: CodecParams,
    jobs: list[tuple[CaptionEmbedding, int, int]],
    policy: Policy,
    ell_fn,
    reward_fn,
    threads: int = 1,
) -> list[list[Transition]]:
    """Run (caption, seed, episode) jobs; results come back in job order."""
    def run(job):
        caption, seed, episode = job
        return rollout(env, codec, caption, policy, seed, ell_fn=ell_fn, reward_fn=reward_fn, episode=episode)

    if threads <= 1:
        return [run(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, jobs))


def selection_score(episodes: list[list[Transition]]) -> float:
    """Mean r(s_T) + ℓ(s_T) over finished episodes."""
    return float(np.mean([ep[-1].reward + ep[-1].ell_terminal for ep in episodes]))


def train(
    env: ToyDenoiser,
    codec: CodecParams,
    cfg: AgentConfig,
    captions: list[CaptionEmbedding],
    seed: int,
    *,
    ell_fn,
    reward_fn,
    epochs: int | None = None,
    threads: int = 1,
    on_epoch=None,
) -> TrainResult:
    """Collect, update, evaluate; keeps the bundle with the best selection score.

    `on_epoch(record)` is called after every epoch (the harness streams the
    JSON-lines log from it).
    """
    epochs = cfg.epochs if epochs is None else epochs
    bundle = init_bundle(env.observation_dim, env.cfg.d, cfg, seed)
    best, best_epoch, best_score = bundle.copy(), 0, None
    log: list[dict] = []
    if epochs == 0:
        return TrainResult(bundle, best, best_epoch, best_score, log)
    if not captions:
        raise DimensionError("training needs at least one caption")

    buffer = ReplayBuffer(cfg.replay_capacity)
    update_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    eval_policy_seeds = list(range(cfg.eval_seeds))

    for epoch in range(1, epochs + 1):
        first = (epoch - 1) * cfg.rollouts_per_epoch
        jobs = [
            (captions[(first + i) % len(captions)], seed, first + i)
            for i in range(cfg.rollouts_per_epoch)
        ]
        episodes = collect_rollouts(
            env, codec, jobs, make_policy(bundle.policy, PolicyMode.stochastic), ell_fn, reward_fn, threads
        )
        new_steps = 0
        for ep in episodes:
            buffer.push(ep)
            new_steps += len(ep)

        losses = {"task": [], "safety": [], "policy": []}
        mean_q_safe = []
        n_updates = cfg.updates_per_step * new_steps if len(buffer) >= cfg.batch_size else 0
        for _ in range(n_updates):
            batch = buffer.sample(cfg.batch_size, update_rng)
            losses["task"].append(update_task_critics(bundle, batch, update_rng))
            losses["safety"].append(update_safety_critic(bundle, batch, update_rng))
            losses["policy"].append(update_policy(bundle, batch, update_rng))
            update_temperature(bundle, batch, update_rng)
            mean_q_safe.append(mean_safety_value(bundle, batch, update_rng))
            update_lambda(bundle, batch, update_rng, mean_q_safe[-1])
            for name in bundle.critic_names:
                polyak_update(getattr(bundle, name), getattr(bundle, f"{name}_target"), cfg.polyak_tau)

            worst = max(losses["task"][-1], losses["safety"][-1], abs(losses["policy"][-1]))
            if worst > cfg.divergence_threshold:
                raise DivergenceError(
                    f"training diverged at epoch {epoch}: loss {worst:.3e} exceeds {cfg.divergence_threshold:.1e}",
                    detail={"epoch": epoch, "loss": worst},
                    bundle=bundle,
                )

        record = {
            "epoch": epoch,
            "updates": n_updates,
            "task_critic_loss": _mean_or_none(losses["task"]),
            "safety_critic_loss": _mean_or_none(losses["safety"]),
            "policy_loss": _mean_or_none(losses["policy"]),
            "lambda": bundle.lam,
            "alpha": bundle.alpha,
            "mean_q_safe": _mean_or_none(mean_q_safe),
            "train_reward": float(np.mean([ep[-1].reward for ep in episodes])),
            "train_failure_rate": float(np.mean([_failed(ep) for ep in episodes])),
        }

        if epoch % cfg.eval_every == 0:
            eval_jobs = [
                (caption, s, i) for s in eval_policy_seeds for i, caption in enumerate(captions)
            ]
            eval_eps = collect_rollouts(
                env, codec, eval_jobs, make_policy(bundle.policy, PolicyMode.deterministic), ell_fn, reward_fn, threads
            )
            score = selection_score(eval_eps)
            record["eval_score"] = score
            if best_score is None or score > best_score:
                best, best_epoch, best_score = bundle.copy(), epoch, score
                record["best"] = True

        logger.info(
            "epoch %d: updates=%d lambda=%.5f alpha=%.4f E[Q_safe]=%s train_failure=%.3f%s",
            epoch, n_updates, bundle.lam, bundle.alpha,
            "n/a" if record["mean_q_safe"] is None else f"{record['mean_q_safe']:.4f}",
            record["train_failure_rate"],
            f" eval_score={record['eval_score']:.4f}" if "eval_score" in record else "",
        )
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)

    return TrainResult(bundle, best, best_epoch, best_score, log)


def _mean_or_none(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def _failed(episode: list[Transition]) -> bool:
    return min(min(t.ell for t in episode), episode[-1].ell_terminal) <= 0.0
