"""
Controlled denoising dynamics and the toy denoiser environment.

The sampler is treated as a discrete-time control system. The state is the
current latent together with the number of denoising steps already taken;
the control is a steering vector u that perturbs the caption embedding
before it conditions the noise predictor:

    x' = x − α · (ε_u + g · (ε_c − ε_u)) + σ · ω

The learned noise predictor is replaced by an analytic attractor field:

    unconditional      ε_u = x − b
    plain caption      ε_c = x − A·e
    triggered caption  ε_c = gain · (x − M_k)

A caption is triggered by target k when it lies inside k's trigger ball.
The ball widens as the latent enters the basin around M_k,

    ρ_eff(x) = ρ · (1 + lock · exp(−‖x − M_k‖² / (2·w²)))

so once a trajectory is deep enough in the basin no bounded steering can
leave it. That is what gives the backward reachable tube its shape.

All heavy lifting is vectorized over a leading batch axis; the single-state
functions at the bottom of the file validate their inputs and delegate.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from rads.errors import ConfigError, DimensionError, TerminalStateError
from rads.models.schemas import EnvConfig, NoiseMode

logger = logging.getLogger(__name__)


# ── Domain types ────────────────────────────────────────────────────

@dataclass(frozen=True)
class SystemState:
    """Latent x after `step` denoising transitions (0 ≤ step ≤ T)."""

    x: np.ndarray
    step: int


@dataclass(frozen=True)
class CaptionEmbedding:
    e: np.ndarray
    caption_id: str = ""


@dataclass(frozen=True)
class NoiseDraw:
    omega: np.ndarray


@dataclass(frozen=True)
class Transition:
    """One step of experience.

    `ell` is ℓ at `state` under the steering actually applied, and
    `guidance_norm` the norm it was computed from. `ell_terminal` is the
    safety margin of the final state and is only meaningful when `terminal`.
    """

    state: SystemState
    observation: np.ndarray
    action: np.ndarray
    reward: float
    ell: float
    next_state: SystemState
    next_observation: np.ndarray
    terminal: bool
    ell_terminal: float = 0.0
    guidance_norm: float = 0.0


class Steering(Protocol):
    def steer(self, e: CaptionEmbedding, u: np.ndarray) -> CaptionEmbedding: ...


Policy = Callable[[np.ndarray, np.random.Generator], np.ndarray]
StateScore = Callable[[SystemState, CaptionEmbedding], float]
SafetyScore = Callable[[SystemState, CaptionEmbedding, CaptionEmbedding | None], float]


def zero_policy(d: int) -> Policy:
    """The unmitigated sampler: never steers."""
    def act(observation: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(d)
    return act


# ── Environment ─────────────────────────────────────────────────────

def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ToyDenoiser:
    """Immutable analytic denoiser built from an EnvConfig."""

    cfg: EnvConfig
    base: np.ndarray = field(repr=False)
    latent_map: np.ndarray = field(repr=False)      # A, shape (n_x, n_e)
    triggers: np.ndarray = field(repr=False)        # κ, shape (K, n_e)
    targets: np.ndarray = field(repr=False)         # M, shape (K, n_x)
    radii: np.ndarray = field(repr=False)           # ρ, shape (K,)

    @classmethod
    def from_config(cls, cfg: EnvConfig) -> "ToyDenoiser":
        base = cfg.base_attractor if cfg.base_attractor is not None else [0.0] * cfg.n_x
        latent_map = np.zeros((cfg.n_x, cfg.n_e))
        latent_map[:, :cfg.n_x] = cfg.latent_scale * np.eye(cfg.n_x)
        mts = cfg.memorized_targets
        env = cls(
            cfg=cfg,
            base=_frozen(base),
            latent_map=_frozen(latent_map),
            triggers=_frozen([m.trigger for m in mts]).reshape(len(mts), cfg.n_e),
            targets=_frozen([m.target for m in mts]).reshape(len(mts), cfg.n_x),
            radii=_frozen([m.radius for m in mts]),
        )
        logger.debug("Built toy denoiser: n_x=%d n_e=%d K=%d T=%d", cfg.n_x, cfg.n_e, len(mts), cfg.T)
        return env

    @property
    def T(self) -> int:
        return self.cfg.T

    @property
    def n_targets(self) -> int:
        return len(self.radii)

    @property
    def sigma(self) -> float:
        return self.cfg.noise_std if self.cfg.noise_mode == NoiseMode.DDPM else 0.0

    # -- batched field ------------------------------------------------

    def effective_radii(self, xs: np.ndarray) -> np.ndarray:
        """ρ_eff for every (latent, target) pair, shape (N, K)."""
        sq = ((xs[:, None, :] - self.targets[None, :, :]) ** 2).sum(axis=-1)
        lock = self.cfg.lock_strength * np.exp(-sq / (2.0 * self.cfg.basin_width ** 2))
        return self.radii[None, :] * (1.0 + lock)

    def trigger_index(self, xs: np.ndarray, es: np.ndarray) -> np.ndarray:
        """Index of the triggering target per row, −1 when untriggered.

        Nearest trigger wins; np.argmin keeps the lowest index on ties.
        """
        if self.n_targets == 0:
            return np.full(len(xs), -1)
        dist = np.linalg.norm(es[:, None, :] - self.triggers[None, :, :], axis=-1)
        inside = dist < self.effective_radii(xs)
        masked = np.where(inside, dist, np.inf)
        idx = np.argmin(masked, axis=1)
        return np.where(inside.any(axis=1), idx, -1)

    def unconditional_noise(self, xs: np.ndarray) -> np.ndarray:
        return xs - self.base

    def conditional_noise(self, xs: np.ndarray, es: np.ndarray) -> np.ndarray:
        eps = xs - es @ self.latent_map.T
        idx = self.trigger_index(xs, es)
        hit = idx >= 0
        if hit.any():
            eps[hit] = self.cfg.guidance_gain * (xs[hit] - self.targets[idx[hit]])
        return eps

    def guidance_batch(self, xs: np.ndarray, es: np.ndarray) -> np.ndarray:
        return self.conditional_noise(xs, es) - self.unconditional_noise(xs)

    def guidance_norms(self, xs: np.ndarray, es: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.guidance_batch(xs, es), axis=-1)

    def step_batch(self, xs: np.ndarray, es: np.ndarray, t: int, omegas: np.ndarray | None = None) -> np.ndarray:
        """Advance every row by one transition leaving step index t."""
        eps_u = self.unconditional_noise(xs)
        eps_c = self.conditional_noise(xs, es)
        g = self.cfg.guidance_scale
        nxt = xs - self.cfg.alpha(t) * (eps_u + g * (eps_c - eps_u))
        if omegas is not None and self.sigma > 0.0:
            nxt = nxt + self.sigma * omegas
        return nxt

    # -- helpers -------------------------------------------------------

    def initial_state(self, rng: np.random.Generator) -> SystemState:
        x = self.base + self.cfg.init_std * rng.standard_normal(self.cfg.n_x)
        return SystemState(x=x, step=0)

    def draw_noise(self, rng: np.random.Generator) -> NoiseDraw:
        if self.cfg.noise_mode == NoiseMode.DDIM:
            return NoiseDraw(np.zeros(self.cfg.n_x))
        return NoiseDraw(rng.standard_normal(self.cfg.n_x))

    def observe(self, state: SystemState, e_base: CaptionEmbedding) -> np.ndarray:
        """Policy observation: (x, t / T, base embedding)."""
        return np.concatenate([state.x, [state.step / self.T], e_base.e])

    @property
    def observation_dim(self) -> int:
        return self.cfg.n_x + 1 + self.cfg.n_e

    def image_feature(self, x: np.ndarray) -> np.ndarray:
        """Toy image feature: x padded into embedding space plus a fixed offset."""
        feat = np.zeros(self.cfg.n_e)
        feat[:self.cfg.n_x] = x
        if self.cfg.n_e > self.cfg.n_x:
            feat[self.cfg.n_x] += self.cfg.feature_offset
        return feat

    def distance_to_nearest_target(self, x: np.ndarray) -> float | None:
        if self.n_targets == 0:
            return None
        return float(np.min(np.linalg.norm(self.targets - x, axis=1)))

    def is_triggered(self, e: CaptionEmbedding, x: np.ndarray | None = None) -> bool:
        """Whether `e` sits in a trigger ball (outside any basin unless x is given)."""
        if self.n_targets == 0:
            return False
        if x is None:
            dist = np.linalg.norm(self.triggers - e.e, axis=1)
            return bool(np.any(dist < self.radii))
        return bool(self.trigger_index(x[None, :], e.e[None, :])[0] >= 0)


# ── Validation ──────────────────────────────────────────────────────

def _check_vector(name: str, v: np.ndarray, length: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (length,):
        raise DimensionError(f"{name} has shape {v.shape}, expected ({length},)")
    if not np.all(np.isfinite(v)):
        raise DimensionError(f"{name} has non-finite components")
    return v


def _check_timestep(env: ToyDenoiser, step: int) -> None:
    if not 1 <= step <= env.T:
        raise DimensionError(f"diffusion timestep {step} outside [1, {env.T}]")


# ── Operations ──────────────────────────────────────────────────────

def predict_noise(x: np.ndarray, e: CaptionEmbedding | None, step: int, env: ToyDenoiser) -> np.ndarray:
    """ε̂ at diffusion timestep `step` (1..T). e = None selects the unconditional branch.

    The conditional branch locks onto a memorized latent M_k when e lies
    within ρ_eff of trigger κ_k, where

        ρ_eff(x) = ρ_k · (1 + lock_strength · exp(−‖x − M_k‖² / (2·basin_width²)))

    so the trigger ball widens as the latent approaches M_k (up to 5ρ_k with
    the default lock strength). A caption that was inside the ball at the
    start gets harder to steer out the closer the sample has drifted.
    """
    _check_timestep(env, step)
    x = _check_vector("x", x, env.cfg.n_x)
    if e is None:
        return env.unconditional_noise(x[None, :])[0]
    ev = _check_vector("e", e.e, env.cfg.n_e)
    return env.conditional_noise(x[None, :], ev[None, :])[0]


def guidance_vector(x: np.ndarray, e: CaptionEmbedding, step: int, env: ToyDenoiser) -> np.ndarray:
    return predict_noise(x, e, step, env) - predict_noise(x, None, step, env)


def step(s: SystemState, e_steered: CaptionEmbedding, noise: NoiseDraw, env: ToyDenoiser) -> SystemState:
    if s.step >= env.T:
        raise TerminalStateError(f"cannot step terminal state (step {s.step} of {env.T})")
    x = _check_vector("x", s.x, env.cfg.n_x)
    ev = _check_vector("e", e_steered.e, env.cfg.n_e)
    omega = _check_vector("omega", noise.omega, env.cfg.n_x)
    nxt = env.step_batch(x[None, :], ev[None, :], s.step, omega[None, :])[0]
    return SystemState(x=nxt, step=s.step + 1)


def episode_rngs(seed: int, episode: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (environment, policy) streams for one episode."""
    env_seq, policy_seq = np.random.SeedSequence([seed, episode]).spawn(2)
    return np.random.default_rng(env_seq), np.random.default_rng(policy_seq)


def rollout(
    env: ToyDenoiser,
    codec: Steering,
    e_base: CaptionEmbedding,
    policy: Policy,
    seed: int,
    *,
    ell_fn: SafetyScore,
    reward_fn: StateScore,
    episode: int = 0,
) -> list[Transition]:
    """Run one episode of exactly T transitions.

    `ell_fn(state, e_base, e_steered)` scores each step under the applied
    steering and `ell_fn(final_state, e_base, None)` the final state;
    `reward_fn(final_state, e_base)` is the terminal alignment reward.
    """
    env_rng, policy_rng = episode_rngs(seed, episode)
    state = env.initial_state(env_rng)
    obs = env.observe(state, e_base)
    transitions = []
    for t in range(env.T):
        u = np.asarray(policy(obs, policy_rng), dtype=np.float64)
        if u.shape != (env.cfg.d,) or np.any(np.abs(u) > 1.0):
            raise DimensionError(f"policy produced action {u} outside [-1, 1]^{env.cfg.d}")
        e_steered = codec.steer(e_base, u)
        ell = ell_fn(state, e_base, e_steered)
        g_norm = float(env.guidance_norms(state.x[None, :], e_steered.e[None, :])[0])
        nxt = step(state, e_steered, env.draw_noise(env_rng), env)
        nxt_obs = env.observe(nxt, e_base)
        terminal = nxt.step == env.T
        transitions.append(Transition(
            state=state,
            observation=obs,
            action=u,
            reward=reward_fn(nxt, e_base) if terminal else 0.0,
            ell=ell,
            next_state=nxt,
            next_observation=nxt_obs,
            terminal=terminal,
            ell_terminal=ell_fn(nxt, e_base, None) if terminal else 0.0,
            guidance_norm=g_norm,
        ))
        state, obs = nxt, nxt_obs
    return transitions


# ── Caption sets ────────────────────────────────────────────────────

def _unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


def make_caption_set(cfg: EnvConfig, seed: int | None = None) -> list[CaptionEmbedding]:
    """Deterministic caption set: jittered triggers first, then plain captions.

    Every caption lives (up to a small off-subspace jitter) in the span of the
    first n_x embedding coordinates, which is what the latent map A reads.
    """
    cs = cfg.captions
    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
    n_x, n_e = cfg.n_x, cfg.n_e
    captions = []

    def off_subspace() -> np.ndarray:
        v = np.zeros(n_e)
        v[n_x:] = cs.off_subspace * rng.standard_normal(n_e - n_x)
        return v

    for k, mt in enumerate(cfg.memorized_targets):
        kappa = np.asarray(mt.trigger)
        for i in range(cs.triggered_per_target):
            offset = off_subspace()
            offset[:n_x] = cs.jitter * rng.standard_normal(n_x)
            norm = np.linalg.norm(offset)
            if norm > 0.6 * mt.radius:
                offset *= 0.6 * mt.radius / norm
            captions.append(CaptionEmbedding(kappa + offset, caption_id=f"trig{k}-{i}"))

    triggers = np.array([mt.trigger for mt in cfg.memorized_targets]).reshape(-1, n_e)
    clearance = np.array([2.0 * mt.radius for mt in cfg.memorized_targets])
    lo, hi = cs.plain_norm_range
    for i in range(cs.plain_captions):
        for _ in range(1000):
            e = off_subspace()
            e[:n_x] = rng.uniform(lo, hi) * _unit(rng, n_x)
            if len(triggers) == 0 or np.all(np.linalg.norm(triggers - e, axis=1) > clearance):
                break
        else:
            raise ConfigError("could not place plain captions clear of every trigger; reduce trigger radii")
        captions.append(CaptionEmbedding(e, caption_id=f"plain-{i}"))
    return captions


def triggered_captions(env: ToyDenoiser, captions: list[CaptionEmbedding]) -> list[CaptionEmbedding]:
    return [c for c in captions if env.is_triggered(c)]
