"""
RADS — Pydantic Data Models

Every config document and every report the harness writes is defined here
as a Pydantic model. Pydantic gives us:
  - Validation with field paths in the error (used for line-anchored
    diagnostics when a TOML config is wrong)
  - Range constraints on hyperparameters, declared next to the field
  - Serialization to JSON for reports and the HTTP service

The TOML config maps one-to-one onto RunConfig:

    schema_version = 1
    [env]      -> EnvConfig
    [codec]    -> CodecSpec
    [agent]    -> AgentConfig
    [target]   -> TargetFnParams
    [grid]     -> GridSpec
"""

from enum import Enum
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Enums
# ---------------------------------------------------------------------------

class NoiseMode(str, Enum):
    """Sampler noise convention. DDIM is deterministic, DDPM injects noise."""

    DDIM = "DDIM"
    DDPM = "DDPM"


class PolicyMode(str, Enum):
    """How actions are drawn from the squashed-Gaussian policy."""

    stochastic = "stochastic"          # reparameterized sample, used while collecting
    deterministic = "deterministic"    # squash(mean), used for evaluation


# ---------------------------------------------------------------------------
# [env]: toy denoiser
# ---------------------------------------------------------------------------

class MemorizedTarget(BaseModel):
    """One planted memorization: captions near `trigger` collapse onto `target`."""

    model_config = ConfigDict(frozen=True)

    trigger: list[float] = Field(description="Trigger embedding κ (length n_e).")
    target: list[float] = Field(description="Memorized latent M (length n_x).")
    radius: float = Field(gt=0, description="Trigger ball radius ρ in embedding space.")


class CaptionSetConfig(BaseModel):
    """How the environment's default caption set is drawn."""

    model_config = ConfigDict(frozen=True)

    triggered_per_target: int = Field(default=8, ge=0, description="Captions drawn inside each trigger ball.")
    plain_captions: int = Field(default=16, ge=0, description="Captions drawn away from every trigger.")
    jitter: float = Field(default=0.05, ge=0, description="In-subspace jitter around each trigger.")
    off_subspace: float = Field(default=0.02, ge=0, description="Jitter outside the caption subspace.")
    plain_norm_range: tuple[float, float] = Field(
        default=(0.6, 1.2), description="Norm range of plain captions inside the caption subspace."
    )
    heldout_seed: int = Field(default=1, description="Seed of the held-out caption set.")


class EnvConfig(BaseModel):
    """Controlled denoising system with planted memorization triggers."""

    model_config = ConfigDict(frozen=True)

    T: int = Field(default=20, ge=1, description="Horizon: number of denoising steps.")
    guidance_scale: float = Field(default=1.0, ge=0, description="Classifier-free guidance scale g.")
    noise_mode: NoiseMode = Field(default=NoiseMode.DDIM)
    n_x: int = Field(default=2, ge=1, description="Latent dimension.")
    n_e: int = Field(default=8, ge=1, description="Caption embedding dimension.")
    d: int = Field(default=2, ge=1, description="Latent action dimension.")
    memorized_targets: list[MemorizedTarget] = Field(default_factory=list)
    step_size: float = Field(default=0.15, gt=0, description="Constant α used when step_sizes is unset.")
    step_sizes: list[float] | None = Field(default=None, description="Per-step α schedule, length T.")
    noise_std: float = Field(default=0.05, ge=0, description="σ applied in DDPM mode.")
    guidance_gain: float = Field(default=2.0, gt=0, description="Stiffness of the triggered conditional branch.")
    lock_strength: float = Field(default=4.0, ge=0, description="Growth of the trigger radius inside a basin.")
    basin_width: float = Field(default=1.2, gt=0, description="Length scale of the basin lock-in.")
    latent_scale: float = Field(default=4.0, gt=0, description="Scale of the caption-to-latent map A.")
    base_attractor: list[float] | None = Field(default=None, description="Unconditional attractor b (length n_x).")
    feature_offset: float = Field(default=8.0, ge=0, description="Fixed off-subspace component of the image feature.")
    init_std: float = Field(default=1.0, ge=0, description="Std of the initial latent x_T around b.")
    rng_seed: int = Field(default=0)
    captions: CaptionSetConfig = Field(default_factory=CaptionSetConfig)

    @model_validator(mode="after")
    def _check_dimensions(self) -> "EnvConfig":
        if self.n_x > self.n_e:
            raise ValueError(f"n_x ({self.n_x}) must not exceed n_e ({self.n_e})")
        if self.d > self.n_e:
            raise ValueError(f"d ({self.d}) must not exceed n_e ({self.n_e})")
        if self.step_sizes is not None:
            if len(self.step_sizes) != self.T:
                raise ValueError(f"step_sizes has {len(self.step_sizes)} entries, expected T = {self.T}")
            if any(a <= 0 for a in self.step_sizes):
                raise ValueError("step_sizes must all be positive")
        if self.base_attractor is not None and len(self.base_attractor) != self.n_x:
            raise ValueError(f"base_attractor must have length n_x = {self.n_x}")
        for k, mt in enumerate(self.memorized_targets):
            if len(mt.trigger) != self.n_e:
                raise ValueError(f"memorized_targets[{k}].trigger must have length n_e = {self.n_e}")
            if len(mt.target) != self.n_x:
                raise ValueError(f"memorized_targets[{k}].target must have length n_x = {self.n_x}")
        return self

    def alpha(self, step: int) -> float:
        """α for the transition leaving step index `step` (0-based)."""
        if self.step_sizes is not None:
            return self.step_sizes[step]
        return self.step_size


# ---------------------------------------------------------------------------
# [codec], [target], [grid]
# ---------------------------------------------------------------------------

class CodecSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["linear"] = Field(default="linear", description="Codec family.")
    action_scale: float = Field(default=0.5, gt=0, description="Multiplier on u before decoding.")
    min_cosine: float = Field(default=0.99, ge=-1, le=1, description="Required round-trip cosine.")


class TargetFnParams(BaseModel):
    """Slope and threshold of ℓ = −tanh(η·(‖guidance‖ − β))."""

    model_config = ConfigDict(frozen=True)

    eta: float = Field(default=0.1, gt=0)
    beta: float = Field(default=7.5, description="Guidance-norm threshold; recalibrate with `rads calibrate`.")
    escape_points_per_axis: int = Field(
        default=3, ge=1, description="Action grid over which a state's best escape margin is taken."
    )


class GridSpec(BaseModel):
    """Discretization for the reachability oracle."""

    model_config = ConfigDict(frozen=True)

    points_per_axis: int = Field(default=41, ge=2)
    action_points_per_axis: int = Field(default=3, ge=1, description="3 per axis gives the 9-point grid for d = 2.")
    lo: list[float] | None = Field(default=None, description="Lower corner; derived from the env when unset.")
    hi: list[float] | None = Field(default=None, description="Upper corner; derived from the env when unset.")
    max_mask_error: float = Field(
        default=0.05, gt=0, description="Warn when interpolation flips the sign of ℓ on more than this fraction of cells."
    )

    @model_validator(mode="after")
    def _check_box(self) -> "GridSpec":
        if (self.lo is None) != (self.hi is None):
            raise ValueError("grid lo and hi must be given together")
        if self.lo is not None and any(lo >= hi for lo, hi in zip(self.lo, self.hi)):
            raise ValueError("grid lo must be strictly below hi on every axis")
        return self


# ---------------------------------------------------------------------------
# [agent]
# ---------------------------------------------------------------------------

class AgentConfig(BaseModel):
    """Constrained soft actor-critic hyperparameters."""

    model_config = ConfigDict(frozen=True)

    hidden_width: int = Field(default=64, ge=1, le=256)
    hidden_layers: int = Field(default=3, ge=1)
    gamma: float = Field(default=0.99, gt=0, le=1)
    delta: float = Field(default=0.0, description="Lower bound on E[Q_safe].")
    actor_lr: float = Field(default=1e-4, gt=0)
    critic_lr: float = Field(default=3e-5, gt=0)
    alpha_lr: float = Field(default=3e-5, gt=0)
    lambda_lr: float = Field(default=3e-5, gt=0)
    lambda_init: float = Field(default=1.0, ge=0)
    alpha_init: float = Field(default=0.1, gt=0)
    polyak_tau: float = Field(default=0.005, gt=0, le=1)
    replay_capacity: int = Field(default=50_000, ge=1)
    batch_size: int = Field(default=128, ge=1, description="Minibatch size for gradient updates.")
    rollouts_per_epoch: int = Field(default=32, ge=1, description="Simulation batch per epoch.")
    epochs: int = Field(default=90, ge=0)
    eval_every: int = Field(default=5, ge=1)
    eval_seeds: int = Field(default=3, ge=1, description="Initial latents per caption during best-epoch selection.")
    updates_per_step: int = Field(default=1, ge=0)
    divergence_threshold: float = Field(default=1e6, gt=0)
    constrained: bool = Field(default=True, description="False freezes λ at 0 (ablation arm).")
    twin_safety: bool = Field(default=False, description="Train two safety critics and use their minimum.")


# ---------------------------------------------------------------------------
# Root config
# ---------------------------------------------------------------------------

class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    schema_version: Literal[1] = Field(description="Config schema version.")
    env: EnvConfig = Field(default_factory=EnvConfig)
    codec: CodecSpec = Field(default_factory=CodecSpec)
    agent: AgentConfig = Field(default_factory=AgentConfig)
    target: TargetFnParams = Field(default_factory=TargetFnParams)
    grid: GridSpec = Field(default_factory=GridSpec)
    seeds: list[int] = Field(default=[0], min_length=1)
    out_dir: str = Field(default="runs/default")

    @model_validator(mode="after")
    def _check_grid_dims(self) -> "RunConfig":
        for name in ("lo", "hi"):
            corner = getattr(self.grid, name)
            if corner is not None and len(corner) != self.env.n_x:
                raise ValueError(f"grid.{name} must have length n_x = {self.env.n_x}")
        return self


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

class EvalReport(BaseModel):
    """Aggregate metrics over a caption × seed grid.

    Pairwise diversity fields are None when the statistic is undefined
    (fewer than two seeds or captions), never zero."""

    format_version: int = 1
    replication_target: float | None = Field(description="Mean max similarity of x_0 to any planted target.")
    diversity_seeds: float | None = Field(description="Mean pairwise similarity across seeds, per caption.")
    diversity_prompts: float | None = Field(description="Mean pairwise similarity across captions, per seed.")
    alignment: float = Field(description="Mean terminal cosine reward.")
    failure_rate: float = Field(ge=0, le=1, description="Fraction of rollouts with min ℓ ≤ 0.")
    n_rollouts: int
    n_captions: int
    n_seeds: int


class AgreementReport(BaseModel):
    format_version: int = 1
    agreement: float = Field(ge=0, le=1, description="Fraction of grid points where critic sign matches the oracle.")
    n_points: int
    brt_fraction: float = Field(ge=0, le=1, description="Fraction of grid points inside the BRT.")


# ---------------------------------------------------------------------------
# HTTP service
# ---------------------------------------------------------------------------

class TargetRequest(BaseModel):
    guidance_norm: float = Field(ge=0, description="‖ε_c − ε_u‖₂ at the state.", examples=[12.0])
    eta: float | None = Field(default=None, gt=0, description="Override the configured η.")
    beta: float | None = Field(default=None, description="Override the configured β.")


class TargetResponse(BaseModel):
    ell: float = Field(description="Safety margin, negative inside the failure set.")
    in_failure_set: bool
    eta: float
    beta: float


class SteerRequest(BaseModel):
    caption: list[float] = Field(description="Caption embedding (length n_e).")
    seed: int = Field(default=0, description="Seed of the initial latent.")
    mitigate: bool = Field(default=True, description="Apply the loaded policy; False runs the unmitigated sampler.")


class StepTrace(BaseModel):
    step: int
    guidance_norm: float
    ell: float
    distance_to_nearest_target: float | None


class SteerResponse(BaseModel):
    final_latent: list[float]
    reward: float
    failed: bool = Field(description="True when min ℓ over the trajectory is ≤ 0.")
    steps: list[StepTrace]
    policy: str = Field(description="'agent' or 'unmitigated'.")
