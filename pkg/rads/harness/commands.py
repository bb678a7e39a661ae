"""
Experiment commands.

Each command takes a validated RunConfig plus its own options, writes its
artifacts under an output directory, and raises a RadsError on failure.
Nothing is written until the environment, captions and codec have been
built, so a bad config never leaves partial artifacts behind.

Artifacts per command:
  train       checkpoint.ckpt, best.ckpt, best_epoch.json, train_log.jsonl,
              config.json, codec.json
  eval        eval_report.json, rollouts.csv, traces.csv
  ablate      ablation.json and one train + eval tree per (seed, arm)
  oracle      brt_values.npy, brt_meta.json, [agreement.json], [refinement.json]
  fit-codec   codec.json
  calibrate   calibration.json
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rads.agent import (
    AgentBundle,
    TrainResult,
    bundle_from_checkpoint,
    bundle_to_checkpoint,
    init_bundle,
    make_policy,
    make_reward_fn,
    train,
)
from rads.approximator import load_checkpoint, save_checkpoint
from rads.codec import CodecParams, fit_codec, load_codec, save_codec
from rads.dynamics import CaptionEmbedding, ToyDenoiser, make_caption_set, triggered_captions, zero_policy
from rads.errors import ConfigError, DivergenceError
from rads.harness.artifacts import TrainLog, write_csv, write_json
from rads.metrics import (
    ROLLOUT_COLUMNS,
    TRACE_COLUMNS,
    EvalResult,
    critic_agreement,
    evaluate,
    summarize_reports,
)
from rads.models.schemas import AgentConfig, EvalReport, PolicyMode, RunConfig
from rads.reachability import BrtGrid, Calibration, calibrate_beta, compute_brt_oracle, make_ell_fn, refinement_study, save_brt

logger = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.ckpt"
BEST_CHECKPOINT = "best.ckpt"
CAPTION_SETS = ("all", "triggered", "plain", "heldout")


# ── Setup ───────────────────────────────────────────────────────────

@dataclass
class Setup:
    cfg: RunConfig
    env: ToyDenoiser
    captions: list[CaptionEmbedding]
    codec: CodecParams
    ell_fn: object
    reward_fn: object

    def caption_set(self, which: str) -> list[CaptionEmbedding]:
        if which == "all":
            return self.captions
        if which == "triggered":
            return triggered_captions(self.env, self.captions)
        if which == "plain":
            return [c for c in self.captions if not self.env.is_triggered(c)]
        if which == "heldout":
            return make_caption_set(self.cfg.env, seed=self.cfg.env.captions.heldout_seed)
        raise ConfigError(f"unknown caption set '{which}' (expected one of {', '.join(CAPTION_SETS)})")


def build_setup(cfg: RunConfig, codec_path: str | Path | None = None) -> Setup:
    env = ToyDenoiser.from_config(cfg.env)
    captions = make_caption_set(cfg.env)
    if codec_path is not None:
        codec = load_codec(codec_path)
    else:
        codec = fit_codec(captions, cfg.env.d, cfg.codec.action_scale, cfg.codec.min_cosine)
    if (codec.d, codec.n_e) != (cfg.env.d, cfg.env.n_e):
        raise ConfigError(f"codec maps {codec.n_e} -> {codec.d}, config expects {cfg.env.n_e} -> {cfg.env.d}")
    return Setup(
        cfg=cfg,
        env=env,
        captions=captions,
        codec=codec,
        ell_fn=make_ell_fn(env, codec, cfg.target),
        reward_fn=make_reward_fn(env),
    )


def load_agent(path: str | Path, setup: Setup) -> AgentBundle:
    return bundle_from_checkpoint(
        load_checkpoint(path), setup.env.observation_dim, setup.cfg.env.d, setup.cfg.agent
    )


def _out(out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ── train ───────────────────────────────────────────────────────────

def train_arm(setup: Setup, agent_cfg: AgentConfig, seed: int, out_dir: str | Path, threads: int = 1) -> TrainResult:
    """Train one agent and write its checkpoints and log."""
    out = _out(out_dir)
    if agent_cfg.epochs == 0:
        bundle = init_bundle(setup.env.observation_dim, setup.cfg.env.d, agent_cfg, seed)
        save_checkpoint(out / CHECKPOINT, bundle_to_checkpoint(bundle, {"seed": seed, "epoch": 0}))
        return TrainResult(bundle, bundle, 0, None, [])

    write_json(out / "config.json", setup.cfg.model_copy(update={"agent": agent_cfg}).model_dump(mode="json"))
    save_codec(out / "codec.json", setup.codec)

    with TrainLog(out / "train_log.jsonl", seed=seed, constrained=agent_cfg.constrained, epochs=agent_cfg.epochs) as log:
        try:
            result = train(
                setup.env, setup.codec, agent_cfg, setup.captions, seed,
                ell_fn=setup.ell_fn, reward_fn=setup.reward_fn, threads=threads, on_epoch=log.write,
            )
        except DivergenceError as exc:
            if exc.bundle is not None:
                save_checkpoint(out / "diverged.ckpt", bundle_to_checkpoint(exc.bundle, {"seed": seed}))
            raise

    save_checkpoint(out / CHECKPOINT, bundle_to_checkpoint(result.bundle, {"seed": seed, "epoch": agent_cfg.epochs}))
    save_checkpoint(out / BEST_CHECKPOINT, bundle_to_checkpoint(result.best, {"seed": seed, "epoch": result.best_epoch}))
    write_json(out / "best_epoch.json", {
        "format_version": 1,
        "best_epoch": result.best_epoch,
        "best_score": result.best_score,
        "selection": "mean reward + ell at the final step",
    })
    return result


def cmd_train(cfg: RunConfig, seed: int, out_dir: str | Path, *, threads: int = 1, codec_path=None) -> TrainResult:
    setup = build_setup(cfg, codec_path)
    return train_arm(setup, cfg.agent, seed, out_dir, threads)


# ── eval ────────────────────────────────────────────────────────────

def cmd_eval(
    cfg: RunConfig,
    out_dir: str | Path,
    *,
    checkpoint: str | Path | None = None,
    seeds: list[int] | None = None,
    captions: str = "all",
    threads: int = 1,
    codec_path=None,
) -> EvalResult:
    """Evaluate a checkpoint, or the unmitigated sampler when none is given.

    `seeds` are the initial-latent seeds of the caption × seed grid.
    """
    setup = build_setup(cfg, codec_path)
    seeds = list(cfg.seeds if seeds is None else seeds)
    caption_list = setup.caption_set(captions)
    if not caption_list:
        raise ConfigError(f"caption set '{captions}' is empty for this environment")
    if checkpoint is not None:
        policy = make_policy(load_agent(checkpoint, setup).policy, PolicyMode.deterministic)
        label = "agent"
    else:
        policy = zero_policy(cfg.env.d)
        label = "unmitigated"

    result = evaluate(
        policy, setup.env, setup.codec, caption_list, seeds,
        ell_fn=setup.ell_fn, reward_fn=setup.reward_fn, threads=threads,
    )
    out = _out(out_dir)
    write_json(out / "eval_report.json", {
        **result.report.model_dump(mode="json"),
        "policy": label,
        "checkpoint": None if checkpoint is None else str(checkpoint),
        "captions": captions,
        "seeds": seeds,
    })
    write_csv(out / "rollouts.csv", result.rollouts, ROLLOUT_COLUMNS)
    write_csv(out / "traces.csv", result.traces, TRACE_COLUMNS)
    return result


# ── ablate ──────────────────────────────────────────────────────────

ARMS = (("constrained", True), ("unconstrained", False))


def cmd_ablate(
    cfg: RunConfig,
    out_dir: str | Path,
    *,
    seeds: list[int] | None = None,
    eval_seeds: int = 7,
    threads: int = 1,
    codec_path=None,
) -> dict:
    """Constrained agent vs. λ frozen at 0, same seeds, evaluated on triggered captions."""
    setup = build_setup(cfg, codec_path)
    seeds = list(cfg.seeds if seeds is None else seeds)
    triggered = setup.caption_set("triggered")
    if not triggered:
        raise ConfigError("the ablation needs at least one triggered caption")
    out = _out(out_dir)

    arms = {name: {"reports": [], "lambda_history": [], "best_epoch": []} for name, _ in ARMS}
    for seed in seeds:
        for name, constrained in ARMS:
            arm_dir = out / f"seed{seed}" / name
            agent_cfg = cfg.agent.model_copy(update={"constrained": constrained})
            logger.info("Ablation seed %d: training %s arm", seed, name)
            result = train_arm(setup, agent_cfg, seed, arm_dir, threads)
            ev = evaluate(
                make_policy(result.best.policy, PolicyMode.deterministic),
                setup.env, setup.codec, triggered, list(range(eval_seeds)),
                ell_fn=setup.ell_fn, reward_fn=setup.reward_fn, threads=threads,
            )
            write_csv(arm_dir / "traces.csv", ev.traces, TRACE_COLUMNS)
            arms[name]["reports"].append(ev.report.model_dump(mode="json"))
            arms[name]["lambda_history"].append([rec["lambda"] for rec in result.log])
            arms[name]["best_epoch"].append(result.best_epoch)

    for name in arms:
        arms[name]["summary"] = summarize_reports([EvalReport(**r) for r in arms[name]["reports"]])
    gap = float(
        np.mean([r["failure_rate"] for r in arms["unconstrained"]["reports"]])
        - np.mean([r["failure_rate"] for r in arms["constrained"]["reports"]])
    )
    report = {"format_version": 1, "seeds": seeds, "eval_seeds": eval_seeds, "arms": arms, "failure_rate_gap": gap}
    write_json(out / "ablation.json", report)
    logger.info("Ablation failure-rate gap (unconstrained − constrained): %.3f", gap)
    return report


# ── oracle ──────────────────────────────────────────────────────────

def cmd_oracle(
    cfg: RunConfig,
    out_dir: str | Path,
    *,
    checkpoint: str | Path | None = None,
    caption_id: str | None = None,
    refine: int = 0,
    codec_path=None,
) -> BrtGrid:
    """Ground-truth BRT for one base caption (default: the first triggered one)."""
    setup = build_setup(cfg, codec_path)
    if caption_id is not None:
        pool = setup.captions + setup.caption_set("heldout")
        matches = [c for c in pool if c.caption_id == caption_id]
        if not matches:
            raise ConfigError(f"no caption with id '{caption_id}'")
        caption = matches[0]
    else:
        triggered = setup.caption_set("triggered")
        caption = triggered[0] if triggered else setup.captions[0]

    brt = compute_brt_oracle(setup.env, setup.codec, caption, cfg.grid, cfg.target)
    out = _out(out_dir)
    save_brt(brt, out)
    if checkpoint is not None:
        agreement = critic_agreement(load_agent(checkpoint, setup), setup.env, brt, caption)
        write_json(out / "agreement.json", {**agreement.model_dump(mode="json"), "caption_id": caption.caption_id})
    if refine >= 2:
        rows = refinement_study(setup.env, setup.codec, caption, cfg.grid, cfg.target, levels=refine)
        write_json(out / "refinement.json", {"format_version": 1, "caption_id": caption.caption_id, "levels": rows})
    return brt


# ── fit-codec / calibrate ───────────────────────────────────────────

def cmd_fit_codec(cfg: RunConfig, out_dir: str | Path) -> CodecParams:
    setup = build_setup(cfg)
    save_codec(_out(out_dir) / "codec.json", setup.codec)
    return setup.codec


def cmd_calibrate(cfg: RunConfig, out_dir: str | Path, *, seeds: list[int] | None = None, codec_path=None) -> Calibration:
    setup = build_setup(cfg, codec_path)
    seeds = list(cfg.seeds if seeds is None else seeds)
    cal = calibrate_beta(setup.env, setup.codec, setup.captions, seeds)
    write_json(_out(out_dir) / "calibration.json", {
        "format_version": 1,
        "beta": cal.beta,
        "accuracy": cal.accuracy,
        "n_triggered": cal.n_triggered,
        "n_plain": cal.n_plain,
        "configured_beta": cfg.target.beta,
        "seeds": seeds,
    })
    return cal
