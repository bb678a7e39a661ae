"""
Evaluation metrics on the toy denoiser.

Every similarity is a cosine in latent or embedding space:

    replication_target  mean over rollouts of max_k cos(x_0, M_k)
    diversity_seeds     mean pairwise cos(x_0, x_0') across seeds, per caption
    diversity_prompts   mean pairwise cos(x_0, x_0') across captions, per seed
    alignment           mean terminal reward
    failure_rate        fraction of rollouts whose margin ever drops to ≤ 0

Lower pairwise similarity means more diverse generations.
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from rads.agent import AgentBundle, collect_rollouts, safety_value, sample_action
from rads.codec import CodecParams
from rads.dynamics import CaptionEmbedding, Policy, SystemState, ToyDenoiser, Transition
from rads.errors import DimensionError, OracleError
from rads.models.schemas import AgreementReport, EvalReport, PolicyMode
from rads.reachability import BrtGrid

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("episode", "caption_id", "seed", "step", "guidance_norm", "ell", "reward", "distance_to_nearest_target")
ROLLOUT_COLUMNS = ("episode", "caption_id", "seed", "triggered", "reward", "min_ell", "failed", "final_distance", "replication")


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DimensionError("similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _similarity_or_zero(a: np.ndarray, b: np.ndarray) -> float:
    try:
        return similarity(a, b)
    except DimensionError:
        return 0.0


def _mean_pairwise(vectors: list[np.ndarray]) -> float | None:
    if len(vectors) < 2:
        return None
    return float(np.mean([_similarity_or_zero(a, b) for a, b in itertools.combinations(vectors, 2)]))


def episode_failed(episode: list[Transition]) -> bool:
    return min_margin(episode) <= 0.0


def min_margin(episode: list[Transition]) -> float:
    return min(min(t.ell for t in episode), episode[-1].ell_terminal)


# ── Evaluation ──────────────────────────────────────────────────────

@dataclass
class EvalResult:
    report: EvalReport
    rollouts: list[dict] = field(default_factory=list)
    traces: list[dict] = field(default_factory=list)


def evaluate(
    policy: Policy,
    env: ToyDenoiser,
    codec: CodecParams,
    captions: list[CaptionEmbedding],
    seeds: list[int],
    *,
    ell_fn,
    reward_fn,
    threads: int = 1,
) -> EvalResult:
    """Roll `policy` out over every caption × seed and aggregate.

    Rollout (seed, i) uses episode index i, so the same caption and seed
    always start from the same initial latent regardless of the policy.
    """
    if not captions or not seeds:
        raise DimensionError("evaluation needs at least one caption and one seed")
    jobs = [(caption, seed, i) for seed in seeds for i, caption in enumerate(captions)]
    episodes = collect_rollouts(env, codec, jobs, policy, ell_fn, reward_fn, threads)

    finals: dict[tuple[int, int], np.ndarray] = {}
    rollouts, traces = [], []
    for n, ((caption, seed, i), ep) in enumerate(zip(jobs, episodes)):
        x0 = ep[-1].next_state.x
        finals[(seed, i)] = x0
        replication = (
            max(_similarity_or_zero(x0, m) for m in env.targets) if env.n_targets else None
        )
        rollouts.append({
            "episode": n,
            "caption_id": caption.caption_id,
            "seed": seed,
            "triggered": env.is_triggered(caption),
            "reward": ep[-1].reward,
            "min_ell": min_margin(ep),
            "failed": episode_failed(ep),
            "final_distance": env.distance_to_nearest_target(x0),
            "replication": replication,
        })
        for tr in ep:
            traces.append({
                "episode": n,
                "caption_id": caption.caption_id,
                "seed": seed,
                "step": tr.state.step,
                "guidance_norm": tr.guidance_norm,
                "ell": tr.ell,
                "reward": tr.reward,
                "distance_to_nearest_target": env.distance_to_nearest_target(tr.state.x),
            })

    per_caption = [_mean_pairwise([finals[(s, i)] for s in seeds]) for i in range(len(captions))]
    per_seed = [_mean_pairwise([finals[(s, i)] for i in range(len(captions))]) for s in seeds]
    report = EvalReport(
        replication_target=(
            float(np.mean([r["replication"] for r in rollouts])) if env.n_targets else None
        ),
        diversity_seeds=None if per_caption[0] is None else float(np.mean(per_caption)),
        diversity_prompts=None if per_seed[0] is None else float(np.mean(per_seed)),
        alignment=float(np.mean([r["reward"] for r in rollouts])),
        failure_rate=float(np.mean([r["failed"] for r in rollouts])),
        n_rollouts=len(rollouts),
        n_captions=len(captions),
        n_seeds=len(seeds),
    )
    logger.info(
        "Evaluated %d rollouts: failure_rate=%.3f alignment=%.4f replication=%s",
        report.n_rollouts, report.failure_rate, report.alignment,
        "n/a" if report.replication_target is None else f"{report.replication_target:.4f}",
    )
    return EvalResult(report=report, rollouts=rollouts, traces=traces)


def mean_trace(traces: list[dict], column: str = "guidance_norm") -> np.ndarray:
    """Per-step mean of a trace column, indexed by step."""
    steps = sorted({row["step"] for row in traces})
    return np.array([np.mean([row[column] for row in traces if row["step"] == t]) for t in steps])


def summarize_reports(reports: list[EvalReport]) -> dict[str, dict[str, float] | None]:
    """Mean ± std of every metric across seeds; None where any report lacks it."""
    out = {}
    for name in ("replication_target", "diversity_seeds", "diversity_prompts", "alignment", "failure_rate"):
        values = [getattr(r, name) for r in reports]
        if any(v is None for v in values):
            out[name] = None
        else:
            out[name] = {"mean": float(np.mean(values)), "std": float(np.std(values))}
    return out


# ── Critic / oracle agreement ───────────────────────────────────────

def critic_agreement(bundle: AgentBundle, env: ToyDenoiser, brt: BrtGrid, e_base: CaptionEmbedding) -> AgreementReport:
    """Fraction of t = 0 grid points where sign(Q_safe(s, π(s))) matches the BRT mask."""
    if brt.T != env.T:
        raise OracleError(f"oracle horizon {brt.T} does not match the environment horizon {env.T}")
    pts = brt.points()
    obs = np.stack([env.observe(SystemState(x, 0), e_base) for x in pts])
    actions, _ = sample_action(bundle.policy, obs, PolicyMode.deterministic)
    q = safety_value(bundle, obs, actions)
    in_brt = brt.mask[0].ravel()
    agreement = float(np.mean((q <= 0.0) == in_brt))
    logger.info("Critic/oracle sign agreement %.2f%% over %d points", 100 * agreement, len(pts))
    return AgreementReport(agreement=agreement, n_points=len(pts), brt_fraction=float(in_brt.mean()))
