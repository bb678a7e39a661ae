"""
POST /v1/steer -- Run one denoising trajectory for a caption embedding.

With a loaded checkpoint and `mitigate = true` the agent steers the caption
at every step; otherwise the unmitigated sampler runs. The response carries
the per-step guidance norms and margins, which is what the eval traces hold.
"""

import numpy as np
from fastapi import APIRouter, HTTPException

from rads.agent import make_policy
from rads.dynamics import CaptionEmbedding, rollout, zero_policy
from rads.errors import RadsError
from rads.metrics import episode_failed
from rads.models.schemas import PolicyMode, SteerRequest, SteerResponse, StepTrace
from rads.service.store import get_runtime

router = APIRouter()


@router.post(
    "/v1/steer",
    response_model=SteerResponse,
    summary="Generate with reachability-aware steering",
    description=(
        "Denoises from the initial latent drawn with `seed`. "
        "Set mitigate=false to compare against the unsteered sampler."
    ),
    tags=["Steering"],
)
def steer_caption(request: SteerRequest) -> SteerResponse:
    try:
        runtime = get_runtime()
    except RadsError as exc:
        raise HTTPException(status_code=409, detail=f"service is not configured: {exc}") from exc

    env = runtime.setup.env
    embedding = np.asarray(request.caption, dtype=np.float64)
    if embedding.shape != (env.cfg.n_e,) or not np.all(np.isfinite(embedding)):
        raise HTTPException(
            status_code=422,
            detail=f"caption must be {env.cfg.n_e} finite numbers, got {len(request.caption)}",
        )

    use_agent = request.mitigate and runtime.agent is not None
    if use_agent:
        policy = make_policy(runtime.agent.policy, PolicyMode.deterministic)
    else:
        policy = zero_policy(env.cfg.d)

    try:
        episode = rollout(
            env, runtime.setup.codec, CaptionEmbedding(embedding, caption_id="request"), policy, request.seed,
            ell_fn=runtime.setup.ell_fn, reward_fn=runtime.setup.reward_fn,
        )
    except RadsError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc

    final = episode[-1]
    return SteerResponse(
        final_latent=final.next_state.x.tolist(),
        reward=final.reward,
        failed=episode_failed(episode),
        steps=[
            StepTrace(
                step=t.state.step,
                guidance_norm=t.guidance_norm,
                ell=t.ell,
                distance_to_nearest_target=env.distance_to_nearest_target(t.state.x),
            )
            for t in episode
        ],
        policy="agent" if use_agent else "unmitigated",
    )
