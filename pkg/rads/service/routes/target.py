"""
POST /v1/target -- Evaluate the target function on a guidance norm.

ℓ = −tanh(η · (norm − β)); negative values are inside the failure set.
η and β default to the loaded config and can be overridden per request.
"""

from fastapi import APIRouter, HTTPException

from rads.errors import RadsError
from rads.models.schemas import TargetRequest, TargetResponse
from rads.reachability import ell_from_norm
from rads.service.store import get_runtime

router = APIRouter()


@router.post(
    "/v1/target",
    response_model=TargetResponse,
    summary="Score a guidance norm",
    description=(
        "Returns the safety margin ℓ for a classifier-free guidance norm. "
        "ℓ ≤ 0 means the norm is at or above the calibrated threshold β."
    ),
    tags=["Safety"],
)
def score_guidance(request: TargetRequest) -> TargetResponse:
    try:
        params = get_runtime().setup.cfg.target
    except RadsError as exc:
        raise HTTPException(status_code=409, detail=f"service is not configured: {exc}") from exc

    overrides = {k: v for k, v in (("eta", request.eta), ("beta", request.beta)) if v is not None}
    params = params.model_copy(update=overrides)
    ell = float(ell_from_norm(request.guidance_norm, params))
    return TargetResponse(ell=ell, in_failure_set=ell <= 0.0, eta=params.eta, beta=params.beta)
