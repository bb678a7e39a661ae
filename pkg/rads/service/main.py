"""
RADS steering service -- Application entry point.

Run with:
    python -m rads serve
or
    uvicorn rads.service.main:app --reload

The service reads RADS_CONFIG (default configs/default.toml) and, if set,
RADS_CHECKPOINT on the first request. Interactive docs are at /docs.
"""

import logging
import os

from dotenv import load_dotenv
from fastapi import FastAPI

from rads import __version__
from rads.service import store
from rads.service.routes import steer, target

load_dotenv()
logging.basicConfig(
    level=os.getenv("RADS_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s [%(name)s] %(levelname)s: %(message)s",
)

app = FastAPI(
    title="RADS Steering Service",
    version=__version__,
    description=(
        "Reachability-aware steering for a toy denoiser.\n\n"
        "| Endpoint | Purpose |\n"
        "|----------|--------|\n"
        "| `POST /v1/target` | Safety margin ℓ for a guidance norm |\n"
        "| `POST /v1/steer` | One steered (or unsteered) denoising trajectory |\n"
        "| `GET /health` | Liveness and loaded policy |\n"
    ),
)

app.include_router(target.router)
app.include_router(steer.router)


@app.get(
    "/health",
    summary="Health check",
    description="Returns the service status and which policy is loaded, if any.",
    tags=["System"],
)
async def health():
    runtime = store.state.get("runtime")
    return {
        "status": "healthy",
        "version": __version__,
        "configured": runtime is not None,
        "policy": None if runtime is None else ("agent" if runtime.agent is not None else "unmitigated"),
    }
