"""
Runtime state for the steering service.

The service holds one environment, codec and (optionally) one agent for its
whole lifetime. They are built lazily on the first request from the files
named by RADS_CONFIG and RADS_CHECKPOINT; tests call `configure()` directly.
Without a checkpoint the service serves the unmitigated sampler.
"""

import logging
import os
import threading
from dataclasses import dataclass

from dotenv import load_dotenv

from rads.agent import AgentBundle
from rads.harness.commands import Setup, build_setup, load_agent
from rads.harness.config import DEFAULT_CONFIG, load_config
from rads.models.schemas import RunConfig

logger = logging.getLogger(__name__)


@dataclass
class Runtime:
    setup: Setup
    agent: AgentBundle | None = None
    checkpoint: str | None = None


# "runtime" -> Runtime, populated on first use
state: dict[str, Runtime] = {}
_lock = threading.Lock()


def configure(cfg: RunConfig, checkpoint: str | None = None) -> Runtime:
    setup = build_setup(cfg)
    agent = load_agent(checkpoint, setup) if checkpoint else None
    runtime = Runtime(setup=setup, agent=agent, checkpoint=checkpoint)
    state["runtime"] = runtime
    logger.info("Service configured (%s)", "agent " + checkpoint if checkpoint else "unmitigated sampler")
    return runtime


def get_runtime() -> Runtime:
    runtime = state.get("runtime")
    if runtime is not None:
        return runtime
    with _lock:
        if "runtime" not in state:
            load_dotenv()
            cfg = load_config(os.getenv("RADS_CONFIG", DEFAULT_CONFIG))
            configure(cfg, os.getenv("RADS_CHECKPOINT") or None)
        return state["runtime"]


def reset() -> None:
    state.clear()
