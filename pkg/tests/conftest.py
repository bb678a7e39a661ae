"""
Shared fixtures: the default run config and the objects built from it.
"""

import os
import sys

import pytest

ROOT = os.path.join(os.path.dirname(__file__), "..")
sys.path.insert(0, ROOT)

from rads.codec import fit_codec
from rads.dynamics import ToyDenoiser, make_caption_set
from rads.harness.config import load_config
from rads.models.schemas import RunConfig

DEFAULT_CONFIG = os.path.join(ROOT, "configs", "default.toml")

# Overrides that shrink a training run to a few seconds.
TINY_TRAINING = [
    "agent.epochs=2",
    "agent.rollouts_per_epoch=4",
    "agent.batch_size=16",
    "agent.hidden_width=16",
    "agent.hidden_layers=2",
    "agent.eval_every=1",
    "agent.eval_seeds=1",
]

slow = pytest.mark.skipif(os.getenv("RADS_RUN_SLOW") != "1", reason="set RADS_RUN_SLOW=1 for acceptance runs")


@pytest.fixture(scope="session")
def default_config() -> RunConfig:
    return load_config(DEFAULT_CONFIG)


@pytest.fixture(scope="session")
def default_env(default_config):
    return ToyDenoiser.from_config(default_config.env)


@pytest.fixture(scope="session")
def default_captions(default_config):
    return make_caption_set(default_config.env)


@pytest.fixture(scope="session")
def default_codec(default_config, default_captions):
    return fit_codec(default_captions, default_config.env.d, default_config.codec.action_scale)
