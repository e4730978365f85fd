"""Shared fixtures: trained value networks, cached across test runs.

Training is deterministic given the seed, so the cache key hashes the
environment geometry and the training preset; touching either retrains.
Set BELIEFCONTROL_CACHE to relocate the cache (default: <repo>/.cache).
"""

import hashlib
import json
import os
from pathlib import Path

import pytest

from beliefcontrol import envs, nn, training

CACHE_DIR = Path(os.environ.get("BELIEFCONTROL_CACHE", Path(__file__).resolve().parent.parent / ".cache")) / "weights"


def _cache_key(env_name: str, seed: int) -> str:
    cfg = envs.load_config(env_name)
    preset = training.train_preset(env_name).__dict__
    blob = json.dumps({"env": cfg, "train": preset}, sort_keys=True).encode()
    return f"{env_name}-s{seed}-{hashlib.sha1(blob).hexdigest()[:10]}.bclfw"


def trained_weights(env_name: str, seed: int = 0) -> Path:
    """Path to a trained network for env_name, training it if not cached."""
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    path = CACHE_DIR / _cache_key(env_name, seed)
    if not path.exists():
        training.train_env(env_name, seed=seed, weights_out=path)
    return path


@pytest.fixture(scope="session")
def toy_weights():
    return trained_weights("two_particle", seed=0)


@pytest.fixture(scope="session")
def lightdark_weights():
    return trained_weights("lightdark", seed=0)


@pytest.fixture(scope="session")
def antenna_weights():
    return trained_weights("antenna", seed=0)


@pytest.fixture(scope="session")
def bumper_weights():
    return trained_weights("bumper", seed=0)
