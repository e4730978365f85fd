"""Per-environment training presets and the train-to-weights entry point.

Step budgets, replay sizes and learning rates are toolkit decisions (the
environment definitions do not pin them); the presets below are sized so each
benchmark trains on a laptop-class CPU in minutes.
"""

from __future__ import annotations

import logging
import time

import numpy as np

from beliefcontrol import envs as envs_mod
from beliefcontrol.nn import DqnConfig, QNetwork, dqn_train, save_weights

logger = logging.getLogger(__name__)

TRAIN_PRESETS: dict[str, DqnConfig] = {
    "two_particle": DqnConfig(
        gamma=0.99,
        learning_rate=1e-3,
        batch_size=64,
        target_sync_period=500,
        epsilon_decay_steps=15_000,
        episodes=2_000,
        max_steps_per_episode=60,
        replay_capacity=30_000,
        warmup_steps=500,
    ),
    "lightdark": DqnConfig(
        gamma=0.99,
        learning_rate=5e-4,
        batch_size=32,
        target_sync_period=500,
        epsilon_decay_steps=15_000,
        episodes=900,
        max_steps_per_episode=100,
        replay_capacity=12_000,
        warmup_steps=500,
    ),
    "antenna": DqnConfig(
        gamma=0.99,
        learning_rate=5e-4,
        batch_size=32,
        target_sync_period=1_000,
        epsilon_decay_steps=30_000,
        episodes=1_600,
        max_steps_per_episode=125,
        replay_capacity=12_000,
        warmup_steps=500,
    ),
    "bumper": DqnConfig(
        gamma=0.99,
        learning_rate=5e-4,
        batch_size=32,
        target_sync_period=500,
        epsilon_decay_steps=20_000,
        episodes=1_200,
        max_steps_per_episode=50,
        replay_capacity=12_000,
        warmup_steps=500,
    ),
    "free_flyer": DqnConfig(
        gamma=0.99,
        learning_rate=5e-4,
        batch_size=16,
        target_sync_period=500,
        epsilon_decay_steps=20_000,
        episodes=400,
        max_steps_per_episode=120,
        replay_capacity=4_000,
        warmup_steps=200,
    ),
}


def train_preset(env_name: str) -> DqnConfig:
    try:
        return TRAIN_PRESETS[env_name]
    except KeyError:
        raise ValueError(f"no training preset for {env_name!r}") from None


def train_env(
    env_name: str,
    seed: int = 0,
    weights_out=None,
    config: DqnConfig | None = None,
    env_overrides: dict | None = None,
    n_particles: int | None = None,
) -> QNetwork:
    """Train a value network for a bundled environment; optionally save it."""
    env = envs_mod.build(env_name, overrides=env_overrides)
    mdp = envs_mod.make_mdp(env, n_particles)
    cfg = config or train_preset(env_name)
    rng = np.random.default_rng(seed)
    start = time.monotonic()
    qnet = dqn_train(mdp, cfg, rng)
    logger.info("trained %s in %.1f s (%d episodes)", env_name, time.monotonic() - start, cfg.episodes)
    if weights_out is not None:
        save_weights(qnet, weights_out)
    return qnet
