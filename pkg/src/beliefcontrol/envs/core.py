"""Environment container and the measurement-cadence belief MDP.

An Environment is an immutable description: truth dynamics, observation
model, goal/avoid geometry, discrete action set and timing.  BeliefMdp wraps
it as the discrete-time decision process used for value-function training and
certificate audits: one decision per measurement interval, belief propagated
at the control rate in between, measurement update at the end.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from beliefcontrol.belief import (
    DegenerateUpdateError,
    MotionModel,
    ObservationModel,
    ParticleBelief,
    measurement_update,
    propagate,
)
from beliefcontrol.barrier import SafetySpec
from beliefcontrol.conformal import UncertaintySpec, uncertainty_measure
from beliefcontrol.lyapunov import GoalSpec, reward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Environment:
    """Immutable benchmark description; per-episode state lives in the caller."""

    name: str
    motion: MotionModel
    observation: ObservationModel
    dt: float
    measurement_period: float
    horizon: float
    action_set: np.ndarray  # (A, m)
    control_bounds: tuple[np.ndarray, np.ndarray]
    n_particles: int
    initial_state: Callable[[np.random.Generator], np.ndarray]
    initial_belief: Callable[[np.random.Generator, int], ParticleBelief]
    goal: GoalSpec | None = None
    safety: SafetySpec | None = None
    uncertainty: UncertaintySpec | None = None
    belief_sampler: Callable[[np.random.Generator], ParticleBelief] | None = None
    localized_test: Callable[[ParticleBelief], bool] | None = None
    belief_reward: Callable[[ParticleBelief], float] | None = None
    network: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        ratio = self.measurement_period / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("measurement_period must be an integer multiple of dt")
        lo, hi = self.control_bounds
        acts = np.atleast_2d(self.action_set)
        if np.any(acts < lo - 1e-12) or np.any(acts > hi + 1e-12):
            raise ValueError("action set must lie within the control bounds")

    @property
    def steps_per_measurement(self) -> int:
        return round(self.measurement_period / self.dt)

    @property
    def n_actions(self) -> int:
        return np.atleast_2d(self.action_set).shape[0]

    def localized(self, b: ParticleBelief) -> bool:
        """Belief counts as localized (the training-terminal condition)."""
        if self.localized_test is not None:
            return self.localized_test(b)
        if self.uncertainty is None:
            raise ValueError(f"environment {self.name} has no localization spec")
        return uncertainty_measure(b, self.uncertainty) <= 0.0

    def reward_of(self, b: ParticleBelief) -> float:
        if self.belief_reward is not None:
            return self.belief_reward(b)
        if self.uncertainty is None:
            raise ValueError(f"environment {self.name} has no uncertainty spec for rewards")
        return reward(b, self.uncertainty)


def truth_step(env: Environment, x, u, rng: np.random.Generator) -> np.ndarray:
    """One Euler-Maruyama tick of the ground-truth state."""
    x = np.asarray(x, dtype=float)[None, :]
    u = np.asarray(u, dtype=float).ravel()
    model = env.motion
    drift = model.drift(x) + np.einsum("ndm,m->nd", model.control_gain(x), u)
    w = rng.standard_normal((1, model.noise_dim))
    noise = np.einsum("ndq,nq->nd", model.diffusion(x), w)
    out = x + env.dt * drift + math.sqrt(env.dt) * noise
    if model.project is not None:
        out = model.project(out)
    return out[0]


def step_truth(env: Environment, x, u, rng: np.random.Generator, step: int = 0):
    """Advance the truth one control tick; emit a measurement on cadence.

    Measurements are emitted on ticks where (step+1) is a multiple of
    measurement_period/dt, i.e. exactly every measurement_period seconds.
    Returns (x_next, z_or_none).
    """
    u = np.asarray(u, dtype=float).ravel()
    lo, hi = env.control_bounds
    if np.any(u < lo - 1e-12) or np.any(u > hi + 1e-12):
        raise ValueError("control outside bounds")
    x_next = truth_step(env, x, u, rng)
    z = None
    if (step + 1) % env.steps_per_measurement == 0:
        z = env.observation.sample(x_next, rng)
    return x_next, z


class BeliefMdp:
    """Belief-space decision process at measurement cadence.

    State is (belief, truth); one step applies a constant action over a full
    measurement interval and ends with the measurement update.  The reward is
    evaluated on the pre-step belief; reaching the localized belief set is
    terminal and all later value is zero.
    """

    def __init__(self, env: Environment, n_particles: int | None = None):
        self.env = env
        self.n_particles = n_particles or env.n_particles
        self.action_set = np.atleast_2d(env.action_set)
        self.n_actions = self.action_set.shape[0]

    def reset(self, rng: np.random.Generator):
        truth = self.env.initial_state(rng)
        belief = self.env.initial_belief(rng, self.n_particles)
        return belief, truth

    def step(self, belief: ParticleBelief, truth, action: int, rng: np.random.Generator):
        env = self.env
        r = env.reward_of(belief)
        u = self.action_set[action]
        for _ in range(env.steps_per_measurement):
            truth = truth_step(env, truth, u, rng)
            belief = propagate(belief, env.motion, u, env.dt, rng)
        z = env.observation.sample(truth, rng)
        try:
            belief = measurement_update(belief, env.observation, z, rng)
        except DegenerateUpdateError:
            logger.warning("degenerate measurement update in %s; resampling skipped", env.name)
        return belief, truth, r, env.localized(belief)

    def in_goal(self, belief: ParticleBelief) -> bool:
        return self.env.localized(belief)

    def sample_belief(self, rng: np.random.Generator) -> ParticleBelief:
        if self.env.belief_sampler is None:
            raise ValueError(f"environment {self.env.name} has no belief sampler")
        return self.env.belief_sampler(rng)

    def marginal_truth(self, belief: ParticleBelief, rng: np.random.Generator):
        """Truth draw consistent with the belief: a uniformly chosen particle."""
        return belief.particles[int(rng.integers(belief.n))].copy()

    def network_arch(self) -> dict:
        arch = dict(self.env.network)
        arch["n_particles"] = self.n_particles
        arch.setdefault("actions", self.n_actions)
        return arch


class TwoParticleMdp(BeliefMdp):
    """Bimodal two-hypothesis system: the truth is one of the two particles.

    The truth shares its particle's noise stream, so the belief pair is the
    full MDP state.  A measurement that distinguishes the hypotheses collapses
    the pair onto the survivor; an ambiguous one leaves it unchanged.
    """

    def __init__(self, env: Environment):
        super().__init__(env, n_particles=2)
        cfg = env.config
        self.band = float(cfg["noise"]["sensing_halfwidth"])
        self.gap = float(cfg["goal"]["pair_gap"])
        self.sigma = float(cfg["dynamics"]["diffusion"])
        self.domain = (float(cfg["init"]["lo"][0]), float(cfg["init"]["hi"][0]))

    def reset(self, rng: np.random.Generator):
        lo, hi = self.domain
        belief = ParticleBelief(rng.uniform(lo, hi, size=(2, 1)))
        truth_index = int(rng.integers(2))
        return belief, truth_index

    def step(self, belief: ParticleBelief, truth_index: int, action: int, rng: np.random.Generator):
        env = self.env
        r = env.reward_of(belief)
        u = float(self.action_set[action][0])
        x = belief.particles.copy()
        x += u * env.dt + self.sigma * math.sqrt(env.dt) * rng.standard_normal((2, 1))
        z = 1 if abs(x[truth_index, 0]) <= self.band else 0
        inside = np.abs(x[:, 0]) <= self.band
        match = inside == bool(z)
        if match[0] != match[1]:  # measurement resolves the mode
            survivor = int(np.flatnonzero(match)[0])
            x = np.repeat(x[survivor][None, :], 2, axis=0)
            truth_index = survivor
        belief = ParticleBelief(x)
        return belief, truth_index, r, self.in_goal(belief)

    def in_goal(self, belief: ParticleBelief) -> bool:
        return abs(belief.particles[0, 0] - belief.particles[1, 0]) <= self.gap

    def sample_belief(self, rng: np.random.Generator) -> ParticleBelief:
        lo, hi = self.domain
        return ParticleBelief(rng.uniform(lo, hi, size=(2, 1)))

    def marginal_truth(self, belief: ParticleBelief, rng: np.random.Generator):
        return int(rng.integers(2))
