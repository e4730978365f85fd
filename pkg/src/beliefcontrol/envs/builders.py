"""Benchmark environment builders.

Every builder reads a bundled geometry/config JSON (schema: dynamics, noise,
goal, avoid, actions, timing, init, particles, network) and assembles the
Environment.  The JSON files are the single source of truth for calibration
constants; pass `overrides` to patch any subtree for an experiment.
"""

from __future__ import annotations

import copy
import json
import math
from importlib import resources

import numpy as np

from beliefcontrol.barrier import (
    BarrierFunction,
    SafetySpec,
    affine_barrier,
    ball_barrier,
    box_union_barrier,
    halfspace_barrier,
    smooth_set,
)
from beliefcontrol.belief import MotionModel, ObservationModel, ParticleBelief
from beliefcontrol.conformal import RiskLevel, UncertaintySpec
from beliefcontrol.envs.core import BeliefMdp, Environment, TwoParticleMdp
from beliefcontrol.lyapunov import GoalSpec
from beliefcontrol.regions import region_from_config

_GAUSS_NORM = 1.0 / math.sqrt(2.0 * math.pi)


def load_config(name: str, config_path=None, overrides: dict | None = None) -> dict:
    """Bundled geometry file for `name`, optionally replaced and/or patched."""
    if config_path is not None:
        with open(config_path) as f:
            cfg = json.load(f)
    else:
        text = resources.files("beliefcontrol.envs").joinpath(f"configs/{name}.json").read_text()
        cfg = json.loads(text)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def _merge(base: dict, patch: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in patch.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


# --- dynamics ---------------------------------------------------------------


def _workspace_clamp(lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)

    def project(x):
        return np.clip(x, lo, hi)

    return project


def _double_integrator_project(lo, hi):
    """Clamp positions; zero velocity components pointing into a hit wall."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)

    def project(x):
        out = x.copy()
        p = out[:, :2]
        v = out[:, 2:]
        low_hit = p < lo
        high_hit = p > hi
        np.clip(p, lo, hi, out=p)
        v[low_hit] = np.maximum(v[low_hit], 0.0)
        v[high_hit] = np.minimum(v[high_hit], 0.0)
        return out

    return project


def _single_integrator(cfg) -> MotionModel:
    d = int(cfg["state_dim"])
    sigma = float(cfg["diffusion"])
    ws = cfg.get("workspace")
    project = _workspace_clamp(ws["lo"], ws["hi"]) if ws else None
    eye = np.eye(d)

    def drift(x):
        return np.zeros_like(x)

    sig_mat = sigma * eye

    def gain(x):
        return np.broadcast_to(eye, (x.shape[0], d, d))

    def diffusion(x):
        return np.broadcast_to(sig_mat, (x.shape[0], d, d))

    return MotionModel(drift, gain, diffusion, control_dim=d, noise_dim=d, project=project)


def _double_integrator(cfg) -> MotionModel:
    sigma = float(cfg["diffusion"])
    ws = cfg.get("workspace")
    project = _double_integrator_project(ws["lo"], ws["hi"]) if ws else None
    gmat = np.zeros((4, 2))
    gmat[2, 0] = 1.0
    gmat[3, 1] = 1.0
    smat = sigma * gmat  # noise enters the velocity states

    def drift(x):
        out = np.zeros_like(x)
        out[:, :2] = x[:, 2:]
        return out

    def gain(x):
        return np.broadcast_to(gmat, (x.shape[0], 4, 2))

    def diffusion(x):
        return np.broadcast_to(smat, (x.shape[0], 4, 2))

    return MotionModel(drift, gain, diffusion, control_dim=2, noise_dim=2, project=project)


def _motion_from_config(cfg) -> MotionModel:
    kind = cfg["kind"]
    if kind == "single_integrator":
        return _single_integrator(cfg)
    if kind == "double_integrator":
        return _double_integrator(cfg)
    raise ValueError(f"unknown dynamics kind {kind!r}")


# --- observation models -----------------------------------------------------


def _ramp_gaussian_obs(noise_cfg) -> ObservationModel:
    """z = x + n, n ~ N(0, sigma(x)^2), sigma = floor + slope * |x - anchor|."""
    floor = float(noise_cfg["floor"])
    slope = float(noise_cfg["slope"])
    anchor = float(np.asarray(noise_cfg["anchor"], dtype=float)[0])

    def sigma_of(x):
        return floor + slope * np.abs(x - anchor)

    def sample(x, rng):
        s = sigma_of(float(x[0]))
        return np.array([float(x[0]) + s * rng.standard_normal()])

    def likelihood(z, particles):
        s = sigma_of(particles[:, 0])
        err = (float(np.asarray(z).ravel()[0]) - particles[:, 0]) / s
        return _GAUSS_NORM / s * np.exp(-0.5 * err * err)

    return ObservationModel(sample, likelihood)


def _range_gaussian_obs(noise_cfg) -> ObservationModel:
    """Range to the antenna with distance-growing gaussian noise."""
    floor = float(noise_cfg["floor"])
    slope = float(noise_cfg["slope"])
    antenna = np.asarray(noise_cfg["antenna"], dtype=float)

    def sample(x, rng):
        d = float(np.linalg.norm(x[: antenna.size] - antenna))
        return np.array([d + (floor + slope * d) * rng.standard_normal()])

    def likelihood(z, particles):
        d = np.linalg.norm(particles[:, : antenna.size] - antenna, axis=1)
        s = floor + slope * d
        err = (float(np.asarray(z).ravel()[0]) - d) / s
        return _GAUSS_NORM / s * np.exp(-0.5 * err * err)

    return ObservationModel(sample, likelihood)


def _contact_predicate(noise_cfg, workspace):
    margin = float(noise_cfg["margin"])
    lo = np.asarray(workspace["lo"], dtype=float)
    hi = np.asarray(workspace["hi"], dtype=float)
    walls = set(noise_cfg.get("walls", ["left", "right", "top", "bottom"]))

    def contact(positions):
        hit = np.zeros(positions.shape[0], dtype=bool)
        if "left" in walls:
            hit |= positions[:, 0] <= lo[0] + margin
        if "right" in walls:
            hit |= positions[:, 0] >= hi[0] - margin
        if "bottom" in walls:
            hit |= positions[:, 1] <= lo[1] + margin
        if "top" in walls:
            hit |= positions[:, 1] >= hi[1] - margin
        return hit

    return contact


def _contact_binary_obs(noise_cfg, workspace) -> ObservationModel:
    """Bump sensor: z=1 on wall contact with a small failure probability."""
    p_contact = float(noise_cfg["p_contact"])
    p_false = float(noise_cfg["p_false"])
    contact = _contact_predicate(noise_cfg, workspace)

    def sample(x, rng):
        p1 = p_contact if contact(x[None, :2] if x.size > 2 else x[None, :])[0] else p_false
        return int(rng.uniform() < p1)

    def likelihood(z, particles):
        pos = particles[:, :2] if particles.shape[1] > 2 else particles
        p1 = np.where(contact(pos), p_contact, p_false)
        return p1 if int(z) == 1 else 1.0 - p1

    return ObservationModel(sample, likelihood)


def _band_binary_obs(noise_cfg) -> ObservationModel:
    """Noise-free binary sensing region z = 1{|x| <= halfwidth} (1D)."""
    hw = float(noise_cfg["sensing_halfwidth"])

    def sample(x, rng):
        return int(abs(float(x[0])) <= hw)

    def likelihood(z, particles):
        inside = np.abs(particles[:, 0]) <= hw
        return (inside == bool(int(z))).astype(float)

    return ObservationModel(sample, likelihood)


def _observation_from_config(noise_cfg, dyn_cfg) -> ObservationModel:
    kind = noise_cfg["kind"]
    if kind == "ramp_gaussian":
        return _ramp_gaussian_obs(noise_cfg)
    if kind == "range_gaussian":
        return _range_gaussian_obs(noise_cfg)
    if kind == "contact_binary":
        return _contact_binary_obs(noise_cfg, dyn_cfg["workspace"])
    if kind == "band_binary":
        return _band_binary_obs(noise_cfg)
    raise ValueError(f"unknown noise kind {kind!r}")


# --- avoid sets -------------------------------------------------------------


def _rect_faces(lo, hi, state_dim: int, velocity_gain: float = 0.0):
    """Affine face coefficients (W, c) of a box obstacle, outside-positive.

    With velocity_gain > 0 each face also penalizes approach speed, which
    keeps the barrier controllable for acceleration-driven dynamics.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    ws, cs = [], []
    for j in range(lo.size):
        for normal_j, offset in ((1.0, hi[j]), (-1.0, -lo[j])):
            w = np.zeros(state_dim)
            w[j] = normal_j
            if velocity_gain > 0.0 and state_dim >= lo.size + j + 1:
                w[lo.size + j] = velocity_gain * normal_j
            ws.append(w)
            cs.append(offset)
    return np.asarray(ws), np.asarray(cs)


def rect_obstacle_barrier(lo, hi, beta: float, state_dim: int, velocity_gain: float = 0.0) -> BarrierFunction:
    """Signed distance surrogate for a box obstacle: smooth max over faces."""
    w, c = _rect_faces(lo, hi, state_dim, velocity_gain)
    return smooth_set([affine_barrier(wi, ci) for wi, ci in zip(w, c)], "max", beta)


def _avoid_from_config(avoid_cfg, dyn_cfg) -> BarrierFunction | None:
    if avoid_cfg is None:
        return None
    kind = avoid_cfg["kind"]
    d = int(dyn_cfg["state_dim"])
    if kind == "halfspace":
        return halfspace_barrier(avoid_cfg["normal"], float(avoid_cfg["offset"]))
    if kind == "circle":
        return ball_barrier(avoid_cfg["center"], float(avoid_cfg["radius"]), dims=slice(0, 2), state_dim=d)
    if kind == "rect_union":
        beta = float(avoid_cfg["beta"])
        kv = float(avoid_cfg.get("velocity_gain", 0.0))
        groups = [_rect_faces(r["lo"], r["hi"], d, kv) for r in avoid_cfg["rects"]]
        return box_union_barrier(groups, beta)
    raise ValueError(f"unknown avoid kind {kind!r}")


# --- shared assembly ---------------------------------------------------------


def _action_set(actions_cfg, control_dim: int) -> np.ndarray:
    kind = actions_cfg["kind"]
    if kind == "equidistant":
        vals = np.linspace(actions_cfg["low"], actions_cfg["high"], actions_cfg["count"])
        return vals[:, None]
    if kind == "compass":
        count = int(actions_cfg["count"])
        speed = float(actions_cfg["speed"])
        if count != 9:
            raise ValueError("compass action set is 8 directions plus stay")
        angles = np.arange(8) * (np.pi / 4.0)
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        dirs[np.abs(dirs) < 1e-12] = 0.0
        return np.vstack([speed * dirs, np.zeros((1, 2))])
    raise ValueError(f"unknown action kind {kind!r}")


def _reference_controller(goal_cfg, dyn_cfg, bounds):
    center = np.asarray(goal_cfg["region"]["center"], dtype=float)
    gain = float(goal_cfg.get("reference_gain", 1.0))
    lo, hi = bounds
    if dyn_cfg["kind"] == "double_integrator":
        damping = float(goal_cfg.get("damping_gain", 1.0))

        def reference(mean_state):
            u = -gain * (mean_state[:2] - center) - damping * mean_state[2:]
            return np.clip(u, lo, hi)

        return reference

    def reference(mean_state):
        return np.clip(-gain * (mean_state - center), lo, hi)

    return reference


def _samplers(cfg, barrier_fn: BarrierFunction | None):
    init = cfg["init"]
    lo = np.asarray(init["lo"], dtype=float)
    hi = np.asarray(init["hi"], dtype=float)
    dyn = cfg["dynamics"]
    state_dim = int(dyn["state_dim"])
    pad = state_dim - lo.size  # velocity components start at rest

    def _draw(rng, n):
        pts = rng.uniform(lo, hi, size=(n, lo.size))
        if pad:
            pts = np.hstack([pts, np.zeros((n, pad))])
        return pts

    def _reject_unsafe(pts, rng):
        if barrier_fn is None:
            return pts
        for _ in range(100):
            bad = barrier_fn.value(pts) <= 0.0
            if not np.any(bad):
                return pts
            pts[bad] = _draw(rng, int(bad.sum()))
        raise RuntimeError("could not sample initial states outside the avoid set")

    def initial_state(rng):
        return _reject_unsafe(_draw(rng, 1), rng)[0]

    def initial_belief(rng, n):
        return ParticleBelief(_reject_unsafe(_draw(rng, n), rng))

    ws = dyn.get("workspace")
    span = (hi - lo).max()

    def belief_sampler(rng):
        n = int(cfg["particles"])
        center = rng.uniform(lo, hi)
        width = math.exp(rng.uniform(math.log(0.02 * span), math.log(0.5 * span)))
        pts = center + width * rng.standard_normal((n, lo.size))
        if ws is not None:
            pts = np.clip(pts, ws["lo"], ws["hi"])
        if pad:
            pts = np.hstack([pts, np.zeros((n, pad))])
        return ParticleBelief(_reject_unsafe(pts, rng))

    return initial_state, initial_belief, belief_sampler


def _build(cfg) -> Environment:
    dyn = cfg["dynamics"]
    motion = _motion_from_config(dyn)
    observation = _observation_from_config(cfg["noise"], dyn)
    bounds = (
        np.asarray(dyn["control_bounds"][0], dtype=float),
        np.asarray(dyn["control_bounds"][1], dtype=float),
    )
    action_set = _action_set(cfg["actions"], motion.control_dim)
    barrier_fn = _avoid_from_config(cfg.get("avoid"), dyn)

    safety = None
    if barrier_fn is not None:
        safety = SafetySpec(
            barrier=barrier_fn,
            alpha3_gain=float(cfg["avoid"]["kappa"]),
            delta_bar=RiskLevel(float(cfg["avoid"]["delta_bar"])),
            control_bounds=bounds,
        )

    goal_cfg = cfg.get("goal") or {}
    uncertainty = None
    goal = None
    if "epsilon" in goal_cfg:
        uncertainty = UncertaintySpec(float(goal_cfg["epsilon"]), RiskLevel(float(goal_cfg["delta_l"])))
    if "region" in goal_cfg:
        region = region_from_config(goal_cfg["region"])
        goal = GoalSpec(region, uncertainty, _reference_controller(goal_cfg, dyn, bounds))

    initial_state, initial_belief, belief_sampler = _samplers(cfg, barrier_fn)
    timing = cfg["timing"]
    network = dict(cfg.get("network") or {})
    network.setdefault("particle_dim", int(dyn["state_dim"]))
    network.setdefault("n_particles", int(cfg["particles"]))
    network.setdefault("actions", len(action_set))

    return Environment(
        name=cfg["name"],
        motion=motion,
        observation=observation,
        dt=float(timing["dt"]),
        measurement_period=float(timing["measurement_period"]),
        horizon=float(timing["horizon"]),
        action_set=action_set,
        control_bounds=bounds,
        n_particles=int(cfg["particles"]),
        initial_state=initial_state,
        initial_belief=initial_belief,
        goal=goal,
        safety=safety,
        uncertainty=uncertainty,
        belief_sampler=belief_sampler,
        network=network,
        config=cfg,
    )


# --- public builders ----------------------------------------------------------


def lightdark(config_path=None, overrides: dict | None = None) -> Environment:
    """1D corridor: precise measurements only next to the avoid boundary."""
    return _build(load_config("lightdark", config_path, overrides))


def antenna(config_path=None, overrides: dict | None = None) -> Environment:
    """2D range-only localization against a fixed antenna; ring-shaped beliefs."""
    return _build(load_config("antenna", config_path, overrides))


def bumper(config_path=None, overrides: dict | None = None) -> Environment:
    """2D map where the only information source is bumping into walls."""
    return _build(load_config("bumper", config_path, overrides))


def example1_toy(config_path=None, overrides: dict | None = None) -> Environment:
    """1D sensing-region system used by the uncertainty-measure demonstration."""
    return _build(load_config("example1", config_path, overrides))


def free_flyer(config_path=None, overrides: dict | None = None) -> Environment:
    """Planar double integrator with bump sensing on left/right/top walls."""
    return _build(load_config("free_flyer", config_path, overrides))


def two_particle_toy(config_path=None, overrides: dict | None = None) -> Environment:
    """Two-hypothesis 1D system: belief is exactly two particles.

    The pair collapses once a measurement distinguishes the hypotheses; the
    goal set is a pair gap below 0.1.  Reward is flat -1 outside the goal set.
    """
    cfg = load_config("two_particle", config_path, overrides)
    dyn = cfg["dynamics"]
    motion = _motion_from_config(dyn)
    observation = _band_binary_obs(cfg["noise"])
    bounds = (
        np.asarray(dyn["control_bounds"][0], dtype=float),
        np.asarray(dyn["control_bounds"][1], dtype=float),
    )
    action_set = _action_set(cfg["actions"], 1)
    gap = float(cfg["goal"]["pair_gap"])
    lo = np.asarray(cfg["init"]["lo"], dtype=float)
    hi = np.asarray(cfg["init"]["hi"], dtype=float)

    def initial_state(rng):
        return rng.uniform(lo, hi, size=1)

    def initial_belief(rng, n):
        return ParticleBelief(rng.uniform(lo, hi, size=(n, 1)))

    def localized_test(b: ParticleBelief) -> bool:
        return abs(float(b.particles[0, 0] - b.particles[1, 0])) <= gap

    def flat_reward(b: ParticleBelief) -> float:
        return 0.0 if localized_test(b) else -1.0

    network = dict(cfg.get("network") or {})
    network.setdefault("particle_dim", 1)
    network.setdefault("n_particles", 2)
    network.setdefault("actions", len(action_set))

    timing = cfg["timing"]
    return Environment(
        name=cfg["name"],
        motion=motion,
        observation=observation,
        dt=float(timing["dt"]),
        measurement_period=float(timing["measurement_period"]),
        horizon=float(timing["horizon"]),
        action_set=action_set,
        control_bounds=bounds,
        n_particles=2,
        initial_state=initial_state,
        initial_belief=initial_belief,
        localized_test=localized_test,
        belief_reward=flat_reward,
        network=network,
        config=cfg,
    )


_BUILDERS = {
    "lightdark": lightdark,
    "antenna": antenna,
    "bumper": bumper,
    "two_particle": two_particle_toy,
    "example1": example1_toy,
    "free_flyer": free_flyer,
}


def build(name: str, config_path=None, overrides: dict | None = None) -> Environment:
    """Build a bundled environment by name."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(_BUILDERS)}") from None
    return builder(config_path, overrides)


def make_mdp(env: Environment, n_particles: int | None = None) -> BeliefMdp:
    """Measurement-cadence decision process for the environment."""
    if env.name == "two_particle":
        return TwoParticleMdp(env)
    return BeliefMdp(env, n_particles)
