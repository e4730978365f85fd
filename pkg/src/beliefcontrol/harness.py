"""Closed-loop experiment runner.

An episode interleaves three rates: the truth and belief advance every
control tick dt; the safety filter corrects the commanded control every tick;
the information-gathering layer recomputes its target control only at
measurement instants, right after the belief update.  Scoring uses the ground
truth exclusively: reach means the true state visited the goal region while
the belief was certifiably localized, and a violation means the true state
entered the avoid set at any tick.

Determinism: every stream of randomness is derived from the episode seed, and
episode seeds are spawned from the master seed, so rerunning a configuration
reproduces result files byte for byte regardless of worker count.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from beliefcontrol import barrier as barrier_mod
from beliefcontrol import envs as envs_mod
from beliefcontrol import lyapunov as lyap
from beliefcontrol import nn as nn_mod
from beliefcontrol import qp as qp_mod
from beliefcontrol.belief import (
    DegenerateUpdateError,
    measurement_update,
    mean,
    propagate,
    step_noise_rng,
)
from beliefcontrol.conformal import uncertainty_measure
from beliefcontrol.envs.core import truth_step

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STACKS = ("reference", "reference+bcbf", "reference+bclf", "full", "switching")
STAGNATION_WINDOW = 1.0  # seconds without certificate decrease before forcing descent


class ConfigError(ValueError):
    """Invalid run configuration (missing files, unknown stack, ...)."""


@dataclass(frozen=True)
class RunConfig:
    env: str
    stack: str = "reference"
    mode: lyap.BclfMode = field(default_factory=lambda: lyap.BclfMode.finite_time(0.4))
    episodes: int = 100
    master_seed: int = 0
    weights: str | None = None
    out_dir: str | None = None
    env_overrides: dict | None = None
    workers: int = 1

    def __post_init__(self):
        if self.stack not in STACKS:
            raise ConfigError(f"unknown stack {self.stack!r}; known: {STACKS}")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.stack in ("reference+bclf", "full", "switching") and self.weights is None:
            raise ConfigError(f"stack {self.stack!r} needs trained weights")
        if self.weights is not None and not os.path.exists(self.weights):
            raise ConfigError(f"weights file not found: {self.weights}")


@dataclass
class EpisodeResult:
    seed: int
    reached: bool
    violated: bool
    violated_by_fault: bool
    path_length: float
    time_to_goal: float | None
    events: dict
    trace: dict

    @property
    def success(self) -> bool:
        return self.reached and not self.violated

    def record(self, env_name: str, stack: str) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "env": env_name,
            "stack": stack,
            "seed": self.seed,
            "reached": self.reached,
            "violated": self.violated,
            "violated_by_fault": self.violated_by_fault,
            "path_length": self.path_length,
            "time_to_goal": self.time_to_goal,
            "events": self.events,
            "trace": self.trace,
        }


@dataclass(frozen=True)
class MetricsSummary:
    reach_rate: float
    avoid_rate: float
    success_rate: float
    pl_mean: float
    pl_std: float
    pl_median: float
    n_episodes: int
    n_success: int


def episode_seeds(master_seed: int, episodes: int) -> list[int]:
    """Documented splitting: child i of SeedSequence(master), one 64-bit word."""
    children = np.random.SeedSequence(master_seed).spawn(episodes)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def _stream(ep_seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((ep_seed, tag))))


def _position_dim(env) -> int:
    return 2 if env.config["dynamics"]["kind"] == "double_integrator" else env.config["dynamics"]["state_dim"]


def run_episode(
    env,
    stack: str,
    ep_seed: int,
    qnet: nn_mod.QNetwork | None = None,
    mode: lyap.BclfMode | None = None,
) -> EpisodeResult:
    """Run one seeded closed-loop episode of `stack` on `env`."""
    mode = mode or lyap.BclfMode.finite_time(0.4)
    use_filter = stack in ("reference+bcbf", "full", "switching")
    use_bclf = stack in ("reference+bclf", "full", "switching")
    if use_bclf and qnet is None:
        raise ConfigError(f"stack {stack!r} needs a value network")
    if use_filter and env.safety is None:
        raise ConfigError(f"environment {env.name} has no safety spec")

    init_rng = _stream(ep_seed, 0)
    truth_rng = _stream(ep_seed, 1)
    obs_rng = _stream(ep_seed, 2)
    resample_rng = _stream(ep_seed, 3)

    x = env.initial_state(init_rng)
    b = env.initial_belief(init_rng, env.n_particles)
    xi = barrier_mod.init_history(b, env.safety) if use_filter else None
    solver = qp_mod.QpSolver()
    pos = slice(0, _position_dim(env))

    events = {
        "forced": 0,
        "conflicts": 0,
        "degenerate_updates": 0,
        "assumption3_violations": 0,
        "unsafe_selected_max": 0,
    }
    trace = {key: [] for key in ("t", "w", "r_eps", "p", "C", "n_active", "slack", "status")}

    def controller(belief, w_hist):
        """IG-layer control target, recomputed at measurement cadence."""
        if stack in ("reference", "reference+bcbf"):
            return np.asarray(env.goal.reference(mean(belief)), dtype=float).ravel()
        if stack == "switching":
            return lyap.switching_control(qnet, belief, env.goal, env.action_set)
        # reference+bclf and full
        if stack == "full" and lyap.stagnation_monitor(w_hist, STAGNATION_WINDOW):
            events["conflicts"] += 1
            return lyap.steepest_descent_action(qnet, belief, env.goal, env.action_set)
        u, status = lyap.ig_control(qnet, belief, env.goal, mode, env.action_set)
        if status is lyap.IgStatus.FORCED:
            events["forced"] += 1
        return u

    w_hist: list[tuple[float, float]] = []
    if use_bclf:
        w_hist.append((0.0, lyap.bclf_value(qnet, b)))
    u_ig = controller(b, w_hist)

    reached = False
    violated = False
    fault = False
    time_to_goal = None
    path_length = 0.0
    n_steps = round(env.horizon / env.dt)

    r_eps = uncertainty_measure(b, env.uncertainty) if env.uncertainty else math.nan
    for k in range(n_steps):
        t = k * env.dt
        if env.goal is not None and env.goal.in_belief_goal(b):
            if env.goal.goal_region.contains(x):
                reached = True
            time_to_goal = t
            break

        if use_filter:
            u, report = barrier_mod.safety_filter(b, xi, u_ig, env.motion, env.safety, solver)
            events["unsafe_selected_max"] = max(events["unsafe_selected_max"], report.n_unsafe_selected)
            if report.status == "fault":
                fault = True
        else:
            u, report = u_ig, None

        trace["t"].append(t)
        trace["w"].append(w_hist[-1][1] if use_bclf else None)
        trace["r_eps"].append(None if math.isnan(r_eps) else (None if math.isinf(r_eps) else r_eps))
        trace["p"].append(report.p if report else None)
        trace["C"].append(None if report is None or math.isinf(report.C) else report.C)
        trace["n_active"].append(report.n_active if report else None)
        trace["slack"].append(report.slack if report else None)
        trace["status"].append(report.status if report else None)

        if fault:
            violated = True
            break

        x_prev = np.asarray(x)
        x = truth_step(env, x, u, truth_rng)
        b = propagate(b, env.motion, u, env.dt, step_noise_rng(ep_seed, k))
        if use_filter:
            xi = barrier_mod.update_history(xi, b, env.safety)
        path_length += float(np.linalg.norm(np.asarray(x)[pos] - x_prev[pos]))

        if (k + 1) % env.steps_per_measurement == 0:
            z = env.observation.sample(x, obs_rng)
            c_before = None
            if use_filter:
                _, _, c_before = barrier_mod.top_p_select(xi, env.safety.delta_bar)
            try:
                b = measurement_update(b, env.observation, z, resample_rng)
            except DegenerateUpdateError:
                events["degenerate_updates"] += 1
                logger.warning("degenerate update at t=%.2f in %s; skipped", t, env.name)
            if use_filter:
                xi = barrier_mod.init_history(b, env.safety)
                _, _, c_after = barrier_mod.top_p_select(xi, env.safety.delta_bar)
                if c_before is not None and c_before <= 0.0 < c_after:
                    events["assumption3_violations"] += 1
            if use_bclf:
                w_hist.append((t + env.dt, lyap.bclf_value(qnet, b)))
            u_ig = controller(b, w_hist)

        r_eps = uncertainty_measure(b, env.uncertainty) if env.uncertainty else math.nan
        if env.safety is not None and float(env.safety.h(np.asarray(x)[None, :])[0]) < 0.0:
            violated = True
        if env.goal is not None and env.goal.goal_region.contains(x) and r_eps <= 0.0:
            reached = True

    return EpisodeResult(
        seed=ep_seed,
        reached=reached,
        violated=violated,
        violated_by_fault=fault,
        path_length=path_length,
        time_to_goal=time_to_goal,
        events=events,
        trace=trace,
    )


def summarize(results: list[EpisodeResult]) -> MetricsSummary:
    """Aggregate per-episode outcomes; PL statistics over successful episodes."""
    reach = float(np.mean([r.reached for r in results]))
    avoid = float(np.mean([not r.violated for r in results]))
    sr = float(np.mean([r.success for r in results]))
    pls = [r.path_length for r in results if r.success]
    if pls:
        pl_mean, pl_std, pl_med = float(np.mean(pls)), float(np.std(pls)), float(np.median(pls))
    else:
        pl_mean = pl_std = pl_med = math.nan
    return MetricsSummary(reach, avoid, sr, pl_mean, pl_std, pl_med, len(results), len(pls))


def _episode_task(env_name, overrides, stack, seed, weights, mode_variant, mode_c, mode_eta):
    env = envs_mod.build(env_name, overrides=overrides)
    qnet = nn_mod.load_weights(weights) if weights else None
    mode = lyap.BclfMode(mode_variant, c=mode_c, eta=mode_eta)
    return run_episode(env, stack, seed, qnet, mode)


def evaluate(config: RunConfig) -> tuple[MetricsSummary, list[EpisodeResult]]:
    """Run all seeded episodes of a configuration and aggregate metrics."""
    seeds = episode_seeds(config.master_seed, config.episodes)
    if config.workers > 1:
        args = [
            (config.env, config.env_overrides, config.stack, s, config.weights,
             config.mode.variant, config.mode.c, config.mode.eta)
            for s in seeds
        ]
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_episode_task, *zip(*args)))
    else:
        env = envs_mod.build(config.env, overrides=config.env_overrides)
        qnet = nn_mod.load_weights(config.weights) if config.weights else None
        results = [run_episode(env, config.stack, s, qnet, config.mode) for s in seeds]
    summary = summarize(results)
    if config.out_dir:
        write_results(config, summary, results)
    return summary, results


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


SUMMARY_COLUMNS = [
    "schema_version", "env", "stack", "mode", "c", "eta", "episodes", "master_seed",
    "reach", "avoid", "sr", "pl_mean", "pl_std", "pl_median", "n_success",
]


def summary_row(config: RunConfig, summary: MetricsSummary) -> list[str]:
    mode = config.mode
    return [_fmt(v) for v in [
        SCHEMA_VERSION, config.env, config.stack, mode.variant,
        mode.c if mode.variant == "asymptotic" else None,
        mode.eta if mode.variant == "finite_time" else None,
        config.episodes, config.master_seed,
        summary.reach_rate, summary.avoid_rate, summary.success_rate,
        summary.pl_mean, summary.pl_std, summary.pl_median, summary.n_success,
    ]]


def write_summary_csv(path, rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(SUMMARY_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")


def write_results(config: RunConfig, summary: MetricsSummary, results: list[EpisodeResult]) -> None:
    os.makedirs(config.out_dir, exist_ok=True)
    write_summary_csv(os.path.join(config.out_dir, "summary.csv"), [summary_row(config, summary)])
    with open(os.path.join(config.out_dir, "episodes.jsonl"), "w") as f:
        for r in results:
            f.write(json.dumps(r.record(config.env, config.stack), sort_keys=True))
            f.write("\n")
