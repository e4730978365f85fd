"""Planar free-flyer with bump-only sensing and a narrow corridor.

A double integrator floats in a 4 m square; position information comes only
from detecting impacts with the left, right, and top walls.  The goal sits
behind a corridor between two obstacles.  The script runs the full stack
(bump-seeking value function + safety filter) when weights are available and
prints the bump/traversal event log; without weights it runs the filtered
reference so the safety machinery is still exercised.

Training this value function is the slowest in the toolkit (large particle
count); budget an hour with --train.

    python demos/free_flyer_corridor.py [--train] [--episodes 2]
"""

import argparse
import os

import numpy as np

from beliefcontrol import barrier, envs, harness, lyapunov, nn, qp, training
from beliefcontrol.belief import (
    DegenerateUpdateError,
    mean,
    measurement_update,
    propagate,
    step_noise_rng,
)
from beliefcontrol.conformal import uncertainty_measure
from beliefcontrol.envs.core import truth_step


def run_episode(env, qnet, seed):
    mode = lyapunov.BclfMode.finite_time(0.4)
    init, truth_rng = harness._stream(seed, 0), harness._stream(seed, 1)
    obs_rng, res_rng = harness._stream(seed, 2), harness._stream(seed, 3)
    x = env.initial_state(init)
    b = env.initial_belief(init, env.n_particles)
    xi = barrier.init_history(b, env.safety)
    solver = qp.QpSolver()
    bumps = []
    corridor_crossed_at = None

    def ig(belief):
        if qnet is None:
            return np.asarray(env.goal.reference(mean(belief)), dtype=float)
        u, _ = lyapunov.ig_control(qnet, belief, env.goal, mode, env.action_set)
        return u

    u_ig = ig(b)
    print(f"episode seed {seed}: truth starts at ({x[0]:+.2f},{x[1]:+.2f})")
    for k in range(round(env.horizon / env.dt)):
        t = k * env.dt
        if env.goal.in_belief_goal(b):
            print(f"  t={t:5.1f}s goal reached with certified localization; bumps={len(bumps)}")
            return True
        u, rep = barrier.safety_filter(b, xi, u_ig, env.motion, env.safety, solver)
        x = truth_step(env, x, u, truth_rng)
        b = propagate(b, env.motion, u, env.dt, step_noise_rng(seed, k))
        xi = barrier.update_history(xi, b, env.safety)
        if corridor_crossed_at is None and x[0] > 0.45:
            corridor_crossed_at = t
            print(f"  t={t:5.1f}s corridor passed")
        if (k + 1) % env.steps_per_measurement == 0:
            z = env.observation.sample(x, obs_rng)
            if int(z) == 1:
                bumps.append(t)
                r = uncertainty_measure(b, env.uncertainty)
                print(f"  t={t:5.1f}s bump detected (uncertainty {r:+.2f})")
            try:
                b = measurement_update(b, env.observation, z, res_rng)
            except DegenerateUpdateError:
                pass
            xi = barrier.init_history(b, env.safety)
            u_ig = ig(b)
    print(f"  timeout; bumps={len(bumps)}")
    return False


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--train", action="store_true")
    parser.add_argument("--weights", default="free_flyer.bclfw")
    parser.add_argument("--episodes", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    env = envs.free_flyer()
    qnet = None
    if args.train and not os.path.exists(args.weights):
        training.train_env("free_flyer", seed=0, weights_out=args.weights)
    if os.path.exists(args.weights):
        qnet = nn.load_weights(args.weights)
        print(f"loaded {args.weights}")
    else:
        print("no weights; running the filtered reference controller")

    wins = sum(run_episode(env, qnet, s) for s in harness.episode_seeds(args.seed, args.episodes))
    print(f"\nreached goal in {wins}/{args.episodes} episodes")


if __name__ == "__main__":
    main()
