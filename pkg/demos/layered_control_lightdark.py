"""The layered architecture on the 1D light-dark corridor, stack by stack.

Measurement noise shrinks linearly toward the avoid boundary at x=10, so
information lives next to danger.  This script evaluates the reference
controller alone, the filtered reference, the unfiltered information
gatherer, and the full stack over seeded episodes and prints the reach /
avoid / success table.

Weights are trained on first use (roughly ten minutes) and cached.

    python demos/layered_control_lightdark.py [--episodes 30]
"""

import argparse
import os

import numpy as np

from beliefcontrol import envs, harness, lyapunov, nn, training


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--episodes", type=int, default=30)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--weights", default="lightdark.bclfw")
    args = parser.parse_args()

    if not os.path.exists(args.weights):
        print("no cached weights; training the belief value function ...")
        training.train_env("lightdark", seed=0, weights_out=args.weights)
    qnet = nn.load_weights(args.weights)

    env = envs.lightdark()
    mode = lyapunov.BclfMode.finite_time(0.4)
    seeds = harness.episode_seeds(args.seed, args.episodes)

    print(f"\n{'stack':<16} {'reach':>6} {'avoid':>6} {'sr':>6} {'pl':>8}")
    for stack in ("reference", "reference+bcbf", "reference+bclf", "full"):
        q = qnet if stack in ("reference+bclf", "full") else None
        results = [harness.run_episode(env, stack, s, q, mode) for s in seeds]
        summ = harness.summarize(results)
        pl = f"{summ.pl_mean:.2f}" if summ.n_success else "-"
        print(f"{stack:<16} {summ.reach_rate:6.2f} {summ.avoid_rate:6.2f} {summ.success_rate:6.2f} {pl:>8}")

    print(
        "\nreference alone localizes only when the measurement draw cooperates;"
        "\nthe information-gathering layer drives toward the bright boundary first,"
        "\nand the safety filter keeps the approach outside the avoid set."
    )


if __name__ == "__main__":
    main()
