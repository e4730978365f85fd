"""Learn a belief certificate on the two-hypothesis system and audit it.

The belief is a pair of 1D particles; a binary sensor fires inside |x| <= 1.
Whenever a measurement tells the hypotheses apart, the pair collapses.  A
fitted action-value function over the pair gives a Lyapunov certificate
W = -max_a Q whose audited properties (sign conditions, expected decrease
under the greedy action, reach rates) are printed as a table.

    python demos/two_particle_certificate.py [--episodes 2000]
"""

import argparse

import numpy as np

from beliefcontrol import envs, lyapunov, nn, training


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--episodes", type=int, default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--weights", default="two_particle.bclfw")
    parser.add_argument("--samples", type=int, default=2000)
    parser.add_argument("--rollouts", type=int, default=500)
    args = parser.parse_args()

    cfg = training.train_preset("two_particle")
    if args.episodes:
        import dataclasses

        cfg = dataclasses.replace(cfg, episodes=args.episodes)
    print(f"training: {cfg.episodes} episodes, gamma={cfg.gamma} ...")
    qnet = training.train_env("two_particle", seed=args.seed, weights_out=args.weights, config=cfg)
    print(f"saved {args.weights}")

    env = envs.two_particle_toy()
    mdp = envs.make_mdp(env)
    rng = np.random.default_rng(123)
    rows = lyapunov.certificate_audit(
        qnet, mdp, n_samples=args.samples, rng=rng, n_rollouts=args.rollouts
    )
    width = max(len(r.condition) for r in rows)
    print(f"\n{'condition':<{width}}  {'tpr':>6}  {'fpr':>8}  {'n':>6}")
    for r in rows:
        fpr = "-" if r.fpr is None or np.isnan(r.fpr) else f"{r.fpr:.4f}"
        print(f"{r.condition:<{width}}  {r.tpr:6.3f}  {fpr:>8}  {r.n:>6}")

    # a taste of the learned policy: both particles right of the band
    from beliefcontrol.belief import ParticleBelief

    for pair in ((3.0, 5.0), (-3.0, -5.0), (0.5, -0.5)):
        b = ParticleBelief(np.array(pair)[:, None])
        a = int(np.argmax(nn.q_values(qnet, b)))
        print(f"greedy action at pair {pair}: u = {mdp.action_set[a][0]:+.0f}")


if __name__ == "__main__":
    main()
