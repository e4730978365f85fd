"""The horizon safety filter against an adversarial command.

A 1D belief is pushed straight at the avoid boundary with the maximum
control.  The filter keeps one conformal constraint row per selected
particle; watch it shave the command down cubically as the closest safe
particles approach the boundary, while the conformal bound C on the worst
running minimum stays nonpositive.

    python demos/safety_filter_mechanics.py [--steps 4000]
"""

import argparse

import numpy as np

from beliefcontrol import barrier, envs, qp
from beliefcontrol.belief import (
    DegenerateUpdateError,
    measurement_update,
    propagate,
    step_noise_rng,
)
from beliefcontrol.envs.core import truth_step
from beliefcontrol.harness import _stream


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=4000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    env = envs.lightdark(overrides={"timing": {"dt": 0.002}, "particles": 2000})
    spec = env.safety
    u_adv = np.array([10.0])

    init, truth_rng = _stream(args.seed, 0), _stream(args.seed, 1)
    obs_rng, res_rng = _stream(args.seed, 2), _stream(args.seed, 3)
    x = env.initial_state(init)
    b = env.initial_belief(init, env.n_particles)
    xi = barrier.init_history(b, spec)
    solver = qp.QpSolver()

    worst_c = -np.inf
    print(f"{'t':>6} {'u_cmd':>6} {'u_safe':>8} {'C':>9} {'h_min(top-p)':>12} {'active':>6}")
    for k in range(args.steps):
        u, rep = barrier.safety_filter(b, xi, u_adv, env.motion, spec, solver)
        worst_c = max(worst_c, rep.C)
        if k % (args.steps // 12) == 0:
            sel, _, _ = barrier.top_p_select(xi, spec.delta_bar)
            h_min = spec.h(b.particles[sel]).min()
            print(f"{k * env.dt:6.2f} {u_adv[0]:6.1f} {u[0]:8.4f} {rep.C:9.4f} {h_min:12.4f} {rep.n_active:6d}")
        x = truth_step(env, x, u, truth_rng)
        b = propagate(b, env.motion, u, env.dt, step_noise_rng(args.seed, k))
        xi = barrier.update_history(xi, b, spec)
        if (k + 1) % env.steps_per_measurement == 0:
            z = env.observation.sample(x, obs_rng)
            try:
                b = measurement_update(b, env.observation, z, res_rng)
            except DegenerateUpdateError:
                pass
            xi = barrier.init_history(b, spec)

    print(f"\nworst conformal bound over the run: C = {worst_c:.6f} (<= 0 means the "
          f"top-p particles never crossed the boundary)")


if __name__ == "__main__":
    main()
