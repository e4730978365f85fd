"""Command-line entry point.

Subcommands: train, eval, sweep, audit, bounds, toy.
Exit codes: 0 success, 1 configuration/usage error, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from beliefcontrol import envs as envs_mod
from beliefcontrol import harness, lyapunov, nn, training
from beliefcontrol.belief import ParticleBelief, entropy_diagnostic, measurement_update, propagate
from beliefcontrol.conformal import uncertainty_measure
from beliefcontrol.envs.core import step_truth


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="beliefcontrol", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    train = sub.add_parser("train", help="train a belief value network")
    train.add_argument("--env", required=True)
    train.add_argument("--weights", required=True, help="output weights path")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--episodes", type=int, default=None)
    train.add_argument("--config", default=None, help="environment geometry JSON override")

    ev = sub.add_parser("eval", help="run seeded closed-loop episodes")
    ev.add_argument("--config", default=None, help="run-config JSON (overrides other flags)")
    ev.add_argument("--env", default=None)
    ev.add_argument("--stack", default="reference", choices=harness.STACKS)
    ev.add_argument("--episodes", type=int, default=100)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--weights", default=None)
    ev.add_argument("--out", default=None)
    ev.add_argument("--mode", default="finite_time", choices=("asymptotic", "finite_time"))
    ev.add_argument("--c", type=float, default=0.99)
    ev.add_argument("--eta", type=float, default=0.4)
    ev.add_argument("--workers", type=int, default=1)

    sweep = sub.add_parser("sweep", help="finite-time coefficient sweep plus switching baseline")
    sweep.add_argument("--env", default="bumper")
    sweep.add_argument("--weights", required=True)
    sweep.add_argument("--etas", default="2,1,0.4,0.1")
    sweep.add_argument("--episodes", type=int, default=100)
    sweep.add_argument("--seed", type=int, default=0)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--workers", type=int, default=1)

    audit = sub.add_parser("audit", help="certificate quality audit on sampled beliefs")
    audit.add_argument("--env", default="two_particle")
    audit.add_argument("--weights", required=True)
    audit.add_argument("--samples", type=int, default=4000)
    audit.add_argument("--rollouts", type=int, default=1000)
    audit.add_argument("--seed", type=int, default=0)
    audit.add_argument("--out", default=None, help="CSV output path")

    bounds = sub.add_parser("bounds", help="closed-form certificate validity constants")
    bounds.add_argument("--gamma", type=float, required=True)
    bounds.add_argument("--rmax", type=float, required=True)
    bounds.add_argument("--wmax", type=float, required=True)
    bounds.add_argument("--eta", type=float, required=True)
    bounds.add_argument("--w0", type=float, default=None, help="also print ceil(w0/eta)")

    toy = sub.add_parser("toy", help="open-loop uncertainty-measure trace")
    toy.add_argument("--env", default="example1")
    toy.add_argument("--seed", type=int, default=0)
    toy.add_argument("--control", type=float, default=0.1)
    toy.add_argument("--out", default=None, help="trace CSV path (default <env>_trace.csv)")

    return parser


def _cmd_train(args) -> int:
    episodes = {"episodes": args.episodes} if args.episodes else {}
    cfg = training.train_preset(args.env)
    if episodes:
        import dataclasses

        cfg = dataclasses.replace(cfg, **episodes)
    env_overrides = None
    if args.config:
        with open(args.config) as f:
            env_overrides = json.load(f)
    training.train_env(args.env, seed=args.seed, weights_out=args.weights, config=cfg, env_overrides=env_overrides)
    print(f"saved weights to {args.weights}")
    return 0


def _run_config_from_args(args) -> harness.RunConfig:
    if args.config:
        with open(args.config) as f:
            raw = json.load(f)
        mode_cfg = raw.pop("mode", {"variant": "finite_time", "eta": 0.4})
        mode = lyapunov.BclfMode(
            mode_cfg.get("variant", "finite_time"),
            c=mode_cfg.get("c", 0.99),
            eta=mode_cfg.get("eta", 0.4),
        )
        return harness.RunConfig(mode=mode, **raw)
    if not args.env:
        raise harness.ConfigError("eval needs --env or --config")
    mode = lyapunov.BclfMode(args.mode, c=args.c, eta=args.eta)
    return harness.RunConfig(
        env=args.env,
        stack=args.stack,
        mode=mode,
        episodes=args.episodes,
        master_seed=args.seed,
        weights=args.weights,
        out_dir=args.out,
        workers=args.workers,
    )


def _cmd_eval(args) -> int:
    config = _run_config_from_args(args)
    summary, _ = harness.evaluate(config)
    print(
        f"{config.env} {config.stack}: reach={summary.reach_rate:.3f} "
        f"avoid={summary.avoid_rate:.3f} sr={summary.success_rate:.3f} "
        f"pl={summary.pl_mean:.3f}+/-{summary.pl_std:.3f} (n={summary.n_episodes})"
    )
    return 0


def _cmd_sweep(args) -> int:
    etas = [float(v) for v in args.etas.split(",") if v.strip()]
    rows = []
    for eta in etas:
        config = harness.RunConfig(
            env=args.env,
            stack="full",
            mode=lyapunov.BclfMode.finite_time(eta),
            episodes=args.episodes,
            master_seed=args.seed,
            weights=args.weights,
            workers=args.workers,
        )
        summary, _ = harness.evaluate(config)
        rows.append(harness.summary_row(config, summary))
        print(f"eta={eta}: sr={summary.success_rate:.3f} pl_median={summary.pl_median:.3f}")
    config = harness.RunConfig(
        env=args.env,
        stack="switching",
        episodes=args.episodes,
        master_seed=args.seed,
        weights=args.weights,
        workers=args.workers,
    )
    summary, _ = harness.evaluate(config)
    rows.append(harness.summary_row(config, summary))
    print(f"switching: sr={summary.success_rate:.3f} pl_median={summary.pl_median:.3f}")
    os.makedirs(args.out, exist_ok=True)
    harness.write_summary_csv(os.path.join(args.out, "summary.csv"), rows)
    return 0


def _cmd_audit(args) -> int:
    env = envs_mod.build(args.env)
    mdp = envs_mod.make_mdp(env)
    qnet = nn.load_weights(args.weights)
    rng = np.random.default_rng(args.seed)
    rows = lyapunov.certificate_audit(qnet, mdp, n_samples=args.samples, rng=rng, n_rollouts=args.rollouts)
    for row in rows:
        fpr = "-" if row.fpr is None or math.isnan(row.fpr) else f"{row.fpr:.4f}"
        print(f"{row.condition}: tpr={row.tpr:.4f} fpr={fpr} n={row.n}")
    if args.out:
        lyapunov.write_audit_csv(rows, args.out)
    return 0


def _cmd_bounds(args) -> int:
    tb = lyapunov.theory_bounds(args.gamma, args.rmax, args.wmax, args.eta)
    print(f"c_min={tb.c_min:.6f}")
    print(f"asymptotic_w_cap={tb.asymptotic_w_cap:.6f} valid={tb.asymptotic_valid}")
    print(f"finite_w_cap={tb.finite_w_cap:.6f} valid={tb.finite_valid}")
    if args.w0 is not None:
        print(f"settling_bound={lyapunov.settling_time_bound(args.w0, args.eta)}")
    return 0


def _cmd_toy(args) -> int:
    env = envs_mod.build(args.env)
    rng = np.random.default_rng(args.seed)
    x = env.initial_state(rng)
    b = env.initial_belief(rng, env.n_particles)
    u = np.full(env.motion.control_dim, args.control)
    out = args.out or f"{args.env}_trace.csv"
    n_steps = round(env.horizon / env.dt)
    with open(out, "w") as f:
        f.write("t,r_eps,entropy,std,measured\n")
        for k in range(n_steps):
            x, z = step_truth(env, x, u, rng, step=k)
            b = propagate(b, env.motion, u, env.dt, rng)
            measured = 0
            if z is not None:
                measured = 1
                try:
                    b = measurement_update(b, env.observation, z, rng)
                except Exception:
                    pass
            r = uncertainty_measure(b, env.uncertainty) if env.uncertainty else math.nan
            std = float(np.mean(np.std(b.particles, axis=0)))
            f.write(f"{(k + 1) * env.dt!r},{r!r},{entropy_diagnostic(b)!r},{std!r},{measured}\n")
    print(f"wrote {out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "audit": _cmd_audit,
    "bounds": _cmd_bounds,
    "toy": _cmd_toy,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("BELIEFCONTROL_LOGLEVEL", "WARNING"))
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage())
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (harness.ConfigError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except nn.TrainingDivergedError as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
