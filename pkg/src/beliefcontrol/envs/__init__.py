"""Benchmark environments: simulators, geometry, and the belief MDP wrapper."""

from beliefcontrol.envs.builders import (
    antenna,
    build,
    bumper,
    example1_toy,
    free_flyer,
    lightdark,
    load_config,
    make_mdp,
    rect_obstacle_barrier,
    two_particle_toy,
)
from beliefcontrol.envs.core import (
    BeliefMdp,
    Environment,
    TwoParticleMdp,
    step_truth,
    truth_step,
)

__all__ = [
    "BeliefMdp",
    "Environment",
    "TwoParticleMdp",
    "antenna",
    "build",
    "bumper",
    "example1_toy",
    "free_flyer",
    "lightdark",
    "load_config",
    "make_mdp",
    "rect_obstacle_barrier",
    "step_truth",
    "truth_step",
    "two_particle_toy",
]
