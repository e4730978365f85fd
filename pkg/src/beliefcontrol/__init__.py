"""Belief-space control toolkit for reach-avoid tasks under partial observability.

The toolkit composes three layers that run at different rates:

* a continuous-discrete particle filter (``belief``) that propagates a stacked
  particle belief between measurements and resamples at measurement times,
* an information-gathering controller (``lyapunov``) built on a learned
  action-value network whose negated maximum acts as a Lyapunov certificate
  over beliefs,
* a safety filter (``barrier``) that keeps a conformal quantile of per-particle
  barrier running minima nonpositive by solving a small quadratic program
  every control tick.

``envs`` bundles the benchmark environments, ``harness`` runs seeded
closed-loop episodes and aggregates metrics, and ``cli`` exposes the whole
pipeline as subcommands.
"""

from beliefcontrol.belief import (
    MotionModel,
    ObservationModel,
    ParticleBelief,
    entropy_diagnostic,
    mean,
    measurement_update,
    propagate,
)
from beliefcontrol.conformal import (
    RiskLevel,
    UncertaintySpec,
    conformal_quantile,
    localization_radius,
    uncertainty_measure,
)

__all__ = [
    "MotionModel",
    "ObservationModel",
    "ParticleBelief",
    "RiskLevel",
    "UncertaintySpec",
    "conformal_quantile",
    "entropy_diagnostic",
    "localization_radius",
    "mean",
    "measurement_update",
    "propagate",
    "uncertainty_measure",
]

__version__ = "0.1.0"
