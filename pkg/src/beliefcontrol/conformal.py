"""Distribution-free quantile bounds and the belief uncertainty measure.

Given k i.i.d. calibration scores, the rank-r order statistic with
r = ceil((k+1)(1-delta)) upper-bounds a fresh draw with probability at
least 1-delta.  Applied to particle distances from the belief mean this
yields a certified localization radius; subtracting the target radius
gives the scalar uncertainty measure used by the information-gathering
controller and its reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from beliefcontrol.belief import ParticleBelief, mean


@dataclass(frozen=True)
class RiskLevel:
    """Miss probability delta in (0, 1) for a conformal bound."""

    delta: float

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must be in (0,1), got {self.delta}")

    def min_samples(self) -> int:
        """Smallest calibration size that yields a finite bound."""
        return math.ceil((1.0 - self.delta) / self.delta)


@dataclass(frozen=True)
class UncertaintySpec:
    """Localization target: ball radius epsilon at risk level delta_l."""

    epsilon: float
    delta_l: RiskLevel = field(default_factory=lambda: RiskLevel(0.01))

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def conformal_rank(k: int, delta: float) -> int:
    """Rank r = ceil((k+1)(1-delta)) of the bounding order statistic.

    Evaluated in ordinary float arithmetic; when (k+1)(1-delta) rounds just
    above an integer the rank is bumped up, which errs on the conservative
    (larger bound) side.
    """
    if k < 1:
        raise ValueError("need at least one calibration score")
    return math.ceil((k + 1) * (1.0 - delta))


def conformal_quantile(scores, delta: RiskLevel) -> tuple[float, int]:
    """Conformal upper bound over calibration `scores` at risk `delta`.

    Returns ``(bound, rank)`` where bound is the rank-th smallest score, or
    +inf (the appended sentinel) when rank exceeds the sample count, i.e. when
    k < (1-delta)/delta and no finite bound is certifiable.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    k = scores.size
    if k == 0:
        raise ValueError("empty score set")
    if not np.all(np.isfinite(scores)):
        raise ValueError("calibration scores must be finite")
    r = conformal_rank(k, delta.delta)
    if r > k:
        return math.inf, r
    # stable full sort; ties resolved by value so the bound is deterministic
    ordered = np.sort(scores, kind="stable")
    return float(ordered[r - 1]), r


def localization_radius(b: ParticleBelief, spec: UncertaintySpec) -> float:
    """Certified radius: conformal bound on particle distance to the mean."""
    mu = mean(b)
    rho = np.linalg.norm(b.particles - mu, axis=1)
    bound, _ = conformal_quantile(rho, spec.delta_l)
    return bound


def uncertainty_measure(b: ParticleBelief, spec: UncertaintySpec) -> float:
    """R = localization_radius - epsilon; R <= 0 certifies the epsilon-ball."""
    return localization_radius(b, spec) - spec.epsilon
