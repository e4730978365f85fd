"""Goal/avoid region primitives shared by environments and controllers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BallRegion:
    """Closed euclidean ball {x : ||x - center|| <= radius}.

    States with more components than the center (e.g. appended velocities)
    are tested on their leading components only.
    """

    center: np.ndarray
    radius: float

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)[: self.center.size]
        return float(np.linalg.norm(x - self.center)) <= self.radius

    def contains_ball(self, center, eps: float) -> bool:
        """True if the eps-ball around `center` fits inside the region."""
        c = np.asarray(center, dtype=float)[: self.center.size]
        return float(np.linalg.norm(c - self.center)) + eps <= self.radius


@dataclass(frozen=True)
class BoxRegion:
    """Axis-aligned box {x : lo <= x <= hi} (componentwise)."""

    lo: np.ndarray
    hi: np.ndarray

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)[: self.lo.size]
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def contains_ball(self, center, eps: float) -> bool:
        c = np.asarray(center, dtype=float)[: self.lo.size]
        return bool(np.all(c - eps >= self.lo) and np.all(c + eps <= self.hi))


def region_from_config(cfg: dict):
    """Build a region from a geometry-file entry (kind: ball | box)."""
    kind = cfg["kind"]
    if kind == "ball":
        return BallRegion(np.asarray(cfg["center"], dtype=float), float(cfg["radius"]))
    if kind == "box":
        return BoxRegion(np.asarray(cfg["lo"], dtype=float), np.asarray(cfg["hi"], dtype=float))
    raise ValueError(f"unknown region kind {kind!r}")
