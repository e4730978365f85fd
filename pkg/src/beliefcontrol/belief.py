"""Continuous-discrete particle filter over stacked state particles.

Between measurements every particle follows the controlled SDE independently
(Euler-Maruyama); at measurement times particles are weighted by observation
likelihood and resampled with the low-variance (systematic) scheme.  Beliefs
are stored unweighted between updates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class BeliefError(Exception):
    """Base class for belief-engine failures."""


class NumericalBlowupError(BeliefError):
    """A particle became non-finite during propagation."""

    def __init__(self, indices):
        self.indices = np.atleast_1d(indices)
        super().__init__(f"non-finite particles after propagation at indices {self.indices.tolist()}")


class DegenerateUpdateError(BeliefError):
    """Every particle has zero likelihood for the received measurement."""


@dataclass(frozen=True)
class ParticleBelief:
    """Unweighted particle approximation of the state posterior.

    particles: (N, n_x) array; row i is state sample x_i.
    """

    particles: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.particles, dtype=float)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError(f"particles must be a non-empty (N, n_x) array, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("particles must be finite")
        object.__setattr__(self, "particles", p)

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def state_dim(self) -> int:
        return self.particles.shape[1]


@dataclass(frozen=True)
class MotionModel:
    """Control-affine SDE dx = (f(x) + g(x) u) dt + sigma(x) dW.

    All callables are vectorized over a leading particle axis:
    drift (N,d)->(N,d), control_gain (N,d)->(N,d,m), diffusion (N,d)->(N,d,q).
    `project` optionally maps post-step states back into the feasible domain
    (e.g. wall clamping); identity when None.
    """

    drift: Callable[[np.ndarray], np.ndarray]
    control_gain: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    control_dim: int
    noise_dim: int
    project: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass(frozen=True)
class ObservationModel:
    """Measurement z = l(x, v): a sampler from the truth and a likelihood.

    sample(x, rng) draws one observation at truth state x (shape (d,));
    likelihood(z, X) evaluates p(z | x) rowwise for X of shape (N, d).
    """

    sample: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    likelihood: Callable[[np.ndarray, np.ndarray], np.ndarray]


def mean(b: ParticleBelief) -> np.ndarray:
    """Arithmetic mean state of the belief."""
    return b.particles.mean(axis=0)


def entropy_diagnostic(b: ParticleBelief) -> float:
    """ln N, the (constant) entropy approximation of an unweighted particle set.

    Kept as a diagnostic of why particle entropy carries no localization
    information; use `conformal.uncertainty_measure` instead.
    """
    return float(np.log(b.n))


def propagate(
    b: ParticleBelief,
    model: MotionModel,
    u,
    dt: float,
    rng: np.random.Generator,
    substeps: int = 1,
) -> ParticleBelief:
    """Euler-Maruyama step of every particle under shared control u.

    x_i <- x_i + dt (f(x_i) + g(x_i) u) + sqrt(dt) sigma(x_i) w_i with
    independent standard-normal w_i per particle.  `substeps` subdivides dt
    for stiff models; default 1.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    u = np.asarray(u, dtype=float).ravel()
    if u.size != model.control_dim:
        raise ValueError(f"control has dim {u.size}, model expects {model.control_dim}")
    x = b.particles
    h = dt / substeps
    sqrt_h = np.sqrt(h)
    for _ in range(substeps):
        drift = model.drift(x) + np.einsum("ndm,m->nd", model.control_gain(x), u)
        w = rng.standard_normal((x.shape[0], model.noise_dim))
        noise = np.einsum("ndq,nq->nd", model.diffusion(x), w)
        x = x + h * drift + sqrt_h * noise
        if model.project is not None:
            x = model.project(x)
    bad = ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        raise NumericalBlowupError(np.flatnonzero(bad))
    return ParticleBelief(x)


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Low-variance resampling indices from normalized weights.

    A single uniform offset spaces N pointers evenly over the cumulative
    weights, so equal weights select every index exactly once.
    """
    n = weights.size
    positions = (np.arange(n) + rng.uniform()) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0  # guard rounding of the final bin edge
    return np.searchsorted(cumulative, positions, side="right")


def measurement_update(
    b: ParticleBelief,
    obs: ObservationModel,
    z,
    rng: np.random.Generator,
) -> ParticleBelief:
    """Weight particles by p(z|x) and resample back to N unweighted particles.

    Raises DegenerateUpdateError when all likelihoods vanish; the caller
    decides whether to skip the update (and log) or abort.
    """
    w = np.asarray(obs.likelihood(z, b.particles), dtype=float).ravel()
    if w.size != b.n:
        raise ValueError(f"likelihood returned {w.size} weights for {b.n} particles")
    if np.any(w < 0.0) or not np.all(np.isfinite(w)):
        raise ValueError("likelihood must be finite and nonnegative")
    total = w.sum()
    if total <= 0.0:
        raise DegenerateUpdateError("all particle likelihoods are zero for this measurement")
    idx = systematic_resample(w / total, rng)
    return ParticleBelief(b.particles[idx])


def export_csv(b: ParticleBelief, path) -> None:
    """Write the belief snapshot as CSV: particle_index,x0,...,x{n_x-1}."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["particle_index"] + [f"x{j}" for j in range(b.state_dim)])
        for i, row in enumerate(b.particles):
            writer.writerow([i] + [repr(float(v)) for v in row])


def step_noise_rng(seed: int, step: int) -> np.random.Generator:
    """Counter-based generator for propagation noise, keyed by (seed, step).

    Particle i consumes row i of the per-step noise block, so results do not
    depend on how particles are split across workers.
    """
    key = ((int(seed) & 0xFFFFFFFFFFFFFFFF) << 64) | (int(step) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))
