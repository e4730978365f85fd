import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beliefcontrol.belief import ParticleBelief
from beliefcontrol.conformal import (
    RiskLevel,
    UncertaintySpec,
    conformal_quantile,
    conformal_rank,
    localization_radius,
    uncertainty_measure,
)


def brute_force_rank(k: int, delta: float) -> int:
    """Smallest r with r >= (k+1)(1-delta); sentinel rank k+1 if none fits."""
    target = (k + 1) * (1.0 - delta)
    for r in range(1, k + 2):
        if r >= target:
            return r
    return k + 1


class TestConformalQuantile:
    def test_rank_formula_k2000(self):
        rng = np.random.default_rng(0)
        scores = rng.standard_normal(2000)
        bound, rank = conformal_quantile(scores, RiskLevel(0.05))
        assert rank == 1901
        assert bound == np.sort(scores)[1900]

    def test_sentinel_when_k_too_small(self):
        # k=5, delta=0.01: rank 6 exceeds the sample, bound is the +inf sentinel
        bound, rank = conformal_quantile([1.0, 2.0, 3.0, 4.0, 5.0], RiskLevel(0.01))
        assert rank == 6
        assert math.isinf(bound)

    def test_rank_matches_brute_force_on_random_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            k = int(rng.integers(1, 5000))
            delta = float(rng.uniform(0.001, 0.999))
            assert conformal_rank(k, delta) == brute_force_rank(k, delta)

    def test_monte_carlo_coverage(self):
        # k=199, delta=0.1, 10k trials: empirical coverage >= 0.9 - 3 sigma
        rng = np.random.default_rng(2)
        trials = 10_000
        k = 199
        draws = rng.standard_normal((trials, k + 1))
        calib = np.sort(draws[:, :k], axis=1)
        r = conformal_rank(k, 0.1)
        bounds = calib[:, r - 1]
        coverage = float(np.mean(draws[:, k] <= bounds))
        assert coverage >= 0.9 - 3.0 * math.sqrt(0.9 * 0.1 / trials)

    def test_empty_scores_rejected(self):
        with pytest.raises(ValueError):
            conformal_quantile([], RiskLevel(0.1))

    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=60), st.floats(0.01, 0.99))
    @settings(max_examples=200, deadline=None)
    def test_permutation_invariance_and_rank_coverage(self, scores, delta):
        level = RiskLevel(delta)
        bound, rank = conformal_quantile(scores, level)
        rng = np.random.default_rng(0)
        shuffled = list(np.array(scores)[rng.permutation(len(scores))])
        bound2, rank2 = conformal_quantile(shuffled, level)
        assert bound == bound2 and rank == rank2
        if math.isfinite(bound):
            # at least r of the k scores are <= the bound
            assert sum(s <= bound for s in scores) >= rank

    @given(st.lists(st.floats(-50, 50), min_size=5, max_size=80))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_delta(self, scores):
        b1, _ = conformal_quantile(scores, RiskLevel(0.05))
        b2, _ = conformal_quantile(scores, RiskLevel(0.2))
        assert b1 >= b2


class TestLocalizationRadius:
    def test_identical_particles_zero_radius(self):
        b = ParticleBelief(np.ones((50, 2)) * 3.0)
        spec = UncertaintySpec(0.1, RiskLevel(0.2))
        assert localization_radius(b, spec) == 0.0

    def test_equispaced_1d_known_rank(self):
        # 199 equispaced points, delta=0.5: bound is the 100th smallest |x - mean|
        xs = np.linspace(-1.0, 1.0, 199)[:, None]
        spec = UncertaintySpec(0.1, RiskLevel(0.5))
        got = localization_radius(ParticleBelief(xs), spec)
        expected = np.sort(np.abs(xs[:, 0] - xs.mean()))[99]
        assert got == pytest.approx(expected, abs=0.0)

    def test_scaling_homogeneity(self):
        rng = np.random.default_rng(3)
        pts = rng.standard_normal((200, 3))
        spec = UncertaintySpec(0.1, RiskLevel(0.1))
        r1 = localization_radius(ParticleBelief(pts), spec)
        r2 = localization_radius(ParticleBelief(2.0 * pts), spec)
        assert r2 == pytest.approx(2.0 * r1, rel=1e-12)


class TestUncertaintyMeasure:
    def test_point_mass(self):
        b = ParticleBelief(np.zeros((100, 1)))
        assert uncertainty_measure(b, UncertaintySpec(0.1, RiskLevel(0.05))) == -0.1

    def test_shrinking_delta_never_decreases(self):
        rng = np.random.default_rng(4)
        b = ParticleBelief(rng.standard_normal((500, 2)))
        r_loose = uncertainty_measure(b, UncertaintySpec(0.1, RiskLevel(0.05)))
        r_tight = uncertainty_measure(b, UncertaintySpec(0.1, RiskLevel(0.01)))
        assert r_tight >= r_loose

    def test_infinite_when_undersampled(self):
        b = ParticleBelief(np.array([[0.0], [1.0]]))
        r = uncertainty_measure(b, UncertaintySpec(0.1, RiskLevel(0.01)))
        assert math.isinf(r) and r > 0
