import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beliefcontrol import barrier, envs, qp
from beliefcontrol.belief import MotionModel, ParticleBelief
from beliefcontrol.conformal import RiskLevel


def lightdark_model():
    return envs.lightdark().motion


@pytest.fixture
def lightdark_spec():
    return envs.lightdark().safety


class TestHistoryState:
    def test_init_is_current_h(self, lightdark_spec):
        b = ParticleBelief(np.full((10, 1), 5.0))
        xi = barrier.init_history(b, lightdark_spec)
        assert np.all(xi.xi == 5.0)  # h = 10 - x = 5

    def test_init_keeps_unsafe_entry(self, lightdark_spec):
        b = ParticleBelief(np.array([[10.2], [3.0]]))
        xi = barrier.init_history(b, lightdark_spec)
        assert xi.xi[0] == pytest.approx(-0.2)

    def test_init_matches_elementwise_map(self, lightdark_spec):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-10, 9, size=(100, 1))
        xi = barrier.init_history(ParticleBelief(pts), lightdark_spec)
        assert np.allclose(xi.xi, 10.0 - pts[:, 0])

    def test_update_running_min(self, lightdark_spec):
        xi = barrier.HistoryState(np.array([2.0, 0.5]))
        b = ParticleBelief(np.array([[5.0], [10.0 + 1.0]]))  # h = 5, -1
        out = barrier.update_history(xi, b, lightdark_spec)
        assert np.allclose(out.xi, [2.0, -1.0])

    def test_update_ignores_increases(self, lightdark_spec):
        xi = barrier.HistoryState(np.array([1.0]))
        b = ParticleBelief(np.array([[2.0]]))  # h = 8 > 1
        assert barrier.update_history(xi, b, lightdark_spec).xi[0] == 1.0

    def test_episode_trace_equals_brute_force_min(self, lightdark_spec):
        rng = np.random.default_rng(1)
        model = lightdark_model()
        b = ParticleBelief(rng.uniform(-5, 5, size=(50, 1)))
        xi = barrier.init_history(b, lightdark_spec)
        h_trace = [lightdark_spec.barrier.value(b.particles)]
        from beliefcontrol.belief import propagate

        for _ in range(30):
            b = propagate(b, model, [3.0], 0.05, rng)
            xi = barrier.update_history(xi, b, lightdark_spec)
            h_trace.append(lightdark_spec.barrier.value(b.particles))
        assert np.allclose(xi.xi, np.min(h_trace, axis=0))

    def test_monotone_nonincreasing(self, lightdark_spec):
        rng = np.random.default_rng(2)
        xi = barrier.HistoryState(rng.uniform(0, 5, 20))
        b = ParticleBelief(rng.uniform(-10, 11, size=(20, 1)))
        out = barrier.update_history(xi, b, lightdark_spec)
        assert np.all(out.xi <= xi.xi + 1e-15)


class TestTopPSelect:
    def test_formula_n8000(self):
        xi = barrier.HistoryState(np.linspace(0, 1, 8000))
        idx, p, c = barrier.top_p_select(xi, RiskLevel(0.1))
        assert p == 7201
        assert len(idx) == 7201

    def test_boundary_count_yields_max_score(self):
        # N=99 at delta=0.01 sits exactly at the minimum sample count
        # (1-delta)/delta = 99: the bound is finite, the largest score
        xi = barrier.HistoryState(np.linspace(0.5, 2.0, 99))
        idx, p, c = barrier.top_p_select(xi, RiskLevel(0.01))
        assert p == 99
        assert c == pytest.approx(-0.5)
        assert len(idx) == 99

    def test_sentinel_when_p_exceeds_n(self):
        # below the minimum sample count the guarantee is not certifiable
        xi = barrier.HistoryState(np.linspace(0.5, 2.0, 99))
        idx, p, c = barrier.top_p_select(xi, RiskLevel(0.005))
        assert p == 100
        assert math.isinf(c)
        assert len(idx) == 99

    def test_all_positive_history_gives_negative_bound(self):
        xi = barrier.HistoryState(np.linspace(0.2, 3.0, 200))
        _, _, c = barrier.top_p_select(xi, RiskLevel(0.1))
        assert c < 0.0

    def test_selection_keeps_largest_xi(self):
        rng = np.random.default_rng(3)
        vals = rng.standard_normal(500)
        xi = barrier.HistoryState(vals)
        idx, p, c = barrier.top_p_select(xi, RiskLevel(0.2))
        assert len(idx) == p
        worst_kept = vals[idx].min()
        excluded = np.delete(vals, idx)
        assert np.all(excluded <= worst_kept + 1e-15)


class TestIntervalRisk:
    def test_single_interval_identity(self):
        assert barrier.interval_risk(RiskLevel(0.05), 1).delta == pytest.approx(0.05, abs=1e-15)

    def test_known_value(self):
        # independent evaluation of 1 - 0.95^(1/50)
        expected = 1.0 - 0.95 ** (1.0 / 50.0)
        got = barrier.interval_risk(RiskLevel(0.05), 50).delta
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.0010253, abs=1e-7)

    @given(st.floats(0.001, 0.5), st.integers(1, 1000))
    @settings(max_examples=200, deadline=None)
    def test_round_trip_identity(self, delta_a, m):
        bar = barrier.interval_risk(RiskLevel(delta_a), m)
        assert (1.0 - bar.delta) ** m == pytest.approx(1.0 - delta_a, abs=1e-12)


class TestRcbfRow:
    def test_lightdark_hand_values(self, lightdark_spec):
        a, b = barrier.rcbf_row(np.array([0.0]), lightdark_model(), lightdark_spec)
        assert a[0] == pytest.approx(1.0 / 100.0, abs=1e-15)
        assert b == pytest.approx(10.0 - 1e-7, abs=1e-12)

    def test_zero_drift_zero_noise_reduces_to_gain_term(self):
        # sigma=0, f=0: row is (g' dB) u <= kappa h exactly
        spec = barrier.SafetySpec(
            barrier=barrier.halfspace_barrier([1.0], 10.0),
            alpha3_gain=2.0,
            delta_bar=RiskLevel(0.1),
            control_bounds=(np.array([-np.inf]), np.array([np.inf])),
        )
        model = MotionModel(
            drift=lambda x: np.zeros_like(x),
            control_gain=lambda x: np.ones((x.shape[0], 1, 1)),
            diffusion=lambda x: np.zeros((x.shape[0], 1, 1)),
            control_dim=1,
            noise_dim=1,
        )
        x = np.array([4.0])  # h = 6, dB = 1/36
        a, b = barrier.rcbf_row(x, model, spec)
        assert a[0] == pytest.approx(1.0 / 36.0)
        assert b == pytest.approx(2.0 * 6.0)

    def test_singular_at_unsafe_state(self, lightdark_spec):
        with pytest.raises(barrier.SingularBarrierError):
            barrier.rcbf_row(np.array([10.5]), lightdark_model(), lightdark_spec)

    def test_generator_drift_matches_monte_carlo(self, lightdark_spec):
        # empirical mean one-step drift of B = 1/h matches the row's LHS
        model = lightdark_model()
        x0 = np.array([5.0])
        u = np.array([2.0])
        dt = 1e-4
        n = 400_000
        rng = np.random.default_rng(4)
        a, _ = barrier.rcbf_row(x0, model, lightdark_spec)
        grad = lightdark_spec.barrier.grad(x0[None, :])
        hess = lightdark_spec.barrier.hess(x0[None, :])
        h = float(lightdark_spec.barrier.value(x0[None, :])[0])
        db = -grad[0] / h**2
        d2b = 2.0 * np.outer(grad[0], grad[0]) / h**3 - hess[0] / h**2
        f = model.drift(x0[None, :])[0]
        sig = model.diffusion(x0[None, :])[0]
        lhs = float(db @ (f + model.control_gain(x0[None, :])[0] @ u)) + 0.5 * float(
            np.trace(sig.T @ d2b @ sig)
        )
        # simulate one Euler step from x0 many times
        w = rng.standard_normal((n, 1))
        x1 = x0[0] + dt * (f[0] + u[0]) + math.sqrt(dt) * sig[0, 0] * w[:, 0]
        b1 = 1.0 / (10.0 - x1)
        drift_samples = (b1 - 1.0 / h) / dt
        mc = float(drift_samples.mean())
        se = float(drift_samples.std() / math.sqrt(n))
        assert abs(mc - lhs) <= 3.0 * se + 1e-6

    def test_row_is_affine_in_u(self, lightdark_spec):
        # LHS(u) - LHS(0) == a'u for arbitrary controls
        model = lightdark_model()
        x = np.array([2.5])
        a, b = barrier.rcbf_row(x, model, lightdark_spec)

        def lhs(u):
            grad = lightdark_spec.barrier.grad(x[None, :])[0]
            hess = lightdark_spec.barrier.hess(x[None, :])[0]
            h = float(lightdark_spec.barrier.value(x[None, :])[0])
            db = -grad / h**2
            d2b = 2.0 * np.outer(grad, grad) / h**3 - hess / h**2
            f = model.drift(x[None, :])[0]
            g = model.control_gain(x[None, :])[0]
            sig = model.diffusion(x[None, :])[0]
            return float(db @ (f + g @ np.atleast_1d(u))) + 0.5 * float(np.trace(sig.T @ d2b @ sig))

        for u in (-3.0, 0.0, 1.7, 9.2):
            assert lhs(u) - lhs(0.0) == pytest.approx(float(a[0] * u), abs=1e-12)


class TestSafetyFilter:
    def test_inactive_when_far_from_boundary(self, lightdark_spec):
        b = ParticleBelief(np.random.default_rng(5).uniform(-9, -5, size=(200, 1)))
        xi = barrier.init_history(b, lightdark_spec)
        u, report = barrier.safety_filter(b, xi, [0.3], lightdark_model(), lightdark_spec)
        assert u[0] == pytest.approx(0.3, abs=1e-9)
        assert report.status == "optimal"
        assert report.slack <= 1e-9

    def test_single_active_row_is_halfspace_projection(self):
        spec = barrier.SafetySpec(
            barrier=barrier.halfspace_barrier([1.0], 10.0),
            alpha3_gain=1.0,
            delta_bar=RiskLevel(0.4),
            control_bounds=(np.array([-50.0]), np.array([50.0])),
        )
        b = ParticleBelief(np.full((5, 1), 9.0))  # identical particles, h = 1
        xi = barrier.init_history(b, spec)
        u_ig = np.array([30.0])
        a, rhs = barrier.rcbf_row(np.array([9.0]), lightdark_model(), spec)
        expected = u_ig - max(0.0, float(a @ u_ig) - rhs) / float(a @ a) * a
        # hard rows: exact projection
        u, report = barrier.safety_filter(b, xi, u_ig, lightdark_model(), spec, slack_weight=None)
        assert u[0] == pytest.approx(expected[0], abs=1e-8)
        assert report.n_active >= 1
        # default soft slack: projection up to the 1/(2w) compliance
        u_soft, report_soft = barrier.safety_filter(b, xi, u_ig, lightdark_model(), spec)
        assert u_soft[0] == pytest.approx(expected[0], abs=1e-4)
        assert report_soft.certificate_violation  # the relaxed row is flagged

    def test_unsafe_selected_counted_and_excluded(self, lightdark_spec):
        pts = np.vstack([np.full((99, 1), 5.0), [[10.5]]])
        b = ParticleBelief(pts)
        xi = barrier.init_history(b, lightdark_spec)
        u, report = barrier.safety_filter(b, xi, [1.0], lightdark_model(), lightdark_spec)
        assert report.n_unsafe_selected == 1
        assert report.status == "optimal"

    def test_report_record_fields(self, lightdark_spec):
        b = ParticleBelief(np.full((50, 1), 0.0))
        xi = barrier.init_history(b, lightdark_spec)
        _, report = barrier.safety_filter(b, xi, [0.0], lightdark_model(), lightdark_spec)
        rec = report.record()
        assert set(rec) == {"p", "C", "n_active", "slack", "status"}


class TestSmoothSet:
    def test_identical_terms_closed_form(self):
        beta = 50.0
        c = 2.5
        parts = [barrier.affine_barrier([1.0], -c), barrier.affine_barrier([1.0], -c)]
        comp = barrier.smooth_set(parts, "min", beta)
        # both h_i(0) = c: smooth min is c - ln(2)/beta
        assert comp.value(np.zeros((1, 1)))[0] == pytest.approx(c - math.log(2.0) / beta, abs=1e-12)

    def test_high_sharpness_approaches_hard_min(self):
        beta = 1e3
        parts = [barrier.affine_barrier([1.0], 3.0), barrier.affine_barrier([-1.0], -7.0)]
        comp = barrier.smooth_set(parts, "min", beta)
        for x in (4.0, 5.0, 6.5):
            hard = min(x - 3.0, 7.0 - x)
            assert abs(comp.value(np.array([[x]]))[0] - hard) <= 1e-3

    def test_gradient_matches_finite_differences(self):
        env = envs.antenna()
        fn = env.safety.barrier
        rng = np.random.default_rng(6)
        pts = rng.uniform(-4, 4, size=(20, 2))
        grad = fn.grad(pts)
        eps = 1e-6
        for i in range(len(pts)):
            for j in range(2):
                xp = pts.copy()
                xp[i, j] += eps
                xm = pts.copy()
                xm[i, j] -= eps
                fd = (fn.value(xp)[i] - fn.value(xm)[i]) / (2 * eps)
                assert abs(fd - grad[i, j]) <= 1e-5 * max(1.0, abs(fd))

    def test_under_approximation_both_kinds(self):
        rng = np.random.default_rng(7)
        parts = [barrier.affine_barrier(rng.standard_normal(2), rng.uniform(-1, 1)) for _ in range(4)]
        pts = rng.uniform(-3, 3, size=(100, 2))
        vals = np.stack([p.value(pts) for p in parts])
        smin = barrier.smooth_set(parts, "min", 30.0)
        smax = barrier.smooth_set(parts, "max", 30.0)
        assert np.all(smin.value(pts) <= vals.min(axis=0) + 1e-12)
        assert np.all(smax.value(pts) <= vals.max(axis=0) + 1e-12)

    def test_rejects_bad_arguments(self):
        part = barrier.affine_barrier([1.0], 0.0)
        with pytest.raises(ValueError):
            barrier.smooth_set([part], "median", 10.0)
        with pytest.raises(ValueError):
            barrier.smooth_set([part], "min", 0.0)
        with pytest.raises(ValueError):
            barrier.smooth_set([], "min", 10.0)
