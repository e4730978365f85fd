import math

import numpy as np
import pytest

from beliefcontrol import envs, lyapunov, nn
from beliefcontrol.belief import ParticleBelief
from beliefcontrol.conformal import RiskLevel, UncertaintySpec
from beliefcontrol.regions import BallRegion


def constant_head_net(bias, input_dim=2, gamma=0.99):
    """Encoder-free network whose Q vector is a fixed bias."""
    head = nn.Mlp([np.zeros((len(bias), input_dim))], [np.asarray(bias, dtype=float)], "relu")
    return nn.QNetwork(None, head, len(bias), gamma)


def pair(x1, x2):
    return ParticleBelief(np.array([[x1], [x2]]))


class TestBclfValue:
    def test_constant_head(self):
        q = constant_head_net([1.0, -2.0, 0.5])
        assert lyapunov.bclf_value(q, pair(0.3, -0.3)) == -1.0

    def test_finite_for_finite_belief(self):
        rng = np.random.default_rng(0)
        enc = nn.mlp_init([2, 8, 4], "relu", rng)
        head = nn.mlp_init([4, 8, 3], "relu", rng)
        q = nn.QNetwork(enc, head, 3)
        b = ParticleBelief(rng.uniform(-100, 100, (50, 2)))
        assert math.isfinite(lyapunov.bclf_value(q, b))


class TestExpectedNextValue:
    def test_direct_formula(self):
        q = constant_head_net([-5.0, -7.0])
        # gamma=0.99, r=-1, Q=-5 -> (r - Q)/gamma = 4/0.99
        assert lyapunov.expected_next_value(q, pair(0, 1), 0, -1.0) == pytest.approx(4.0 / 0.99)

    def test_terminal_one_step(self):
        q = constant_head_net([-1.0])
        assert lyapunov.expected_next_value(q, pair(0, 1), 0, -1.0) == 0.0

    def test_bellman_identity_is_exact_algebra(self):
        rng = np.random.default_rng(1)
        q = constant_head_net(list(rng.uniform(-9, -1, 4)), gamma=0.97)
        b = pair(0.5, 2.0)
        for a in range(4):
            r = float(rng.uniform(-5, -1))
            ew = lyapunov.expected_next_value(q, b, a, r)
            qa = float(nn.q_values(q, b)[a])
            assert q.gamma * ew + qa == pytest.approx(r, abs=1e-12)


class TestDecreaseAdmissible:
    def test_asymptotic_true_case(self):
        # W=10, c=0.9, expected next 8.9 -> admissible
        q = constant_head_net([-10.0])
        mode = lyapunov.BclfMode.asymptotic(0.9)
        r = 0.99 * 8.9 - 10.0  # choose r so that (r - Q)/gamma = 8.9
        assert lyapunov.decrease_admissible(q, pair(0, 5), 0, mode, r)

    def test_finite_time_insufficient_drop(self):
        # W=10, eta=0.4, delta W = -0.3 -> not admissible
        q = constant_head_net([-10.0])
        mode = lyapunov.BclfMode.finite_time(0.4)
        r = 0.99 * 9.7 - 10.0
        assert not lyapunov.decrease_admissible(q, pair(0, 5), 0, mode, r)

    def test_finite_time_min_branch(self):
        # W=0.2 < eta=0.4: requirement is delta W <= -0.2; -0.25 passes
        q = constant_head_net([-0.2])
        mode = lyapunov.BclfMode.finite_time(0.4)
        r = 0.99 * (0.2 - 0.25) - 0.2
        assert lyapunov.decrease_admissible(q, pair(0, 5), 0, mode, r)

    def test_admissible_set_monotone_in_c(self):
        rng = np.random.default_rng(2)
        q = constant_head_net(list(rng.uniform(-9, -1, 5)))
        b = pair(1.0, 3.0)
        r = -1.5
        for _ in range(20):
            c1, c2 = sorted(rng.uniform(0.01, 0.99, 2))
            adm1 = {a for a in range(5) if lyapunov.decrease_admissible(q, b, a, lyapunov.BclfMode.asymptotic(c1), r)}
            adm2 = {a for a in range(5) if lyapunov.decrease_admissible(q, b, a, lyapunov.BclfMode.asymptotic(c2), r)}
            assert adm1 <= adm2


class TestReward:
    def make_spec(self):
        return UncertaintySpec(0.1, RiskLevel(0.05))

    def test_positive_uncertainty(self):
        rng = np.random.default_rng(3)
        b = ParticleBelief(rng.uniform(-4, 4, (500, 1)))
        spec = self.make_spec()
        from beliefcontrol.conformal import uncertainty_measure

        r_eps = uncertainty_measure(b, spec)
        assert lyapunov.reward(b, spec) == pytest.approx(-1.0 - r_eps)

    def test_localized_is_terminal_zero(self):
        b = ParticleBelief(np.zeros((100, 1)))
        assert lyapunov.reward(b, self.make_spec()) == 0.0

    def test_flat_toy_reward(self):
        env = envs.two_particle_toy()
        assert env.reward_of(pair(3.0, -2.0)) == -1.0
        assert env.reward_of(pair(0.04, -0.04)) == 0.0


class TestIgControl:
    def goal(self, eps=0.5):
        region = BallRegion(np.array([0.0]), 1.0)
        unc = UncertaintySpec(eps, RiskLevel(0.1))
        return lyapunov.GoalSpec(region, unc, lambda mu: np.clip(-mu, -10, 10))

    def test_localized_returns_reference(self):
        q = constant_head_net([-3.0, -4.0], input_dim=100)
        b = ParticleBelief(np.full((100, 1), 0.2))
        actions = np.array([[-1.0], [1.0]])
        u, status = lyapunov.ig_control(q, b, self.goal(), lyapunov.BclfMode.asymptotic(0.99), actions)
        assert status is lyapunov.IgStatus.REFERENCE
        assert u[0] == pytest.approx(-0.2)

    def test_all_admissible_picks_closest_to_reference(self):
        # constant Q: every action has the same expected decrease
        q = constant_head_net([-5.0, -5.0, -5.0], input_dim=200)
        rng = np.random.default_rng(4)
        b = ParticleBelief(rng.uniform(-4, 4, (200, 1)))
        actions = np.array([[-2.0], [0.5], [3.0]])
        mode = lyapunov.BclfMode.asymptotic(0.99)
        u, status = lyapunov.ig_control(q, b, self.goal(), mode, actions)
        if status is lyapunov.IgStatus.GATHERING:
            from beliefcontrol.belief import mean

            u_ref = -float(mean(b)[0])
            dists = np.abs(actions[:, 0] - u_ref)
            assert u[0] == actions[int(np.argmin(dists)), 0]

    def test_tie_breaks_to_lowest_index(self):
        q = constant_head_net([-5.0, -5.0], input_dim=100)
        b = ParticleBelief(np.array([[-3.0], [3.0]] * 50))  # mean 0 -> u_ref = 0
        actions = np.array([[-1.0], [1.0]])  # equidistant from 0
        mode = lyapunov.BclfMode.asymptotic(0.99)
        u, status = lyapunov.ig_control(q, b, self.goal(), mode, actions)
        assert u[0] == -1.0

    def test_forced_fallback_picks_steepest_descent(self):
        # inadmissible everywhere: c tiny; the least-bad expected value wins
        q = constant_head_net([-5.0, -9.0, -8.0], input_dim=200)
        rng = np.random.default_rng(5)
        b = ParticleBelief(rng.uniform(-4, 4, (200, 1)))
        actions = np.array([[-1.0], [0.0], [1.0]])
        mode = lyapunov.BclfMode.asymptotic(0.01)
        u, status = lyapunov.ig_control(q, b, self.goal(), mode, actions)
        assert status is lyapunov.IgStatus.FORCED
        # expected next value is (r - Q)/gamma: the largest Q gives the smallest
        assert u[0] == -1.0
        assert np.array_equal(lyapunov.steepest_descent_action(q, b, self.goal(), actions), u)

    def test_output_in_action_set_or_reference(self):
        q = constant_head_net([-5.0, -4.0], input_dim=50)
        rng = np.random.default_rng(6)
        actions = np.array([[-1.0], [1.0]])
        for _ in range(20):
            b = ParticleBelief(rng.uniform(-4, 4, (50, 1)))
            u, status = lyapunov.ig_control(q, b, self.goal(), lyapunov.BclfMode.finite_time(0.4), actions)
            if status is lyapunov.IgStatus.REFERENCE:
                from beliefcontrol.conformal import uncertainty_measure

                assert uncertainty_measure(b, self.goal().uncertainty) <= 0
            else:
                assert any(np.allclose(u, a) for a in actions)

    def test_permutation_of_particles_same_decision(self):
        rng = np.random.default_rng(7)
        enc = nn.mlp_init([1, 8, 4], "relu", rng)
        head = nn.mlp_init([4, 8, 3], "relu", rng)
        q = nn.QNetwork(enc, head, 3)
        b = ParticleBelief(rng.uniform(-4, 4, (100, 1)))
        actions = np.array([[-1.0], [0.0], [1.0]])
        mode = lyapunov.BclfMode.finite_time(0.4)
        u1, s1 = lyapunov.ig_control(q, b, self.goal(), mode, actions)
        perm = rng.permutation(100)
        u2, s2 = lyapunov.ig_control(q, ParticleBelief(b.particles[perm]), self.goal(), mode, actions)
        assert np.array_equal(u1, u2) and s1 is s2


class TestSwitchingControl:
    def test_unlocalized_is_greedy(self):
        q = constant_head_net([-5.0, -1.0, -3.0], input_dim=100)
        rng = np.random.default_rng(8)
        b = ParticleBelief(rng.uniform(-4, 4, (100, 1)))
        goal = TestIgControl().goal()
        actions = np.array([[-1.0], [0.0], [1.0]])
        u = lyapunov.switching_control(q, b, goal, actions)
        assert u[0] == 0.0  # argmax Q is index 1

    def test_localized_is_reference(self):
        q = constant_head_net([-5.0, -1.0], input_dim=50)
        b = ParticleBelief(np.full((50, 1), 0.3))
        goal = TestIgControl().goal()
        u = lyapunov.switching_control(q, b, goal, np.array([[-1.0], [1.0]]))
        assert u[0] == pytest.approx(-0.3)


class TestStagnationMonitor:
    def test_strictly_decreasing_false(self):
        hist = [(0.1 * k, 10.0 - k) for k in range(20)]
        assert not lyapunov.stagnation_monitor(hist, window=1.0)

    def test_constant_over_window_true(self):
        hist = [(0.2 * k, 5.0) for k in range(7)]  # 1.2 s of history
        assert lyapunov.stagnation_monitor(hist, window=1.0)

    def test_insufficient_history_false(self):
        assert not lyapunov.stagnation_monitor([(0.0, 5.0), (0.2, 5.0)], window=1.0)

    def test_decrease_just_inside_window_false(self):
        hist = [(0.0, 5.0), (0.5, 5.0), (1.0, 5.0), (1.5, 3.0)]
        assert not lyapunov.stagnation_monitor(hist, window=1.0)


class TestTheoryBounds:
    def test_reference_constants(self):
        tb = lyapunov.theory_bounds(0.99, -1.0, 8.73, 0.4)
        assert tb.c_min == pytest.approx((1.0 / 0.99) * (1.0 - 1.0 / 8.73), abs=1e-12)
        assert tb.c_min == pytest.approx(0.8944, abs=1e-4)
        assert tb.asymptotic_w_cap == pytest.approx(100.0, abs=1e-6)
        assert tb.finite_w_cap == pytest.approx(60.4, abs=1e-6)
        assert tb.asymptotic_valid and tb.finite_valid

    def test_cap_limit_drives_c_to_one(self):
        cap = 1.0 / (1.0 - 0.99)
        tb = lyapunov.theory_bounds(0.99, -1.0, cap * (1 - 1e-9), 0.4)
        assert tb.c_min == pytest.approx(1.0, abs=1e-6)
        assert tb.asymptotic_valid

    def test_validity_iff_cap(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            gamma = float(rng.uniform(0.5, 0.999))
            r_max = float(-rng.uniform(0.1, 5.0))
            w_max = float(rng.uniform(0.1, 3.0 * abs(r_max) / (1 - gamma)))
            tb = lyapunov.theory_bounds(gamma, r_max, w_max, 0.4)
            assert tb.asymptotic_valid == (tb.c_min < 1.0)
            assert tb.asymptotic_valid == (w_max < abs(r_max) / (1.0 - gamma))

    def test_settling_time_bound(self):
        assert lyapunov.settling_time_bound(80.0, 0.1) == 800
        assert lyapunov.settling_time_bound(0.0, 0.1) == 0
        assert lyapunov.settling_time_bound(1.0, 0.3) == 4

    def test_input_validation(self):
        with pytest.raises(ValueError):
            lyapunov.theory_bounds(1.0, -1.0, 5.0, 0.4)
        with pytest.raises(ValueError):
            lyapunov.theory_bounds(0.9, 1.0, 5.0, 0.4)
        with pytest.raises(ValueError):
            lyapunov.settling_time_bound(1.0, 0.0)


class TestGoalSpec:
    def test_epsilon_ball_must_fit(self):
        region = BallRegion(np.array([0.0]), 1.0)
        with pytest.raises(ValueError):
            lyapunov.GoalSpec(region, UncertaintySpec(1.5, RiskLevel(0.1)), lambda mu: -mu)

    def test_belief_goal_requires_containment(self):
        region = BallRegion(np.array([0.0]), 1.0)
        goal = lyapunov.GoalSpec(region, UncertaintySpec(0.5, RiskLevel(0.1)), lambda mu: -mu)
        localized_at_goal = ParticleBelief(np.zeros((50, 1)))
        assert goal.in_belief_goal(localized_at_goal)
        localized_far = ParticleBelief(np.full((50, 1), 3.0))
        assert not goal.in_belief_goal(localized_far)
        diffuse = ParticleBelief(np.random.default_rng(0).uniform(-3, 3, (50, 1)))
        assert not goal.in_belief_goal(diffuse)


class TestAuditNegativeControl:
    def test_untrained_network_does_not_reach_reliably(self):
        env = envs.two_particle_toy()
        mdp = envs.make_mdp(env)
        rng = np.random.default_rng(10)
        q = nn.build_q_network(mdp.network_arch(), 0.99, rng)
        reached = 0
        n = 150
        for _ in range(n):
            b = mdp.sample_belief(rng)
            truth = mdp.marginal_truth(b, rng)
            done = mdp.in_goal(b)
            steps = 0
            while not done and steps < 120:
                a = int(np.argmax(nn.q_values(q, b)))
                b, truth, _, done = mdp.step(b, truth, a, rng)
                steps += 1
            reached += bool(done)
        assert reached / n < 0.95

    def test_audit_rows_schema(self, tmp_path):
        env = envs.two_particle_toy()
        mdp = envs.make_mdp(env)
        rng = np.random.default_rng(11)
        q = nn.build_q_network(mdp.network_arch(), 0.99, rng)
        rows = lyapunov.certificate_audit(q, mdp, n_samples=40, rng=rng, n_next_draws=10, n_rollouts=10, rollout_cap=40)
        names = [r.condition for r in rows]
        assert len(rows) == 6
        path = tmp_path / "audit.csv"
        lyapunov.write_audit_csv(rows, path)
        header = path.read_text().splitlines()[0]
        assert header == "condition,tpr,fpr,n"
