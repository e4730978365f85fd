"""Information-gathering control from a learned belief value function.

The negated maximum of a fitted action-value function acts as a Lyapunov
certificate over beliefs: it is positive while the belief is not localized
and its expected decrease can be checked algebraically from the Bellman
identity E{W(next)} = (r - Q(b,a)) / gamma, without propagating dynamics.
The controller picks, among actions that certify a decrease, the one closest
to the state-based reference; once the belief is localized it hands control
to the reference entirely.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from beliefcontrol.belief import ParticleBelief, mean
from beliefcontrol.conformal import UncertaintySpec, uncertainty_measure
from beliefcontrol.nn import QNetwork, q_values, q_values_batch


@dataclass(frozen=True)
class BclfMode:
    """Decrease condition variant: asymptotic (factor c) or finite time (eta)."""

    variant: str  # "asymptotic" | "finite_time"
    c: float = 0.99
    eta: float = 0.4

    def __post_init__(self):
        if self.variant == "asymptotic":
            if not 0.0 < self.c < 1.0:
                raise ValueError(f"c must be in (0,1), got {self.c}")
        elif self.variant == "finite_time":
            if self.eta <= 0.0:
                raise ValueError(f"eta must be positive, got {self.eta}")
        else:
            raise ValueError(f"unknown variant {self.variant!r}")

    @classmethod
    def asymptotic(cls, c: float) -> "BclfMode":
        return cls("asymptotic", c=c)

    @classmethod
    def finite_time(cls, eta: float) -> "BclfMode":
        return cls("finite_time", eta=eta)


@dataclass(frozen=True)
class GoalSpec:
    """Goal geometry, localization target, and the state-based reference.

    The eps-ball must fit inside the goal region at its center, otherwise a
    localized belief centered on the goal could still fail the reach
    condition.
    """

    goal_region: object  # regions.BallRegion | regions.BoxRegion
    uncertainty: UncertaintySpec
    reference: object  # callable mean-state -> control

    def __post_init__(self):
        center = getattr(self.goal_region, "center", None)
        if center is None:  # box goal: use its midpoint
            center = 0.5 * (self.goal_region.lo + self.goal_region.hi)
        if not self.goal_region.contains_ball(center, self.uncertainty.epsilon):
            raise ValueError("epsilon-ball does not fit inside the goal region")

    def in_belief_goal(self, b: ParticleBelief) -> bool:
        """Localized and the certified ball fits inside the goal region."""
        r = uncertainty_measure(b, self.uncertainty)
        if r > 0.0 or not math.isfinite(r):
            return False
        return self.goal_region.contains_ball(mean(b), self.uncertainty.epsilon)


class IgStatus(Enum):
    REFERENCE = "reference"
    GATHERING = "gathering"
    FORCED = "forced"


def bclf_value(q: QNetwork, b: ParticleBelief) -> float:
    """Certificate value W = -max_a Q(b, a)."""
    return float(-np.max(q_values(q, b)))


def bclf_value_batch(q: QNetwork, particles: np.ndarray) -> np.ndarray:
    return -q_values_batch(q, particles).max(axis=1)


def expected_next_value(q: QNetwork, b: ParticleBelief, action: int, reward_value: float) -> float:
    """Bellman identity: E{W(next)} = (r - Q(b,a)) / gamma."""
    if not 0.0 < q.gamma < 1.0:
        raise ValueError("Bellman shortcut needs gamma in (0,1)")
    qa = float(q_values(q, b)[action])
    return (reward_value - qa) / q.gamma


def decrease_admissible(
    q: QNetwork,
    b: ParticleBelief,
    action: int,
    mode: BclfMode,
    reward_value: float,
) -> bool:
    """Does this action certify the required expected decrease of W?"""
    w = bclf_value(q, b)
    ew = expected_next_value(q, b, action, reward_value)
    if mode.variant == "asymptotic":
        return ew <= mode.c * w
    return ew - w <= -min(w, mode.eta)


def reward(b: ParticleBelief, spec: UncertaintySpec) -> float:
    """Uncertainty-shaped reward: -1 - R(b) outside the localized set, 0 inside."""
    r = uncertainty_measure(b, spec)
    if r <= 0.0:
        return 0.0
    return -1.0 - r


def ig_control(
    q: QNetwork,
    b: ParticleBelief,
    goal: GoalSpec,
    mode: BclfMode,
    action_set: np.ndarray,
) -> tuple[np.ndarray, IgStatus]:
    """Minimum-deviation information gathering.

    Localized belief: return the reference control directly.  Otherwise pick
    the admissible action closest to the reference (ties to the lowest action
    index); if nothing is admissible, force the steepest certified descent.
    """
    action_set = np.atleast_2d(np.asarray(action_set, dtype=float))
    if action_set.shape[0] == 0:
        raise ValueError("empty action set")
    r_eps = uncertainty_measure(b, goal.uncertainty)
    u_ref = np.asarray(goal.reference(mean(b)), dtype=float).ravel()
    if r_eps <= 0.0:
        return u_ref, IgStatus.REFERENCE

    r_val = reward(b, goal.uncertainty)
    w = bclf_value(q, b)
    qa = q_values(q, b)
    expected = (r_val - qa) / q.gamma
    if mode.variant == "asymptotic":
        admissible = expected <= mode.c * w
    else:
        admissible = expected - w <= -min(w, mode.eta)

    if np.any(admissible):
        dist = np.linalg.norm(action_set - u_ref, axis=1)
        dist = np.where(admissible, dist, np.inf)
        return action_set[int(np.argmin(dist))], IgStatus.GATHERING
    return action_set[int(np.argmin(expected))], IgStatus.FORCED


def steepest_descent_action(q: QNetwork, b: ParticleBelief, goal: GoalSpec, action_set: np.ndarray) -> np.ndarray:
    """Action minimizing the expected next certificate value."""
    action_set = np.atleast_2d(np.asarray(action_set, dtype=float))
    r_val = reward(b, goal.uncertainty)
    expected = (r_val - q_values(q, b)) / q.gamma
    return action_set[int(np.argmin(expected))]


def switching_control(q: QNetwork, b: ParticleBelief, goal: GoalSpec, action_set: np.ndarray) -> np.ndarray:
    """Baseline: greedy information gathering until localized, then reference."""
    action_set = np.atleast_2d(np.asarray(action_set, dtype=float))
    if uncertainty_measure(b, goal.uncertainty) <= 0.0:
        return np.asarray(goal.reference(mean(b)), dtype=float).ravel()
    return action_set[int(np.argmax(q_values(q, b)))]


def stagnation_monitor(w_history, window: float, tol: float = 1e-6) -> bool:
    """True when W has not decreased over the trailing window.

    w_history is a time-ordered sequence of (t, W); the reference value is
    the last sample at least `window` old.  Returns False until that much
    history exists.
    """
    if len(w_history) < 2:
        return False
    t_end = w_history[-1][0]
    ref = None
    recent_min = math.inf
    for t, w in w_history:
        if t <= t_end - window:
            ref = w
        else:
            recent_min = min(recent_min, w)
    if ref is None or not math.isfinite(recent_min):
        return False
    return recent_min >= ref - tol


@dataclass(frozen=True)
class TheoryBounds:
    """Closed-form validity constants for a fitted certificate."""

    c_min: float
    asymptotic_w_cap: float
    finite_w_cap: float
    asymptotic_valid: bool
    finite_valid: bool


def theory_bounds(gamma: float, r_max: float, w_max: float, eta: float) -> TheoryBounds:
    """Certificate constants from (gamma, R_max, W_max, eta).

    c_min = (1/gamma)(1 + R_max/W_max); the asymptotic cap on W_max is
    |R_max|/(1-gamma) and the finite-time cap is (|R_max| - gamma eta)/(1-gamma).
    Validity flags are the strict inequalities W_max < cap.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must be in (0,1)")
    if r_max >= 0.0:
        raise ValueError("r_max must be negative")
    if w_max <= 0.0:
        raise ValueError("w_max must be positive")
    if eta <= 0.0:
        raise ValueError("eta must be positive")
    c_min = (1.0 + r_max / w_max) / gamma
    asym_cap = abs(r_max) / (1.0 - gamma)
    fin_cap = (abs(r_max) - gamma * eta) / (1.0 - gamma)
    return TheoryBounds(
        c_min=c_min,
        asymptotic_w_cap=asym_cap,
        finite_w_cap=fin_cap,
        asymptotic_valid=w_max < asym_cap,
        finite_valid=w_max < fin_cap,
    )


def settling_time_bound(w0: float, eta: float) -> int:
    """Expected measurement steps to localize: ceil(W(b0)/eta)."""
    if eta <= 0.0:
        raise ValueError("eta must be positive")
    if w0 < 0.0:
        raise ValueError("w0 must be nonnegative")
    return math.ceil(w0 / eta)


# --- certificate audit ------------------------------------------------------


@dataclass(frozen=True)
class AuditRow:
    condition: str
    tpr: float
    fpr: float | None
    n: int


def certificate_audit(
    q: QNetwork,
    env,
    n_samples: int,
    rng: np.random.Generator,
    c: float = 0.99,
    eta: float = 0.4,
    n_next_draws: int = 100,
    n_rollouts: int = 1000,
    rollout_cap: int = 400,
) -> list[AuditRow]:
    """Empirical certificate quality on env-sampled beliefs.

    Checks the sign conditions on and off the belief goal set, the asymptotic
    and finite-time expected-decrease conditions under the greedy action
    (Monte-Carlo expectation over fresh next-belief draws), the greedy
    reach rate, and the rate of reaching within the settling-time bound.
    `env` must offer sample_belief, in_goal, reset_to, and step.
    """
    beliefs = [env.sample_belief(rng) for _ in range(n_samples)]
    in_goal = np.array([env.in_goal(b) for b in beliefs])
    w = np.array([bclf_value(q, b) for b in beliefs])

    rows = []
    n_in = int(in_goal.sum())
    n_out = int((~in_goal).sum())
    sign_in = w <= 0.0
    rows.append(AuditRow(
        "W<=0 on goal set",
        tpr=float(np.mean(sign_in[in_goal])) if n_in else math.nan,
        fpr=float(np.mean(sign_in[~in_goal])) if n_out else math.nan,
        n=n_in,
    ))
    sign_out = w > 0.0
    rows.append(AuditRow(
        "W>0 off goal set",
        tpr=float(np.mean(sign_out[~in_goal])) if n_out else math.nan,
        fpr=float(np.mean(sign_out[in_goal])) if n_in else math.nan,
        n=n_out,
    ))

    # expected decrease under the greedy action, Monte-Carlo expectation
    off_idx = np.flatnonzero(~in_goal)
    asym_ok = []
    finite_ok = []
    for i in off_idx:
        b = beliefs[i]
        action = int(np.argmax(q_values(q, b)))
        nxt = np.empty(n_next_draws)
        for j in range(n_next_draws):
            b2, _, _, _ = env.step(b, env.marginal_truth(b, rng), action, rng)
            nxt[j] = bclf_value(q, b2)
        ew = float(nxt.mean())
        asym_ok.append(ew <= c * w[i])
        finite_ok.append(ew - w[i] <= -min(w[i], eta))
    rows.append(AuditRow("asymptotic decrease (greedy)", float(np.mean(asym_ok)) if asym_ok else math.nan, None, len(asym_ok)))
    rows.append(AuditRow("finite-time decrease (greedy)", float(np.mean(finite_ok)) if finite_ok else math.nan, None, len(finite_ok)))

    reached = 0
    within_bound = 0
    for _ in range(n_rollouts):
        b = env.sample_belief(rng)
        truth = env.marginal_truth(b, rng)
        bound = settling_time_bound(max(bclf_value(q, b), 0.0), eta)
        steps = 0
        done = env.in_goal(b)
        while not done and steps < rollout_cap:
            action = int(np.argmax(q_values(q, b)))
            b, truth, _, done = env.step(b, truth, action, rng)
            steps += 1
        if done:
            reached += 1
            if steps <= bound:
                within_bound += 1
    rows.append(AuditRow("reach goal set (greedy rollout)", reached / n_rollouts, None, n_rollouts))
    rows.append(AuditRow("reach within settling bound", within_bound / n_rollouts, None, n_rollouts))
    return rows


def write_audit_csv(rows: list[AuditRow], path) -> None:
    """Serialize audit rows as condition,tpr,fpr,n."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["condition", "tpr", "fpr", "n"])
        for row in rows:
            fpr = "" if row.fpr is None or (isinstance(row.fpr, float) and math.isnan(row.fpr)) else repr(row.fpr)
            writer.writerow([row.condition, repr(row.tpr), fpr, row.n])
