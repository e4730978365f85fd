"""Horizon safety filter over particle beliefs.

Each particle carries a running minimum of the barrier value h over the
current inter-measurement interval (the history state).  At every control
tick the filter keeps the conformal top-p particles (largest running minima),
builds one reciprocal-barrier constraint row per selected safe particle, and
solves a minimum-deviation QP.  Keeping all top-p rows satisfied keeps the
conformal bound on -min_t h nonpositive, which is the per-interval
probabilistic safety guarantee; chaining intervals multiplies the per-interval
confidence, so the per-interval risk is the M-th root complement of the
horizon risk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from beliefcontrol import qp
from beliefcontrol.belief import MotionModel, ParticleBelief
from beliefcontrol.conformal import RiskLevel, conformal_rank

DEFAULT_SLACK_WEIGHT = 1e6
SLACK_VIOLATION = 1e-9  # any larger slack is reported as a certificate violation


class SingularBarrierError(ValueError):
    """Reciprocal barrier evaluated at h <= 0."""


@dataclass(frozen=True)
class BarrierFunction:
    """Twice-differentiable h with batched value/gradient/Hessian callables.

    value: (N,d)->(N,), grad: (N,d)->(N,d), hess: (N,d)->(N,d,d).
    The avoid set is {x : h(x) < 0}.

    `fused`, when provided, evaluates (value, grad, hess) in one pass with the
    Hessian possibly None (meaning identically zero); compositions use it to
    avoid recomputing shared subexpressions at every derivative order.
    `affine` marks h(x) = w.x - c functions so compositions over them can use
    matrix products instead of per-component reductions.
    """

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    fused: Callable[[np.ndarray], tuple] | None = None
    affine: tuple[np.ndarray, float] | None = None

    def evaluate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """(value, grad, hess-or-None) in one pass."""
        if self.fused is not None:
            return self.fused(x)
        return self.value(x), self.grad(x), self.hess(x)


@dataclass(frozen=True)
class SafetySpec:
    """Barrier function plus the gains and risk budget of the filter."""

    barrier: BarrierFunction
    alpha3_gain: float  # linear class-kappa gain: alpha3(h) = kappa * h
    delta_bar: RiskLevel
    control_bounds: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        if self.alpha3_gain <= 0.0:
            raise ValueError("alpha3_gain must be positive")

    def h(self, states: np.ndarray) -> np.ndarray:
        return self.barrier.value(np.atleast_2d(np.asarray(states, dtype=float)))


@dataclass(frozen=True)
class HistoryState:
    """Per-particle running minimum of h over the current interval."""

    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float).ravel())


def init_history(b: ParticleBelief, spec: SafetySpec) -> HistoryState:
    """Fresh interval: xi_i = h(x_i)."""
    return HistoryState(spec.barrier.value(b.particles))


def update_history(xi: HistoryState, b: ParticleBelief, spec: SafetySpec) -> HistoryState:
    """Elementwise min with the current h values."""
    h = spec.barrier.value(b.particles)
    if h.size != xi.xi.size:
        raise ValueError(f"history has {xi.xi.size} entries for {h.size} particles")
    return HistoryState(np.minimum(xi.xi, h))


def top_p_select(xi: HistoryState, delta_bar: RiskLevel) -> tuple[np.ndarray, int, float]:
    """Conformal selection on scores rho = -xi.

    Returns (indices of the p smallest scores, p, C) where C is the bound
    rho_(p); p = ceil((N+1)(1-delta)).  When p exceeds N the guarantee is not
    certifiable at this particle count: C = +inf and all particles are kept.
    """
    scores = -xi.xi
    n = scores.size
    if n < 1:
        raise ValueError("empty history state")
    p = conformal_rank(n, delta_bar.delta)
    if p > n:
        return np.argsort(scores, kind="stable"), p, math.inf
    if p == n:
        return np.arange(n), p, float(scores.max())
    # partial selection: O(N), deterministic; ties at the cut are resolved by
    # the partition rather than index order (tied particles carry equal rows)
    idx = np.argpartition(scores, p - 1)
    return idx[:p], p, float(scores[idx[p - 1]])


def interval_risk(delta_a: RiskLevel, m_intervals: int) -> RiskLevel:
    """Per-interval risk with (1 - risk)^M = 1 - delta_a exactly."""
    if m_intervals < 1:
        raise ValueError("need at least one interval")
    return RiskLevel(-math.expm1(math.log1p(-delta_a.delta) / m_intervals))


def _reciprocal_terms(h, grad, hess):
    """dB and d2B for B = 1/h: -grad/h^2 and 2 grad grad'/h^3 - hess/h^2."""
    h2 = h**2
    db = -grad / h2[:, None]
    d2b = 2.0 * grad[:, :, None] * grad[:, None, :] / (h**3)[:, None, None] - hess / h2[:, None, None]
    return db, d2b


def _rows_from_terms(states, h, grad, hess, model: MotionModel, spec: SafetySpec):
    """Rows from precomputed barrier terms, without materializing d2B.

    tr(sigma' d2B sigma) = 2 ||sigma' grad||^2 / h^3 - tr(sigma' hess sigma) / h^2.
    """
    db = -grad / (h**2)[:, None]
    f = model.drift(states)
    g = model.control_gain(states)
    sig = model.diffusion(states)
    a_rows = np.matmul(db[:, None, :], g)[:, 0, :]
    sig_g = np.matmul(grad[:, None, :], sig)[:, 0, :]  # (N, q)
    trace = 2.0 * np.sum(sig_g * sig_g, axis=1) / h**3
    if hess is not None:
        trace -= np.sum(sig * np.matmul(hess, sig), axis=(1, 2)) / h**2
    b_rows = spec.alpha3_gain * h - np.sum(db * f, axis=1) - 0.5 * trace
    return a_rows, b_rows


def rcbf_rows(states: np.ndarray, model: MotionModel, spec: SafetySpec) -> tuple[np.ndarray, np.ndarray]:
    """Constraint rows a' u <= b enforcing the reciprocal-barrier condition.

    For each state: a = g' dB, b = kappa h - dB' f - 1/2 tr(sigma' d2B sigma).
    All states must satisfy h > 0.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    h, grad, hess = spec.barrier.evaluate(states)
    if np.any(h <= 0.0):
        raise SingularBarrierError(f"reciprocal barrier singular at h={h.min():.3g} <= 0")
    return _rows_from_terms(states, h, grad, hess, model, spec)


def rcbf_row(x, model: MotionModel, spec: SafetySpec) -> tuple[np.ndarray, float]:
    """Single-state constraint row; errors if h(x) <= 0."""
    a, b = rcbf_rows(np.asarray(x, dtype=float)[None, :], model, spec)
    return a[0], float(b[0])


@dataclass(frozen=True)
class FilterReport:
    p: int
    C: float
    n_rows: int
    n_active: int
    slack: float
    status: str
    n_unsafe_selected: int

    @property
    def certificate_violation(self) -> bool:
        """Slack beyond numerical noise means a row was genuinely relaxed."""
        return self.slack > SLACK_VIOLATION

    def record(self) -> dict:
        """JSONL-friendly per-step record."""
        return {
            "p": self.p,
            "C": self.C,
            "n_active": self.n_active,
            "slack": self.slack,
            "status": self.status,
        }


def safety_filter(
    b: ParticleBelief,
    xi: HistoryState,
    u_ig,
    model: MotionModel,
    spec: SafetySpec,
    qp_solver: qp.QpSolver | None = None,
    slack_weight: float | None = DEFAULT_SLACK_WEIGHT,
) -> tuple[np.ndarray, FilterReport]:
    """Minimum-deviation correction of u_ig subject to top-p barrier rows.

    Already-unsafe selected particles (h <= 0) cannot carry a reciprocal
    constraint; they are excluded from the rows and counted in the report.
    With slack_weight=None the rows are hard constraints; by default a shared
    quadratic slack keeps the QP solvable, and slack beyond numerical noise is
    reported as a certificate violation.  A QP fault yields a braking command
    of zero clipped to the control bounds.
    """
    u_ig = np.asarray(u_ig, dtype=float).ravel()
    selected, p, c_bound = top_p_select(xi, spec.delta_bar)
    states = b.particles[selected]
    h, grad, hess = spec.barrier.evaluate(states)
    safe = h > 0.0
    n_unsafe = int(np.sum(~safe))
    if np.any(safe):
        a_rows, b_rows = _rows_from_terms(
            states[safe], h[safe], grad[safe],
            None if hess is None else hess[safe], model, spec,
        )
    else:
        a_rows = np.zeros((0, u_ig.size))
        b_rows = np.zeros(0)

    problem = qp.QpProblem(
        u0=u_ig,
        rows_a=a_rows,
        rows_b=b_rows,
        bounds=spec.control_bounds,
        slack_weight=slack_weight,
    )
    # rows come from distinct particle states; skip the duplicate scan
    sol = qp_solver.solve(problem, dedupe=False) if qp_solver is not None else qp.solve(problem, dedupe=False)

    if sol.status == "infeasible":
        lo, hi = spec.control_bounds
        brake = np.clip(np.zeros_like(u_ig), lo, hi)
        report = FilterReport(p, c_bound, len(b_rows), 0, math.inf, "fault", n_unsafe)
        return brake, report

    n_active = sum(1 for i in sol.active_set if i < len(b_rows))
    report = FilterReport(
        p=p,
        C=c_bound,
        n_rows=len(b_rows),
        n_active=n_active,
        slack=sol.slack,
        status=sol.status,
        n_unsafe_selected=n_unsafe,
    )
    return sol.u, report


# --- smooth set composition -------------------------------------------------


def affine_barrier(normal, offset: float) -> BarrierFunction:
    """h(x) = normal . x - offset (gradient constant, Hessian zero)."""
    w = np.asarray(normal, dtype=float)

    def value(x):
        return x @ w - offset

    def grad(x):
        return np.broadcast_to(w, x.shape).copy()

    def hess(x):
        return np.zeros((x.shape[0], w.size, w.size))

    def fused(x):
        return x @ w - offset, np.broadcast_to(w, x.shape), None

    return BarrierFunction(value, grad, hess, fused, affine=(w, offset))


def halfspace_barrier(normal, offset: float) -> BarrierFunction:
    """h(x) = offset - normal . x; avoid set is the halfspace normal.x >= offset."""
    w = np.asarray(normal, dtype=float)

    def value(x):
        return offset - x @ w

    def grad(x):
        return np.broadcast_to(-w, x.shape).copy()

    def hess(x):
        return np.zeros((x.shape[0], w.size, w.size))

    def fused(x):
        return offset - x @ w, np.broadcast_to(-w, x.shape), None

    return BarrierFunction(value, grad, hess, fused, affine=(-w, -offset))


def ball_barrier(center, radius: float, dims: slice | None = None, state_dim: int | None = None) -> BarrierFunction:
    """h(x) = ||x_dims - center|| - radius: distance to a ball obstacle.

    `dims` selects the state components the ball lives in (default: all);
    gradient/Hessian are zero on the remaining components.
    """
    c = np.asarray(center, dtype=float)
    sl = dims if dims is not None else slice(None)
    floor = 1e-9  # keep the direction finite at the obstacle center

    def value(x):
        return np.linalg.norm(x[:, sl] - c, axis=1) - radius

    def grad(x):
        d = x[:, sl] - c
        r = np.maximum(np.linalg.norm(d, axis=1), floor)
        g = np.zeros_like(x)
        g[:, sl] = d / r[:, None]
        return g

    def hess(x):
        n, full = x.shape
        d = x[:, sl] - c
        r = np.maximum(np.linalg.norm(d, axis=1), floor)
        unit = d / r[:, None]
        sub = (np.eye(c.size)[None, :, :] - unit[:, :, None] * unit[:, None, :]) / r[:, None, None]
        out = np.zeros((n, full, full))
        idx = np.arange(full)[sl]
        out[np.ix_(np.arange(n), idx, idx)] = sub
        return out

    return BarrierFunction(value, grad, hess)


def smooth_set(h_list: list[BarrierFunction], kind: str, sharpness: float) -> BarrierFunction:
    """Log-sum-exp composition of barrier functions, conservative direction.

    kind="min": -(1/beta) ln sum exp(-beta h_i)            <= min_i h_i
    kind="max": (1/beta) (ln sum exp(beta h_i) - ln K)     <= max_i h_i

    Both under-approximate the hard operator, so composed avoid sets are
    enlarged (never shrunk).  Exponent overflow is guarded by max-subtraction.
    """
    if kind not in ("min", "max"):
        raise ValueError("kind must be 'min' or 'max'")
    if sharpness <= 0.0:
        raise ValueError("sharpness must be positive")
    beta = sharpness
    sign = -1.0 if kind == "min" else 1.0
    k = len(h_list)
    if k == 0:
        raise ValueError("need at least one component function")
    offset = math.log(k) / beta if kind == "max" else 0.0

    def _softweights(vals):
        t = sign * beta * vals
        tmax = t.max(axis=0)
        e = np.exp(t - tmax)
        total = e.sum(axis=0)
        val = sign * (np.log(total) + tmax) / beta - offset
        return val, e / total

    all_affine = all(h.affine is not None for h in h_list)
    if all_affine:
        # constant per-component gradients: everything is a matrix product
        w_mat = np.stack([h.affine[0] for h in h_list], axis=0)  # (K, d)
        c_vec = np.array([h.affine[1] for h in h_list])
        outer = w_mat[:, :, None] * w_mat[:, None, :]  # (K, d, d)
        dim = w_mat.shape[1]

        def value(x):
            return _softweights(w_mat @ x.T - c_vec[:, None])[0]

        def fused(x):
            val, w = _softweights(w_mat @ x.T - c_vec[:, None])  # w: (K, N)
            gbar = w.T @ w_mat  # (N, d)
            second = (w.T @ outer.reshape(k, dim * dim)).reshape(-1, dim, dim)
            hess_out = sign * beta * (second - gbar[:, :, None] * gbar[:, None, :])
            return val, gbar, hess_out

    else:

        def value(x):
            vals = np.stack([h.value(x) for h in h_list], axis=0)  # (K, N)
            return _softweights(vals)[0]

        def fused(x):
            evals = [h.evaluate(x) for h in h_list]
            vals = np.stack([e[0] for e in evals], axis=0)  # (K, N)
            val, w = _softweights(vals)
            gbar = np.zeros_like(evals[0][1])
            curv = None  # sum_k w_k g_k g_k'
            base = None  # sum_k w_k H_k
            for wk, (_, gk, hk) in zip(w, evals):
                wg = wk[:, None] * gk
                gbar = gbar + wg
                term = wg[:, :, None] * gk[:, None, :]
                curv = term if curv is None else curv + term
                if hk is not None:
                    scaled = wk[:, None, None] * hk
                    base = scaled if base is None else base + scaled
            hess_out = sign * beta * (curv - gbar[:, :, None] * gbar[:, None, :])
            if base is not None:
                hess_out = hess_out + base
            return val, gbar, hess_out

    def grad(x):
        return fused(x)[1]

    def hess(x):
        return fused(x)[2]

    return BarrierFunction(value, grad, hess, fused)


def box_union_barrier(face_groups: list[tuple[np.ndarray, np.ndarray]], sharpness: float) -> BarrierFunction:
    """Hand-fused smooth_min over smooth_max groups of affine faces.

    Equivalent to smooth_set([smooth_set(faces_r, "max", beta) ...], "min",
    beta) but evaluated in a handful of matrix products, which is what keeps
    the safety filter inside its control-rate budget at large particle counts.

    With t_i = beta f_i(x), S_r = sum_{i in r} e^{t_i} and q_r the softmin
    weight of group r, the derivatives reduce to
      grad = sum_i alpha_i w_i,      alpha_i = q_r e^{t_i} / S_r,
      hess = beta (sum_i alpha_i w_i w_i' - 2 sum_r q_r m_r m_r' + g g'),
    with m_r the softmax-weighted mean face normal of group r.
    """
    beta = sharpness
    if beta <= 0.0:
        raise ValueError("sharpness must be positive")
    w_all = np.vstack([g[0] for g in face_groups])  # (F, d)
    c_all = np.concatenate([np.asarray(g[1], dtype=float) for g in face_groups])
    sizes = [len(g[1]) for g in face_groups]
    edges = np.concatenate([[0], np.cumsum(sizes)])
    ln_k = np.log(np.asarray(sizes, dtype=float))
    outer_flat = (w_all[:, :, None] * w_all[:, None, :]).reshape(len(c_all), -1)
    dim = w_all.shape[1]

    def _core(x):
        t = x @ w_all.T - c_all
        t *= beta  # (N, F)
        n = x.shape[0]
        r_count = len(sizes)
        m_shift = np.empty((n, r_count))
        s_sum = np.empty((n, r_count))
        for r in range(r_count):
            sl = slice(edges[r], edges[r + 1])
            block = t[:, sl]
            m_shift[:, r] = block.max(axis=1)
            block -= m_shift[:, [r]]
            np.exp(block, out=block)  # t now holds the shifted exponentials
            s_sum[:, r] = block.sum(axis=1)
        a = ln_k - m_shift - np.log(s_sum)  # (N, R): exponents of K_r / S_r
        a_max = a.max(axis=1)
        a -= a_max[:, None]
        np.exp(a, out=a)
        t_tilde = a.sum(axis=1)
        value = -(a_max + np.log(t_tilde)) / beta
        a /= t_tilde[:, None]  # group softmin weights q
        return t, s_sum, a, value

    def value(x):
        return _core(x)[3]

    def fused(x):
        exps, s_sum, q, val = _core(x)
        n = x.shape[0]
        b_term = np.zeros((n, dim, dim))
        for r in range(len(sizes)):
            sl = slice(edges[r], edges[r + 1])
            soft = exps[:, sl]
            soft /= s_sum[:, [r]]  # per-group softmax weights
            m_r = soft @ w_all[sl]
            b_term += q[:, r, None, None] * (m_r[:, :, None] * m_r[:, None, :])
            soft *= q[:, [r]]  # now the per-face alpha coefficients
        alpha = exps
        grad_out = alpha @ w_all
        a_term = (alpha @ outer_flat).reshape(n, dim, dim)
        hess_out = beta * (a_term - 2.0 * b_term + grad_out[:, :, None] * grad_out[:, None, :])
        return val, grad_out, hess_out

    def grad(x):
        return fused(x)[1]

    def hess(x):
        return fused(x)[2]

    return BarrierFunction(value, grad, hess, fused)
