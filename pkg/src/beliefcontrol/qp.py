"""Small dense strictly convex QP kernel.

Solves   min_u  1/2 ||u - u0||^2 + w s^2
         s.t.   a_i' u - s <= b_i   (slack only when enabled)
                lo <= u <= hi,  s >= 0

with a Goldfarb-Idnani style dual active-set iteration: start at the
unconstrained optimum, repeatedly add the most violated constraint, dropping
blocking constraints whose multipliers would go negative.  Exact for the
control dimensions used here (m <= 8); every solve is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_DEP_RTOL = 1e-12  # projected direction smaller than this fraction of the
                   # unprojected one means the new row is linearly dependent


@dataclass(frozen=True)
class QpProblem:
    """Minimum-deviation QP data.

    rows_a: (n_rows, m) inequality normals, rows_b: (n_rows,) offsets, both
    meaning a' u <= b.  bounds: (lo, hi) box on u (entries may be +-inf).
    slack_weight: if not None, a shared slack s >= 0 relaxes every row to
    a' u - s <= b and costs slack_weight * s^2 in the objective.
    """

    u0: np.ndarray
    rows_a: np.ndarray
    rows_b: np.ndarray
    bounds: tuple[np.ndarray, np.ndarray] | None = None
    slack_weight: float | None = None

    def __post_init__(self):
        u0 = np.asarray(self.u0, dtype=float).ravel()
        a = np.asarray(self.rows_a, dtype=float).reshape(-1, u0.size) if np.size(self.rows_a) else np.zeros((0, u0.size))
        b = np.asarray(self.rows_b, dtype=float).ravel()
        if a.shape[0] != b.size:
            raise ValueError(f"{a.shape[0]} row normals but {b.size} offsets")
        if not (np.all(np.isfinite(u0)) and np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("QP data must be finite")
        object.__setattr__(self, "u0", u0)
        object.__setattr__(self, "rows_a", a)
        object.__setattr__(self, "rows_b", b)
        if self.bounds is not None:
            lo = np.asarray(self.bounds[0], dtype=float).ravel()
            hi = np.asarray(self.bounds[1], dtype=float).ravel()
            if lo.size != u0.size or hi.size != u0.size:
                raise ValueError("bounds must match control dimension")
            object.__setattr__(self, "bounds", (lo, hi))

    @property
    def dim(self) -> int:
        return self.u0.size


@dataclass(frozen=True)
class QpSolution:
    u: np.ndarray
    slack: float
    status: str  # optimal | max_iter | infeasible
    kkt_residual: float
    active_set: tuple[int, ...]  # augmented row indices: user rows, then box, then s >= 0
    objective: float
    iterations: int


def _augment(problem: QpProblem) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, int]:
    """Assemble (G_diag, a_lin, C, d) in x = (u[, s]) coordinates."""
    m = problem.dim
    slack = problem.slack_weight is not None
    n = m + 1 if slack else m

    g_diag = np.ones(n)
    a_lin = np.concatenate([-problem.u0, [0.0]]) if slack else -problem.u0
    if slack:
        if problem.slack_weight <= 0.0:
            raise ValueError("slack_weight must be positive")
        g_diag[m] = 2.0 * problem.slack_weight

    n_user = problem.rows_a.shape[0]
    user = np.zeros((n_user, n))
    user[:, :m] = problem.rows_a
    if slack:
        user[:, m] = -1.0
    blocks_c = [user]
    blocks_d = [problem.rows_b]
    if problem.bounds is not None:
        lo, hi = problem.bounds
        for j in range(m):
            if math.isfinite(hi[j]):
                c = np.zeros((1, n))
                c[0, j] = 1.0
                blocks_c.append(c)
                blocks_d.append([hi[j]])
            if math.isfinite(lo[j]):
                c = np.zeros((1, n))
                c[0, j] = -1.0
                blocks_c.append(c)
                blocks_d.append([-lo[j]])
    if slack:
        c = np.zeros((1, n))
        c[0, m] = -1.0
        blocks_c.append(c)
        blocks_d.append([0.0])

    big_c = np.vstack(blocks_c)
    big_d = np.concatenate([np.asarray(b, dtype=float) for b in blocks_d])
    return g_diag, a_lin, big_c, big_d, n


def _dedupe(big_c: np.ndarray, big_d: np.ndarray) -> np.ndarray:
    """Indices of unique (normal, offset) rows; exact coefficient match."""
    if big_c.shape[0] == 0:
        return np.zeros(0, dtype=int)
    stacked = np.hstack([big_c, big_d[:, None]])
    _, keep = np.unique(stacked, axis=0, return_index=True)
    return np.sort(keep)


def solve(
    problem: QpProblem,
    tolerance: float = 1e-8,
    max_iter: int = 200,
    warm_hint: tuple[int, ...] = (),
    dedupe: bool = True,
) -> QpSolution:
    """Dual active-set solve of the slack-augmented problem.

    `dedupe=False` skips the exact-duplicate row scan; duplicates are inert
    once one copy is active (their violation is identically zero), so callers
    on a hot path whose rows come from distinct states may skip the scan.
    """
    g_diag, a_lin, big_c, big_d, n = _augment(problem)
    m = problem.dim
    g_inv = 1.0 / g_diag

    live = _dedupe(big_c, big_d) if dedupe else np.arange(big_c.shape[0])
    x = -g_inv * a_lin  # unconstrained optimum (u0, 0)
    active: list[int] = []
    lam: list[float] = []
    status = "optimal"
    iters = 0

    # vacuous/contradictory zero rows (possible only without slack)
    zero_rows = ~np.any(big_c[live], axis=1) if live.size else np.zeros(0, dtype=bool)
    if np.any(zero_rows):
        if np.any(big_d[live[zero_rows]] < -tolerance):
            status = "infeasible"
        live = live[~zero_rows]
    live_c = big_c[live]
    live_d = big_d[live]
    hint = [h for h in warm_hint if np.any(live == h)]

    def live_index(row: int) -> int:
        j = int(np.searchsorted(live, row))
        return j if j < live.size and live[j] == row else -1

    while status == "optimal" and iters < max_iter:
        viol = live_c @ x - live_d
        for i in active:
            j = live_index(i)
            if j >= 0:
                viol[j] = -np.inf
        if not np.any(viol > tolerance):
            break
        # warm-start preference: take a hinted violated row first
        p = None
        for h in hint:
            if viol[live_index(h)] > tolerance:
                p = h
                break
        if p is None:
            p = int(live[int(np.argmax(viol))])
        hint = [h for h in hint if h != p]
        c_p = big_c[p]
        ref = float(c_p @ (g_inv * c_p))  # unprojected step magnitude for the dependence test
        lam_p = 0.0

        while iters < max_iter:
            iters += 1
            if active:
                cw = big_c[active]
                mat = cw @ (g_inv[:, None] * cw.T)
                rhs = -cw @ (g_inv * c_p)
                try:
                    r = np.linalg.solve(mat, rhs)
                except np.linalg.LinAlgError:
                    r = np.linalg.lstsq(mat, rhs, rcond=None)[0]
                z = -g_inv * (c_p + cw.T @ r)
            else:
                r = np.zeros(0)
                z = -g_inv * c_p
            czp = float(c_p @ z)  # equals -z'Gz <= 0

            movable = czp < -_DEP_RTOL * max(ref, 1e-300)
            t2 = (float(c_p @ x) - big_d[p]) / (-czp) if movable else math.inf
            t1 = math.inf
            k_drop = -1
            for j, rj in enumerate(r):
                if rj < -1e-14:
                    tj = lam[j] / (-rj)
                    if tj < t1:
                        t1, k_drop = tj, j
            t = min(t1, t2)
            if not math.isfinite(t):
                status = "infeasible"
                break
            x = x + t * z
            for j in range(len(lam)):
                lam[j] += t * r[j]
            lam_p += t
            if t2 <= t1:
                active.append(p)
                lam.append(lam_p)
                break
            del active[k_drop], lam[k_drop]
    else:
        if status == "optimal":
            status = "max_iter"
    if iters >= max_iter and status == "optimal":
        # outer loop exhausted exactly at the budget with work remaining
        viol = big_c[live] @ x - big_d[live] if live.size else np.zeros(0)
        if np.any(viol > tolerance):
            status = "max_iter"

    if status == "optimal":
        x, lam = _polish(g_diag, a_lin, big_c, big_d, x, active, lam)
    u = x[:m]
    s = float(x[m]) if problem.slack_weight is not None else 0.0
    kkt = _kkt_residual(g_diag, a_lin, big_c, big_d, x, active, lam)
    if status == "optimal" and kkt > 10 * tolerance:
        status = "max_iter"
    obj = 0.5 * float(np.sum((u - problem.u0) ** 2))
    if problem.slack_weight is not None:
        obj += problem.slack_weight * s * s
    return QpSolution(
        u=u,
        slack=max(s, 0.0),
        status=status,
        kkt_residual=kkt,
        active_set=tuple(sorted(active)),
        objective=obj,
        iterations=iters,
    )


def _polish(g_diag, a_lin, big_c, big_d, x, active, lam):
    """Re-solve the equality KKT system at the final active set.

    Removes drift accumulated by the incremental steps (noticeable when slack
    multipliers are large).  Kept only if the refreshed multipliers stay
    nonnegative; otherwise the iterate is returned untouched.
    """
    if not active:
        return -a_lin / g_diag, lam
    cw = big_c[active]
    g_inv = 1.0 / g_diag
    mat = cw @ (g_inv[:, None] * cw.T)
    rhs = -big_d[active] - cw @ (g_inv * a_lin)
    try:
        lam_new = np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError:
        return x, lam
    if np.any(lam_new < -1e-9):
        return x, lam
    x_new = -g_inv * (a_lin + cw.T @ lam_new)
    return x_new, list(lam_new)


def _kkt_residual(g_diag, a_lin, big_c, big_d, x, active, lam) -> float:
    """Max KKT violation, scaled by the multiplier magnitude.

    The relative scaling keeps the test meaningful when the slack penalty
    produces multipliers many orders above the control scale.
    """
    scale = max(1.0, max((abs(l) for l in lam), default=0.0))
    grad = g_diag * x + a_lin
    if active:
        grad = grad + big_c[active].T @ np.asarray(lam)
    stationarity = float(np.max(np.abs(grad))) / scale if grad.size else 0.0
    if big_c.shape[0]:
        primal = float(max(0.0, np.max(big_c @ x - big_d)))
    else:
        primal = 0.0
    comp = 0.0
    dual = 0.0
    for idx, l in zip(active, lam):
        comp = max(comp, abs(l * (float(big_c[idx] @ x) - big_d[idx])) / scale)
        dual = max(dual, -min(l, 0.0))
    return max(stationarity, primal, comp, dual)


class QpSolver:
    """Per-worker solver handle with warm-started active sets across ticks."""

    def __init__(self, tolerance: float = 1e-8, max_iter: int = 200):
        self.tolerance = tolerance
        self.max_iter = max_iter
        self._last_active: tuple[int, ...] = ()

    def solve(self, problem: QpProblem, dedupe: bool = True) -> QpSolution:
        sol = solve(problem, self.tolerance, self.max_iter, warm_hint=self._last_active, dedupe=dedupe)
        self._last_active = sol.active_set
        return sol
