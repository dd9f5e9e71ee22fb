"""Small dense quadratic programs for the action filter.

Problems have the fixed shape

    min_{u, eps}  ||u||^2 + l * eps^2     s.t.  A [u; eps] >= b

with a handful of rows (one per barrier constraint plus optional actuator
box rows) and 2..5 decision variables. A primal active-set method is used:
problems this small need exact active sets (the backward pass
differentiates the KKT system of the active rows) and deterministic
tie-breaking (lowest row index first), which off-the-shelf interior-point
solvers do not give.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["QpProblem", "QpSolution", "QpError", "solve_qp", "backward_qp",
           "kkt_residuals"]

_FEAS_TOL = 1e-9
_DUAL_TOL = 1e-10
_STEP_TOL = 1e-11


class QpError(RuntimeError):
    """Raised when the active-set iteration cap is exceeded or the problem
    is malformed; carries condition diagnostics in ``details``."""

    def __init__(self, msg, details=None):
        super().__init__(msg)
        self.details = details or {}


@dataclass
class QpProblem:
    """``min ||u||^2 + slack_weight*eps^2 s.t. A z >= b`` with z = (u, eps).

    Rows with a zero eps-coefficient must be single-coordinate box rows
    (actuator limits); barrier rows carry eps-coefficient +1 so slack alone
    always restores feasibility.
    """

    m: int                      # control dimension
    slack_weight: float         # l > 0
    A: np.ndarray               # (k, m+1)
    b: np.ndarray               # (k,)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.slack_weight <= 0:
            raise QpError("slack weight must be positive")
        if self.A.size and self.A.shape[1] != self.m + 1:
            raise QpError(f"rows must have {self.m + 1} columns, got {self.A.shape[1]}")
        if self.A.size and self.A.shape[0] != self.b.size:
            raise QpError("row/rhs count mismatch")

    @property
    def n_rows(self) -> int:
        return 0 if self.A.size == 0 else self.A.shape[0]

    def weights(self) -> np.ndarray:
        return np.concatenate([np.ones(self.m), [self.slack_weight]])


@dataclass
class QpSolution:
    u_s: np.ndarray
    eps: float
    duals: np.ndarray           # one per row, >= 0, zero off the active set
    active: tuple               # row indices, sorted
    objective: float
    iterations: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.u_s, [self.eps]])


def _feasible_start(p: QpProblem) -> np.ndarray:
    """Deterministic feasible point: u clipped into the box rows, eps lifted
    just enough to satisfy the barrier rows (0 when already satisfied)."""
    d = p.m + 1
    z = np.zeros(d)
    if p.n_rows == 0:
        return z
    eps_col = p.A[:, -1]
    box = np.abs(eps_col) < 1e-14
    lo = np.full(p.m, -np.inf)
    hi = np.full(p.m, np.inf)
    for i in np.nonzero(box)[0]:
        a_u = p.A[i, :p.m]
        nz = np.nonzero(np.abs(a_u) > 1e-14)[0]
        if nz.size != 1:
            raise QpError("slack-free rows must be single-coordinate box rows",
                          {"row": int(i)})
        j = nz[0]
        if a_u[j] > 0:   # a*u_j >= b  ->  u_j >= b/a
            lo[j] = max(lo[j], p.b[i] / a_u[j])
        else:            # u_j <= b/a
            hi[j] = min(hi[j], p.b[i] / a_u[j])
    if np.any(lo > hi + _FEAS_TOL):
        raise QpError("box rows are inconsistent", {"lo": lo, "hi": hi})
    z[:p.m] = np.clip(0.0, lo, np.maximum(lo, hi))
    barrier = np.nonzero(~box)[0]
    if barrier.size:
        need = (p.b[barrier] - p.A[barrier, :p.m] @ z[:p.m]) / p.A[barrier, -1]
        z[-1] = max(0.0, float(need.max()))
    return z


def solve_qp(p: QpProblem, max_iter: int | None = None) -> QpSolution:
    """Global optimum of the strictly convex QP by a primal active-set method.

    Deterministic: blocking rows and dropped rows are tie-broken by lowest
    row index, so repeated solves of the same problem give identical active
    sets (required for reproducible training and the backward pass).
    """
    d = p.m + 1
    w = p.weights()
    k = p.n_rows
    if max_iter is None:
        max_iter = 50 + 10 * k

    if k == 0:
        return QpSolution(np.zeros(p.m), 0.0, np.zeros(0), (), 0.0, 0)

    # normalize rows for scale-free ratio tests; duals are mapped back below
    scale = np.linalg.norm(p.A, axis=1)
    if np.any(scale < 1e-14):
        raise QpError("zero constraint row", {"scale": scale})
    A = p.A / scale[:, None]
    b = p.b / scale

    z = _feasible_start(p)
    work: list[int] = []
    duals_scaled = np.zeros(k)

    for it in range(1, max_iter + 1):
        # equality-constrained step: min (z+p)' W (z+p) s.t. A_w p = 0
        nw = len(work)
        K = np.zeros((d + nw, d + nw))
        K[:d, :d] = np.diag(2.0 * w)
        if nw:
            Aw = A[work]
            K[:d, d:] = -Aw.T
            K[d:, :d] = Aw
        rhs = np.concatenate([-2.0 * w * z, np.zeros(nw)])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError as exc:
            raise QpError("singular working-set KKT system",
                          {"working": tuple(work), "cond": np.linalg.cond(K)}) from exc
        step = sol[:d]
        lam = sol[d:]

        if np.max(np.abs(step)) <= _STEP_TOL:
            duals_scaled[:] = 0.0
            duals_scaled[work] = lam
            if nw == 0 or np.min(lam) >= -_DUAL_TOL:
                break
            # drop the most negative dual, lowest row index on ties
            worst = np.min(lam)
            cand = [work[j] for j in range(nw) if lam[j] <= worst + _DUAL_TOL]
            work.remove(min(cand))
            continue

        # blocking-constraint ratio test over rows moving toward violation
        alpha = 1.0
        block = -1
        Ap = A @ step
        slack = A @ z - b
        for i in range(k):
            if i in work or Ap[i] >= -1e-13:
                continue
            ratio = max(0.0, slack[i]) / (-Ap[i])
            if ratio < alpha - 1e-13:
                alpha, block = ratio, i
            elif block >= 0 and ratio < alpha + 1e-13 and i < block:
                block = i
        z = z + alpha * step
        if block >= 0:
            work.append(block)
            work.sort()
        else:
            duals_scaled[:] = 0.0
            duals_scaled[work] = lam
    else:
        raise QpError("active-set iteration cap exceeded",
                      {"max_iter": max_iter, "rows": k,
                       "cond_A": float(np.linalg.cond(p.A))})

    duals = np.maximum(duals_scaled, 0.0) / scale
    active = tuple(sorted(work))
    u_s, eps = z[:p.m], float(z[-1])
    obj = float(u_s @ u_s + p.slack_weight * eps * eps)
    res = kkt_residuals(p, z, duals)
    sol = QpSolution(u_s, eps, duals, active, obj, it, {"kkt": res})
    if max(res.values()) > 1e-8:
        raise QpError("KKT residual check failed", {"residuals": res})
    return sol


def kkt_residuals(p: QpProblem, z: np.ndarray, duals: np.ndarray) -> dict:
    """Stationarity / feasibility / complementarity residuals of (z, duals)."""
    w = p.weights()
    if p.n_rows:
        stat = 2.0 * w * z - p.A.T @ duals
        slack = p.A @ z - p.b
        comp = duals * slack
        return {
            "stationarity": float(np.max(np.abs(stat))),
            "primal": float(max(0.0, -np.min(slack))),
            "dual": float(max(0.0, -np.min(duals))),
            "complementarity": float(np.max(np.abs(comp))),
        }
    return {"stationarity": float(np.max(np.abs(2.0 * w * z))) if z.size else 0.0,
            "primal": 0.0, "dual": 0.0, "complementarity": 0.0}


def backward_qp(p: QpProblem, s: QpSolution, grad_z: np.ndarray) -> dict:
    """Gradient of a scalar loss through the QP solution via the KKT system.

    Given dL/dz at the optimum (z = (u_s, eps)), implicitly differentiates
    the active-set KKT equations and returns dL/db for every row (zero on
    inactive rows). Callers map db to whatever produced the offsets; for the
    safety layer b depends affinely on the RL action, so
    dL/du_rl = -A_u^T (dL/db).

    Weakly active rows can make the KKT matrix singular; those solves are
    ridge-regularized with rho=1e-8 and flagged via ``regularized``.
    """
    grad_z = np.asarray(grad_z, dtype=np.float64).reshape(-1)
    if grad_z.size != p.m + 1:
        raise QpError("upstream gradient has wrong dimension")
    grad_b = np.zeros(p.n_rows)
    if not s.active:
        return {"grad_b": grad_b, "regularized": False}

    act = list(s.active)
    Aa = p.A[act]
    na = len(act)
    d = p.m + 1
    # transposed KKT system:  [Q  Aa'; -Aa  0] [wz; wl] = [grad_z; 0]
    M = np.zeros((d + na, d + na))
    M[:d, :d] = np.diag(2.0 * p.weights())
    M[:d, d:] = Aa.T
    M[d:, :d] = -Aa
    rhs = np.concatenate([grad_z, np.zeros(na)])
    regularized = False
    try:
        cond = np.linalg.cond(M)
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError
        sol = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        regularized = True
        sol = np.linalg.solve(M + 1e-8 * np.eye(d + na), rhs)
    grad_b[act] = sol[d:]
    return {"grad_b": grad_b, "regularized": regularized}
