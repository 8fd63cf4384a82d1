"""
Dense linear algebra and a small convex QP solver.

The QP solver is a primal active-set method started from a feasible point.
A feasible point comes from the caller's warm start, the origin, or a
phase-1 LP solved with HiGHS. Problems are tiny (tens of variables), so
everything stays dense.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import eigh, null_space
from scipy.optimize import linprog

from config import QP_MAX_ITER
from errors import DimensionError, DivergenceError, SingularError

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
FEAS_TOL = 1e-9
PHASE1_TOL = 1e-8
KKT_TOL = 1e-6
_STEP_TOL = 1e-12
_RATIO_TOL = 1e-12
_NULL_RCOND = 1e-12
_CURVATURE_TOL = 1e-10
_RAY_TOL = 1e-10


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"
    UNBOUNDED = "unbounded"


@dataclass(frozen=True)
class QpProblem:
    """min ½ zᵀHz + cᵀz  s.t.  G z ≤ h,  E z = b."""

    hessian: np.ndarray
    linear_cost: np.ndarray
    ineq_matrix: np.ndarray
    ineq_upper: np.ndarray
    eq_matrix: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None

    def __post_init__(self) -> None:
        H = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        n = H.shape[0]
        if H.shape != (n, n):
            raise DimensionError(f"hessian must be square, got {H.shape}")
        if not np.allclose(H, H.T, rtol=0.0, atol=SYMMETRY_TOL * max(1.0, np.abs(H).max(initial=0.0))):
            raise DimensionError("hessian is not symmetric")
        c = np.asarray(self.linear_cost, dtype=float).reshape(-1)
        G = np.asarray(self.ineq_matrix, dtype=float).reshape(-1, n)
        h = np.asarray(self.ineq_upper, dtype=float).reshape(-1)
        if c.shape != (n,) or G.shape[0] != h.shape[0]:
            raise DimensionError("linear cost / inequality dimensions do not match the hessian")
        if self.eq_matrix is None:
            E, b = np.zeros((0, n)), np.zeros(0)
        else:
            E = np.asarray(self.eq_matrix, dtype=float).reshape(-1, n)
            b = np.asarray(self.eq_rhs, dtype=float).reshape(-1)
            if E.shape[0] != b.shape[0]:
                raise DimensionError("equality matrix and rhs disagree")
        for name, value in (("hessian", H), ("linear_cost", c), ("ineq_matrix", G),
                            ("ineq_upper", h), ("eq_matrix", E), ("eq_rhs", b)):
            if not np.all(np.isfinite(value)):
                raise DimensionError(f"{name} has non-finite entries")
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return self.hessian.shape[0]

    @property
    def m(self) -> int:
        return self.ineq_matrix.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.hessian @ z + self.linear_cost @ z)

    def is_feasible(self, z: np.ndarray, tol: float = FEAS_TOL) -> bool:
        if self.m and np.max(self.ineq_matrix @ z - self.ineq_upper) > tol:
            return False
        if self.eq_matrix.shape[0] and np.max(np.abs(self.eq_matrix @ z - self.eq_rhs)) > tol:
            return False
        return True


@dataclass(frozen=True)
class QpSolution:
    status: QpStatus
    primal: np.ndarray
    dual_ineq: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int = 0
    dual_eq: np.ndarray | None = None

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def cholesky(M: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; one jitter retry of 1e-10·trace/n, then SingularError."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[0]
    if M.shape != (n, n) or not np.allclose(M, M.T, rtol=0.0, atol=SYMMETRY_TOL * max(1.0, np.abs(M).max(initial=0.0))):
        raise DimensionError("cholesky needs a symmetric square matrix")
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10 * np.trace(M) / n
    if jitter > 0:
        try:
            return np.linalg.cholesky(M + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            pass
    raise SingularError(f"matrix is not positive definite (jitter {jitter:.3g} did not help)")


def solve_discrete_lyapunov(
    A: np.ndarray,
    Q: np.ndarray,
    *,
    transposed: bool = False,
    tol: float = 1e-8,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Fixed-point solution of P = A P Aᵀ + Q (or P = Aᵀ P A + Q when transposed)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if A.shape != Q.shape or A.shape[0] != A.shape[1]:
        raise DimensionError(f"A {A.shape} and Q {Q.shape} must be square and equal-sized")
    if transposed:
        A = A.T
    if A.size and np.abs(np.linalg.eigvals(A)).max() >= 1.0:
        raise DivergenceError("spectral radius of A is not below 1")
    q_norm = np.linalg.norm(Q, np.inf)
    if q_norm == 0.0:
        return np.zeros_like(Q)
    # Остаток P_{k+1} - P_k сжимается как A^k; требуем запас в 100 раз к допуску
    threshold = 1e-2 * tol * q_norm
    P = Q.copy()
    for _ in range(max_iter):
        P_next = A @ P @ A.T + Q
        if not np.all(np.isfinite(P_next)):
            break
        if np.linalg.norm(P_next - P, np.inf) <= threshold:
            return 0.5 * (P_next + P_next.T)
        P = P_next
    raise DivergenceError(f"Lyapunov iteration did not converge in {max_iter} iterations")


def kkt_residual(
    problem: QpProblem,
    z: np.ndarray,
    dual_ineq: np.ndarray,
    dual_eq: np.ndarray | None = None,
) -> float:
    """Largest of the scaled stationarity, primal, dual and complementarity errors."""
    H, c, G, h = problem.hessian, problem.linear_cost, problem.ineq_matrix, problem.ineq_upper
    E, b = problem.eq_matrix, problem.eq_rhs
    nu = np.zeros(E.shape[0]) if dual_eq is None else dual_eq
    Hz = H @ z
    grad = Hz + c + G.T @ dual_ineq + E.T @ nu
    scale = 1.0 + max(np.abs(Hz).max(initial=0.0), np.abs(c).max(initial=0.0))
    stationarity = np.abs(grad).max(initial=0.0) / scale
    slack = G @ z - h
    primal = max(slack.max(initial=0.0), np.abs(E @ z - b).max(initial=0.0), 0.0)
    dual = max(-dual_ineq.min(initial=0.0), 0.0)
    complementarity = np.abs(dual_ineq * slack).max(initial=0.0) / (1.0 + np.abs(dual_ineq).max(initial=0.0))
    return float(max(stationarity, primal, dual, complementarity))


def _phase_one(problem: QpProblem) -> np.ndarray | None:
    """Feasible point from min t s.t. Gz - t ≤ h, Ez = b, t ≥ 0; None when t* > PHASE1_TOL."""
    n, m = problem.n, problem.m
    E, b = problem.eq_matrix, problem.eq_rhs
    if m == 0:
        if E.shape[0] == 0:
            return np.zeros(n)
        z = np.linalg.lstsq(E, b, rcond=None)[0]
        return z if np.abs(E @ z - b).max() <= PHASE1_TOL else None
    cost = np.zeros(n + 1)
    cost[-1] = 1.0
    A_ub = np.hstack([problem.ineq_matrix, -np.ones((m, 1))])
    A_eq = np.hstack([E, np.zeros((E.shape[0], 1))]) if E.shape[0] else None
    res = linprog(
        cost,
        A_ub=A_ub,
        b_ub=problem.ineq_upper,
        A_eq=A_eq,
        b_eq=b if E.shape[0] else None,
        bounds=[(None, None)] * n + [(0.0, None)],
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status == 2:
        return None
    if res.status != 0 or res.x is None:
        logger.debug("Phase-1 LP ended with status %s: %s", res.status, res.message)
        return None
    if res.x[-1] > PHASE1_TOL:
        return None
    return np.asarray(res.x[:n], dtype=float)


def _initial_point(problem: QpProblem, warm_start: np.ndarray | None) -> np.ndarray | None:
    if warm_start is not None:
        z = np.asarray(warm_start, dtype=float).reshape(-1)
        if z.shape == (problem.n,) and problem.is_feasible(z):
            return z
    origin = np.zeros(problem.n)
    if problem.is_feasible(origin):
        return origin
    return _phase_one(problem)


def _face_step(H: np.ndarray, g: np.ndarray, A: np.ndarray) -> tuple[np.ndarray, bool]:
    """Step minimising ½pᵀHp + gᵀp over {Ap = 0}.

    When the gradient has a component along a zero-curvature direction of the
    face the minimum does not exist; that descent ray is returned instead and
    the flag is False.
    """
    n = H.shape[0]
    Z = null_space(A, rcond=_NULL_RCOND) if A.shape[0] else np.eye(n)
    if Z.shape[1] == 0:
        return np.zeros(n), True
    w, V = eigh(Z.T @ H @ Z)
    curved = w > _CURVATURE_TOL * max(1.0, np.abs(w).max())
    coef = V.T @ (Z.T @ g)
    flat = coef[~curved]
    if flat.size and np.linalg.norm(flat) > _RAY_TOL * (1.0 + np.abs(g).max()):
        return -Z @ (V[:, ~curved] @ flat), False
    return -Z @ (V[:, curved] @ (coef[curved] / w[curved])), True


def _working_multipliers(A: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Least-squares μ with Aᵀμ = −g."""
    if A.shape[0] == 0:
        return np.zeros(0)
    return np.linalg.lstsq(A.T, -g, rcond=None)[0]


def solve_qp(
    problem: QpProblem,
    warm_start: np.ndarray | None = None,
    max_iter: int = QP_MAX_ITER,
) -> QpSolution:
    n, m = problem.n, problem.m
    z = _initial_point(problem, warm_start)
    if z is None:
        return QpSolution(
            status=QpStatus.INFEASIBLE,
            primal=np.zeros(n),
            dual_ineq=np.zeros(m),
            objective=float("nan"),
            kkt_residual=float("inf"),
        )

    H, c, G, h = problem.hessian, problem.linear_cost, problem.ineq_matrix, problem.ineq_upper
    E = problem.eq_matrix
    p_eq = E.shape[0]
    working: list[int] = []
    at_face_min = False
    for iteration in range(1, max_iter + 1):
        A_w = np.vstack([E, G[working]]) if working else E
        grad = H @ z + c
        if not at_face_min:
            step, bounded = _face_step(H, grad, A_w)
            at_face_min = bounded and np.abs(step).max(initial=0.0) <= _STEP_TOL * (1.0 + np.abs(z).max(initial=0.0))
        if not at_face_min:
            # Вдоль луча нулевой кривизны шаг ограничен только блокирующим ограничением
            alpha, blocking = 1.0, None
            if not bounded:
                curvature = float(step @ H @ step)
                flat_curvature = _CURVATURE_TOL * max(1.0, np.abs(H).max()) * float(step @ step)
                alpha = -float(grad @ step) / curvature if curvature > flat_curvature else np.inf
            if m:
                Gp = G @ step
                candidates = Gp > _RATIO_TOL * max(1.0, np.abs(step).max())
                candidates[working] = False
                if np.any(candidates):
                    idx = np.flatnonzero(candidates)
                    ratios = np.maximum(h[idx] - G[idx] @ z, 0.0) / Gp[idx]
                    j = int(np.argmin(ratios))
                    if ratios[j] < alpha:
                        alpha, blocking = float(ratios[j]), int(idx[j])
            if not np.isfinite(alpha):
                return QpSolution(
                    status=QpStatus.UNBOUNDED,
                    primal=z,
                    dual_ineq=np.zeros(m),
                    objective=float("-inf"),
                    kkt_residual=float("inf"),
                    iterations=iteration,
                )
            z = z + alpha * step
            if blocking is not None:
                working.append(blocking)
            else:
                at_face_min = bounded
            continue

        mult = _working_multipliers(A_w, grad)
        lam_w = mult[p_eq:]
        if working and lam_w.min() < -1e-9 * (1.0 + np.abs(lam_w).max()):
            working.pop(int(np.argmin(lam_w)))
            at_face_min = False
            continue
        dual = np.zeros(m)
        dual[working] = np.maximum(lam_w, 0.0)
        nu = mult[:p_eq]
        residual = kkt_residual(problem, z, dual, nu)
        if residual > KKT_TOL:
            logger.warning("Active-set QP stalled with KKT residual %.3g", residual)
        return QpSolution(
            status=QpStatus.OPTIMAL if residual <= KKT_TOL else QpStatus.MAX_ITER,
            primal=z,
            dual_ineq=dual,
            objective=problem.objective(z),
            kkt_residual=residual,
            iterations=iteration,
            dual_eq=nu,
        )

    logger.warning("Active-set QP hit the iteration cap (%d)", max_iter)
    return QpSolution(
        status=QpStatus.MAX_ITER,
        primal=z,
        dual_ineq=np.zeros(m),
        objective=problem.objective(z),
        kkt_residual=float("inf"),
        iterations=max_iter,
    )
