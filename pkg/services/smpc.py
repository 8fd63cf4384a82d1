"""
Deterministic tightened OCP, backup-horizon relaxation and the receding-horizon law.

Decision vector of the condensed QP: z = (u_0, ..., u_{N-1}, s_0, ..., s_{B-1}).
States are eliminated with x_τ = A^τ x + Σ_j A^{τ-1-j} B u_j.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import block_diag

from config import SLACK_WEIGHT
from errors import DimensionError, DomainError, InfeasibleError
from services.numerics import FEAS_TOL, QpProblem, QpSolution, QpStatus, solve_qp
from services.plant import AffineConstraint

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TighteningVector:
    """γ = (g_0, ..., g_{N-1}) stacked τ-major, each block of length d_c."""

    values: np.ndarray

    def __post_init__(self) -> None:
        g = np.asarray(self.values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(g)):
            raise DimensionError("tightening vector has non-finite entries")
        object.__setattr__(self, "values", g)

    @classmethod
    def zeros(cls, dim: int) -> TighteningVector:
        return cls(np.zeros(dim))

    @classmethod
    def constant(cls, value: float, dim: int) -> TighteningVector:
        return cls(np.full(dim, float(value)))

    def __len__(self) -> int:
        return self.values.shape[0]

    def blocks(self, d_c: int) -> np.ndarray:
        return self.values.reshape(-1, d_c)


@dataclass(frozen=True)
class OcpSpec:
    horizon: int
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    input_lower: np.ndarray
    input_upper: np.ndarray
    constraint: AffineConstraint
    slack_weight: float = SLACK_WEIGHT

    def __post_init__(self) -> None:
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        d_x = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(d_x, -1)
        d_u = B.shape[1]
        Q = np.asarray(self.Q, dtype=float).reshape(d_x, d_x)
        P = np.asarray(self.P, dtype=float).reshape(d_x, d_x)
        R = np.asarray(self.R, dtype=float).reshape(d_u, d_u)
        lo = np.asarray(self.input_lower, dtype=float).reshape(-1)
        hi = np.asarray(self.input_upper, dtype=float).reshape(-1)
        if self.horizon < 1:
            raise DomainError("horizon must be at least 1")
        if lo.shape != (d_u,) or hi.shape != (d_u,) or self.constraint.H.shape[1] != d_x:
            raise DimensionError("input box / constraint dimensions do not match the model")
        if np.any(lo > hi):
            raise DomainError("input box needs lower <= upper")
        if self.slack_weight <= 0:
            raise DomainError("slack weight must be positive")
        if np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
            raise DomainError("R must be positive definite")
        for name, M in (("Q", Q), ("P", P)):
            if np.linalg.eigvalsh(0.5 * (M + M.T)).min() < -1e-9 * max(1.0, np.abs(M).max()):
                raise DomainError(f"{name} must be positive semidefinite")
        for name, value in (("A", A), ("B", B), ("Q", Q), ("R", R), ("P", P), ("input_lower", lo), ("input_upper", hi)):
            object.__setattr__(self, name, value)

    @property
    def d_x(self) -> int:
        return self.A.shape[0]

    @property
    def d_u(self) -> int:
        return self.B.shape[1]

    @property
    def d_c(self) -> int:
        return self.constraint.d_c

    @property
    def d_gamma(self) -> int:
        return self.horizon * self.d_c

    def stage_cost(self, x: np.ndarray, u: np.ndarray) -> float:
        return float(x @ self.Q @ x + u @ self.R @ u)

    @cached_property
    def _prediction(self) -> tuple[np.ndarray, np.ndarray]:
        """(Φ, Γ) with stacked states X = Φ x + Γ U for τ = 0..N."""
        N, d_x, d_u = self.horizon, self.d_x, self.d_u
        powers = [np.eye(d_x)]
        for _ in range(N):
            powers.append(self.A @ powers[-1])
        Phi = np.vstack(powers)
        Gam = np.zeros(((N + 1) * d_x, N * d_u))
        for tau in range(1, N + 1):
            for j in range(tau):
                Gam[tau * d_x:(tau + 1) * d_x, j * d_u:(j + 1) * d_u] = powers[tau - 1 - j] @ self.B
        return Phi, Gam

    @cached_property
    def _condensed(self) -> dict[str, np.ndarray]:
        N, d_x = self.horizon, self.d_x
        Phi, Gam = self._prediction
        Qbar = block_diag(*([self.Q] * N + [self.P]))
        Rbar = block_diag(*([self.R] * N))
        H_u = 2.0 * (Gam.T @ Qbar @ Gam + Rbar)
        Hx = block_diag(*([self.constraint.H] * N))
        return {
            "H_u": 0.5 * (H_u + H_u.T),
            "cost_x": 2.0 * Gam.T @ Qbar @ Phi,
            "const_x": Phi.T @ Qbar @ Phi,
            "S": Hx @ Gam[: N * d_x],
            "S0": Hx @ Phi[: N * d_x],
            "offset": np.tile(self.constraint.offset, N),
        }


@dataclass(frozen=True)
class MpcResult:
    u0: np.ndarray
    backup_horizon: int
    inputs: np.ndarray
    slacks: np.ndarray
    qp: QpSolution
    cost: float

    @property
    def full_relaxation(self) -> bool:
        return self.backup_horizon == self.inputs.shape[0]


def _check_args(spec: OcpSpec, x: np.ndarray, gamma: TighteningVector, B: int) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (spec.d_x,):
        raise DimensionError(f"state has shape {x.shape}, expected ({spec.d_x},)")
    if len(gamma) != spec.d_gamma:
        raise DimensionError(f"tightening vector has length {len(gamma)}, expected {spec.d_gamma}")
    if not 0 <= B <= spec.horizon:
        raise DimensionError(f"backup horizon {B} outside 0..{spec.horizon}")
    return x


def build_qp(spec: OcpSpec, x: np.ndarray, gamma: TighteningVector, B: int) -> QpProblem:
    x = _check_args(spec, x, gamma, B)
    N, d_u, d_c = spec.horizon, spec.d_u, spec.d_c
    cond = spec._condensed
    n_u, n_s = N * d_u, B * d_c
    n = n_u + n_s

    H = np.zeros((n, n))
    H[:n_u, :n_u] = cond["H_u"]
    H[n_u:, n_u:] = 2.0 * spec.slack_weight * np.eye(n_s)
    c = np.concatenate([cond["cost_x"] @ x, np.zeros(n_s)])

    # h(x_τ) <= -g_τ + s_τ для τ = 0..N-1
    rows_state = np.zeros((N * d_c, n))
    rows_state[:, :n_u] = cond["S"]
    rows_state[:n_s, n_u:] = -np.eye(n_s)
    rhs_state = -gamma.values - cond["S0"] @ x + cond["offset"]

    eye_u = np.eye(n_u, n)
    G = np.vstack([
        rows_state,
        eye_u,
        -eye_u,
        np.hstack([np.zeros((n_s, n_u)), -np.eye(n_s)]),
    ])
    h = np.concatenate([
        rhs_state,
        np.tile(spec.input_upper, N),
        -np.tile(spec.input_lower, N),
        np.zeros(n_s),
    ])
    return QpProblem(hessian=H, linear_cost=c, ineq_matrix=G, ineq_upper=h)


def feasible_start(
    spec: OcpSpec,
    x: np.ndarray,
    gamma: TighteningVector,
    B: int,
    inputs: np.ndarray | None,
) -> np.ndarray | None:
    """Decision vector from a guessed input sequence, slacks sized to cover the first B steps."""
    if inputs is None:
        return None
    N, d_c = spec.horizon, spec.d_c
    U = np.clip(np.asarray(inputs, dtype=float).reshape(N, spec.d_u), spec.input_lower, spec.input_upper).reshape(-1)
    cond = spec._condensed
    violation = cond["S"] @ U + cond["S0"] @ x - cond["offset"] + gamma.values
    slacks = np.maximum(violation[: B * d_c], 0.0)
    return np.concatenate([U, slacks])


def _solve_at(spec, x, gamma, B, warm_inputs) -> QpSolution:
    problem = build_qp(spec, x, gamma, B)
    return solve_qp(problem, warm_start=feasible_start(spec, x, gamma, B, warm_inputs))


def _minimal_backup(spec, x, gamma, warm_inputs=None) -> tuple[int, QpSolution]:
    _check_args(spec, x, gamma, 0)
    x = np.asarray(x, dtype=float).reshape(-1)
    # τ = 0 относится к текущему состоянию: при его нарушении B = 0 недостижимо
    first = spec.constraint.evaluate(x) + gamma.values[: spec.d_c]
    start = 1 if np.max(first) > FEAS_TOL else 0
    for B in range(start, spec.horizon + 1):
        sol = _solve_at(spec, x, gamma, B, warm_inputs)
        if sol.status is QpStatus.OPTIMAL:
            if B == spec.horizon:
                logger.debug("Full slack relaxation needed at x=%s", x)
            return B, sol
        if sol.status is QpStatus.MAX_ITER:
            logger.warning("QP iteration cap at backup horizon %d; trying a larger one", B)
    raise InfeasibleError("OCP is infeasible even with every state constraint relaxed")


def min_backup_horizon(spec: OcpSpec, x: np.ndarray, gamma: TighteningVector) -> int:
    return _minimal_backup(spec, x, gamma)[0]


def mpc_control(
    spec: OcpSpec,
    x: np.ndarray,
    gamma: TighteningVector,
    warm_inputs: np.ndarray | None = None,
) -> MpcResult:
    x = np.asarray(x, dtype=float).reshape(-1)
    B, sol = _minimal_backup(spec, x, gamma, warm_inputs)
    N, d_u, d_c = spec.horizon, spec.d_u, spec.d_c
    inputs = sol.primal[: N * d_u].reshape(N, d_u)
    slacks = np.zeros((N, d_c))
    slacks[:B] = sol.primal[N * d_u:].reshape(B, d_c)
    cost = sol.objective + float(x @ spec._condensed["const_x"] @ x)
    return MpcResult(
        u0=inputs[0].copy(),
        backup_horizon=B,
        inputs=inputs,
        slacks=slacks,
        qp=sol,
        cost=cost,
    )


class RecedingHorizonController:
    """Closed-loop wrapper that warm-starts each solve from the shifted previous plan."""

    def __init__(self, spec: OcpSpec) -> None:
        self.spec = spec
        self._last_inputs: np.ndarray | None = None

    def reset(self) -> None:
        self._last_inputs = None

    def control(self, x: np.ndarray, gamma: TighteningVector) -> MpcResult:
        warm = None
        if self._last_inputs is not None:
            warm = np.vstack([self._last_inputs[1:], self._last_inputs[-1:]])
        result = mpc_control(self.spec, x, gamma, warm_inputs=warm)
        self._last_inputs = result.inputs
        return result
