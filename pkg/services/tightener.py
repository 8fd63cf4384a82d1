"""
Online learning of the constraint-tightening vector.

The loop holds γ_i fixed, waits T_wait steps for the closed loop to mix,
collects T_col satisfaction labels at γ_i, refits the GP and picks the
cheapest γ whose predicted satisfaction probability reaches 1 - δ. Every
c_rand-th update, and whenever no grid point qualifies, γ is drawn at random.
After T_final blocks the final γ is chosen among the visited points.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from errors import AllRejectedError, CertificateError, DimensionError, DomainError, NonConvergenceError, SingularError
from services.gp_classify import (
    ClassificationDataset,
    HyperPrior,
    LaplaceFit,
    SeKernel,
    aggregate,
    laplace_fit,
    map_hyperparameters,
    predict_many,
)
from services.plant import LinearPlant, RngStream, constraint_label, step
from services.smpc import OcpSpec, RecedingHorizonController, TighteningVector

logger = logging.getLogger(__name__)

_CEIL_DIGITS = 12
_EIG_TOL = 1e-10


# --- search space -----------------------------------------------------------

@dataclass(frozen=True)
class GammaCandidate:
    reduced: tuple[float, ...]
    full: tuple[float, ...]

    @property
    def vector(self) -> TighteningVector:
        return TighteningVector(np.array(self.full))


@dataclass(frozen=True)
class GammaSpace:
    """Γ = {D γ̃ : γ̃ on a regular grid over [lower, upper]}."""

    embedding: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    resolution: tuple[int, ...]

    def __post_init__(self) -> None:
        D = np.asarray(self.embedding, dtype=float)
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        res = tuple(int(r) for r in np.broadcast_to(np.asarray(self.resolution), lo.shape))
        if D.ndim != 2 or lo.shape != hi.shape or D.shape[1] != lo.shape[0]:
            raise DimensionError(f"embedding {D.shape} does not match box of dimension {lo.shape[0]}")
        if np.any(lo > hi):
            raise DomainError("gamma box needs lower <= upper")
        if any(r < 2 for r in res):
            raise DomainError("grid resolution must be at least 2")
        object.__setattr__(self, "embedding", D)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "resolution", res)

    @classmethod
    def uniform_offset(cls, d_gamma: int, lower: float, upper: float, resolution: int) -> GammaSpace:
        """Same offset on every step and row: γ = γ̃ 1."""
        return cls(np.ones((d_gamma, 1)), [lower], [upper], (resolution,))

    @property
    def d_gamma(self) -> int:
        return self.embedding.shape[0]

    @property
    def d_reduced(self) -> int:
        return self.embedding.shape[1]

    @cached_property
    def axes(self) -> list[np.ndarray]:
        # вырожденная ось даёт одну точку
        return [np.array([lo]) if lo == hi else np.linspace(lo, hi, r)
                for lo, hi, r in zip(self.lower, self.upper, self.resolution)]

    @cached_property
    def grid(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.column_stack([m.reshape(-1) for m in mesh])

    def embed(self, reduced: np.ndarray) -> np.ndarray:
        return np.asarray(reduced, dtype=float).reshape(-1, self.d_reduced) @ self.embedding.T

    def snap(self, reduced: np.ndarray) -> np.ndarray:
        reduced = np.asarray(reduced, dtype=float).reshape(-1)
        out = np.empty(self.d_reduced)
        for j, axis in enumerate(self.axes):
            out[j] = axis[int(np.argmin(np.abs(axis - reduced[j])))]
        return out

    def candidate(self, reduced: np.ndarray) -> GammaCandidate:
        reduced = np.asarray(reduced, dtype=float).reshape(-1)
        full = self.embed(reduced)[0]
        return GammaCandidate(tuple(float(v) for v in reduced), tuple(float(v) for v in full))

    def ordered(self, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Grid points by ascending aᵀDγ̃, ties lexicographic in γ̃."""
        grid = self.grid
        cost = self.embed(grid) @ weights
        keys = [grid[:, j] for j in reversed(range(self.d_reduced))] + [cost]
        order = np.lexsort(keys)
        return grid[order], self.embed(grid[order])


# --- schedule bounds ----------------------------------------------------------

def _ceil(value: float) -> int:
    # Округляем до 12 значащих цифр, чтобы 5010.000000000001 не стал 5011
    return math.ceil(float(f"{value:.{_CEIL_DIGITS}g}"))


def twait_bound(vartheta: float, varphi: float, v_at_x: float, t_final: int) -> int:
    """Smallest integer T_wait with T_wait ≥ (log(ϑ V(x)) + T_final log 2) / (-log φ), floored at 0."""
    if not 0.0 < varphi < 1.0:
        raise DomainError(f"varphi must lie in (0, 1), got {varphi}")
    if vartheta <= 0 or v_at_x < 1 or t_final < 0:
        raise DomainError("need vartheta > 0, V(x) >= 1 and T_final >= 0")
    rhs = (math.log(vartheta * v_at_x) + t_final * math.log(2.0)) / -math.log(varphi)
    return max(0, _ceil(rhs))


def tcol_bound(c_col: float, t_final: int) -> int:
    if c_col <= 0:
        raise DomainError(f"c_col must be positive, got {c_col}")
    rhs = c_col * t_final
    return max(0, _ceil(rhs))


@dataclass(frozen=True)
class TwaitBound:
    """T_wait(x) from the mixing bound with V(x) = 1 + xᵀWx."""

    vartheta: float
    varphi: float
    weight: np.ndarray

    def wait_steps(self, x: np.ndarray, t_final: int) -> int:
        x = np.asarray(x, dtype=float).reshape(-1)
        return twait_bound(self.vartheta, self.varphi, 1.0 + float(x @ self.weight @ x), t_final)


# --- configuration and trace ------------------------------------------------

@dataclass(frozen=True)
class TightenerConfig:
    delta: float
    weights: np.ndarray
    t_wait: int | TwaitBound
    t_col: int
    c_rand: int
    t_final: int
    gamma0: np.ndarray
    eval_horizon: int = 5000
    hyper_prior: HyperPrior = field(default_factory=HyperPrior)
    refit_every: int = 1
    steps_every: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if np.any(w <= 0):
            raise DomainError("weights must be strictly positive")
        if self.t_col < 1 or self.t_final < 1 or self.c_rand < 1 or self.refit_every < 1:
            raise DomainError("t_col, t_final, c_rand and refit_every must be at least 1")
        if isinstance(self.t_wait, int) and self.t_wait < 0:
            raise DomainError("t_wait must be nonnegative")
        if self.steps_every < 0:
            raise DomainError("steps_every must be nonnegative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "gamma0", np.asarray(self.gamma0, dtype=float).reshape(-1))

    def wait_steps(self, x: np.ndarray) -> int:
        if isinstance(self.t_wait, TwaitBound):
            return self.t_wait.wait_steps(x, self.t_final)
        return int(self.t_wait)


@dataclass(frozen=True)
class UpdateRecord:
    i: int
    t_i: int
    gamma: GammaCandidate
    feasible: bool | None
    random: bool
    psi: float
    lambda_: float
    dataset_size: int
    x: tuple[float, ...]


@dataclass(frozen=True)
class StepRecord:
    t: int
    x: tuple[float, ...]
    u: tuple[float, ...]
    label: int
    stage_cost: float


@dataclass
class RunTrace:
    updates: list[UpdateRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    final_gamma: GammaCandidate | None = None
    final_probability: float = float("nan")
    final_fit: LaplaceFit | None = None
    dataset: ClassificationDataset = field(default_factory=ClassificationDataset.empty)

    @property
    def final_infeasible(self) -> bool:
        return self.final_gamma is None

    def visited(self) -> list[GammaCandidate]:
        seen: dict[tuple[float, ...], GammaCandidate] = {}
        for rec in self.updates:
            seen.setdefault(rec.gamma.full, rec.gamma)
        return list(seen.values())


# --- γ selection --------------------------------------------------------------

def select_gamma(model: LaplaceFit, space: GammaSpace, cfg: TightenerConfig) -> GammaCandidate | None:
    """Cheapest grid point with Ĥ(γ) ≥ 1 - δ, or None when the constraint admits none."""
    reduced, full = space.ordered(cfg.weights)
    _, _, prob = predict_many(model, full)
    hits = np.flatnonzero(prob >= 1.0 - cfg.delta)
    if hits.size == 0:
        return None
    return space.candidate(reduced[hits[0]])


def random_gamma(space: GammaSpace, rng: RngStream) -> tuple[GammaCandidate, RngStream]:
    draw = space.lower + (space.upper - space.lower) * rng.generator().random(space.d_reduced)
    return space.candidate(space.snap(draw)), rng.advance()


def final_gamma(
    model: LaplaceFit,
    visited: list[GammaCandidate],
    cfg: TightenerConfig,
) -> tuple[GammaCandidate | None, float]:
    """Cheapest visited γ with Ĥ(γ) ≥ 1 - δ; ties lexicographic in γ̃."""
    ranked = sorted(visited, key=lambda c: (float(np.dot(cfg.weights, c.full)), c.reduced))
    _, _, prob = predict_many(model, np.array([c.full for c in ranked]))
    for cand, p in zip(ranked, prob):
        if p >= 1.0 - cfg.delta:
            return cand, float(p)
    return None, float("nan")


def _refit(
    dataset: ClassificationDataset,
    kernel: SeKernel | None,
    prior: HyperPrior,
    full_refit: bool,
) -> LaplaceFit | None:
    if kernel is not None and not full_refit:
        try:
            return laplace_fit(dataset, kernel)
        except (NonConvergenceError, SingularError) as e:
            logger.info("Reused hyperparameters failed (%s); refitting", e)
    try:
        return map_hyperparameters(dataset, prior)[1]
    except AllRejectedError as e:
        logger.warning("GP refit failed: %s", e)
        return None


# --- the online loop ------------------------------------------------------------

def run(
    plant: LinearPlant,
    spec: OcpSpec,
    space: GammaSpace,
    cfg: TightenerConfig,
    rng: RngStream,
) -> RunTrace:
    if space.d_gamma != spec.d_gamma or cfg.weights.shape != (spec.d_gamma,):
        raise DimensionError("gamma space / weights do not match the OCP's tightening dimension")
    noise_rng, explore_rng = rng.substream(0), rng.substream(1)
    controller = RecedingHorizonController(spec)
    trace = RunTrace()

    x = plant.x0.copy()
    t = t_i = i = 0
    current = space.candidate(space.snap(cfg.gamma0))
    wait = cfg.wait_steps(x)
    trace.updates.append(UpdateRecord(0, 0, current, None, False, float("nan"), float("nan"), 0, tuple(x)))
    block_labels: list[int] = []
    fit: LaplaceFit | None = None

    while True:
        if t == t_i + wait + cfg.t_col:
            trace.dataset = aggregate(((current.full, lab) for lab in block_labels), base=trace.dataset)
            block_labels = []
            i += 1
            t_i = t
            full_refit = fit is None or (i - 1) % cfg.refit_every == 0
            fit = _refit(trace.dataset, None if fit is None else fit.kernel, cfg.hyper_prior, full_refit)

            feasible: bool | None
            if i % cfg.c_rand == 0:
                feasible, chosen = None, None
            else:
                chosen = select_gamma(fit, space, cfg) if fit is not None else None
                feasible = chosen is not None
            is_random = chosen is None
            if is_random:
                chosen, explore_rng = random_gamma(space, explore_rng)
            current = chosen
            trace.updates.append(UpdateRecord(
                i=i,
                t_i=t_i,
                gamma=current,
                feasible=feasible,
                random=is_random,
                psi=fit.kernel.psi if fit else float("nan"),
                lambda_=fit.kernel.lambda_ if fit else float("nan"),
                dataset_size=len(trace.dataset),
                x=tuple(float(v) for v in x),
            ))
            logger.debug("Update %d at t=%d: gamma=%s feasible=%s random=%s", i, t, current.reduced, feasible, is_random)
            if i >= cfg.t_final:
                break
            wait = cfg.wait_steps(x)

        label = constraint_label(plant.constraint, x)
        if t >= t_i + wait:
            block_labels.append(label)
        u = controller.control(x, current.vector).u0
        if cfg.steps_every and t % cfg.steps_every == 0:
            trace.steps.append(StepRecord(t, tuple(float(v) for v in x), tuple(float(v) for v in u), label,
                                          spec.stage_cost(x, u)))
        x, noise_rng = step(plant, x, u, noise_rng)
        t += 1

    trace.final_fit = fit
    if fit is None:
        logger.warning("No GP model after %d updates; final choice infeasible", cfg.t_final)
    else:
        trace.final_gamma, trace.final_probability = final_gamma(fit, trace.visited(), cfg)
        if trace.final_gamma is None:
            logger.warning("No visited gamma reaches satisfaction %.3f", 1.0 - cfg.delta)
    return trace


# --- closed-loop evaluation -------------------------------------------------------

@dataclass(frozen=True)
class ClosedLoopResult:
    states: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray
    stage_costs: np.ndarray
    backup_horizons: np.ndarray
    start: int = 0

    @property
    def satisfaction_rate(self) -> float:
        return float(self.labels.mean()) if self.labels.size else float("nan")

    @property
    def average_cost(self) -> float:
        return float(self.stage_costs.mean()) if self.stage_costs.size else float("nan")


def simulate_closed_loop(
    plant: LinearPlant,
    spec: OcpSpec,
    gamma: TighteningVector,
    horizon: int,
    rng: RngStream,
    burn_in: int = 0,
    x0: np.ndarray | None = None,
) -> ClosedLoopResult:
    """Roll the closed loop for burn_in + horizon steps; only the last horizon steps are recorded."""
    if horizon < 1 or burn_in < 0:
        raise DomainError("horizon must be >= 1 and burn_in >= 0")
    controller = RecedingHorizonController(spec)
    x = plant.x0.copy() if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    states = np.empty((horizon, plant.d_x))
    inputs = np.empty((horizon, plant.d_u))
    labels = np.empty(horizon, dtype=np.int64)
    costs = np.empty(horizon)
    backups = np.empty(horizon, dtype=np.int64)
    for t in range(burn_in + horizon):
        res = controller.control(x, gamma)
        k = t - burn_in
        if k >= 0:
            states[k], inputs[k] = x, res.u0
            labels[k] = constraint_label(plant.constraint, x)
            costs[k] = spec.stage_cost(x, res.u0)
            backups[k] = res.backup_horizon
        x, rng = step(plant, x, res.u0, rng)
    return ClosedLoopResult(states, inputs, labels, costs, backups, start=burn_in)


def estimate_H(
    plant: LinearPlant,
    spec: OcpSpec,
    gamma: TighteningVector,
    horizon: int,
    burn_in: int,
    rng: RngStream,
) -> float:
    return simulate_closed_loop(plant, spec, gamma, horizon, rng, burn_in=burn_in).satisfaction_rate


# --- drift certificate -------------------------------------------------------------

@dataclass(frozen=True)
class DriftCertificate:
    P: np.ndarray
    M: np.ndarray
    A_tilde: np.ndarray
    Sigma_w: np.ndarray

    def __post_init__(self) -> None:
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        n = P.shape[0]
        M = np.asarray(self.M, dtype=float).reshape(n, n)
        A = np.asarray(self.A_tilde, dtype=float).reshape(n, n)
        S = np.asarray(self.Sigma_w, dtype=float).reshape(n, -1)
        for name, value in (("P", P), ("M", M), ("A_tilde", A), ("Sigma_w", S)):
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class DriftBounds:
    mu: float
    K: float
    level: float


def lyapunov_value(P: np.ndarray, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    return 1.0 + 0.5 * float(x @ P @ x)


def verify_drift_certificate(c: DriftCertificate) -> DriftBounds:
    P = 0.5 * (c.P + c.P.T)
    M = 0.5 * (c.M + c.M.T)
    decrease = c.A_tilde.T @ P @ c.A_tilde - P + M
    if np.linalg.eigvalsh(0.5 * (decrease + decrease.T)).max() >= -_EIG_TOL:
        raise CertificateError("A_tildeᵀ P A_tilde - P + M is not negative definite")
    if np.linalg.eigvalsh(P - M).min() <= _EIG_TOL:
        raise CertificateError("P - M is not positive definite")
    evals, evecs = np.linalg.eigh(P)
    if evals.min() <= _EIG_TOL:
        raise CertificateError("P is not positive definite")
    P_inv_sqrt = evecs @ np.diag(evals**-0.5) @ evecs.T
    scaled = P_inv_sqrt @ (P - M) @ P_inv_sqrt
    mu = 0.5 * (1.0 + float(np.linalg.eigvalsh(0.5 * (scaled + scaled.T)).max()))
    noise_trace = float(np.trace(c.Sigma_w.T @ P @ c.Sigma_w))
    level = noise_trace / (1.0 - mu) + 2.0
    K = 1.0 + 0.5 * (noise_trace / (1.0 - mu) + 1.0)
    return DriftBounds(mu=mu, K=K, level=level)


def monte_carlo_drift(
    c: DriftCertificate,
    x: np.ndarray,
    rng: RngStream,
    draws: int,
) -> tuple[float, float, RngStream]:
    """Sample mean and standard error of V(Ãx + Σξ), ξ standard normal."""
    x = np.asarray(x, dtype=float).reshape(-1)
    xi = rng.generator().standard_normal((draws, c.Sigma_w.shape[1]))
    nxt = (c.A_tilde @ x)[None, :] + xi @ c.Sigma_w.T
    values = 1.0 + 0.5 * np.einsum("ij,jk,ik->i", nxt, c.P, nxt)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(draws)), rng.advance()
