"""
GP binary regression of the long-run satisfaction probability H(γ).

Latent q ~ GP(0, ψ⁻¹ exp(-λ²/2 ‖γ-γ'‖²)), labels y ~ Bernoulli(s(q)) with the
probit link s(z) = (1 + erf(z)) / 2 = Φ(√2 z). Labels at equal γ are
aggregated into binomial counts. The latent posterior is approximated by
Laplace's method, hyperparameters by grid MAP.
"""
from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial.distance import cdist
from scipy.special import erf, log_ndtr

from errors import AllRejectedError, DimensionError, DomainError, NonConvergenceError, SingularError
from services.numerics import cholesky

logger = logging.getLogger(__name__)

NEWTON_MAX_STEPS = 100
NEWTON_TOL = 1e-8
GRID_POINTS = 21
GRID_HALF_WIDTH = 4.0
_SQRT2 = np.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def sigmoid(z):
    return 0.5 * (1.0 + erf(z))


@dataclass(frozen=True)
class SeKernel:
    psi: float
    lambda_: float

    def __post_init__(self) -> None:
        for name, value in (("psi", self.psi), ("lambda", self.lambda_)):
            if not (np.isfinite(value) and value > 0):
                raise DomainError(f"kernel {name} must be positive and finite, got {value}")

    @property
    def prior_variance(self) -> float:
        return 1.0 / self.psi

    def from_sq_dist(self, sq_dist: np.ndarray) -> np.ndarray:
        return np.exp(-0.5 * self.lambda_**2 * sq_dist) / self.psi

    def cross(self, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
        return self.from_sq_dist(cdist(np.atleast_2d(X1), np.atleast_2d(X2), "sqeuclidean"))


@dataclass(frozen=True)
class HyperPrior:
    """Independent Gaussian priors on log ψ and log λ."""

    log_psi_mean: float = -1.0
    log_psi_std: float = 1.0
    log_lambda_mean: float = 0.0
    log_lambda_std: float = 1.0

    def __post_init__(self) -> None:
        if self.log_psi_std <= 0 or self.log_lambda_std <= 0:
            raise DomainError("hyperprior standard deviations must be positive")

    def log_psi_density(self, log_psi: float) -> float:
        return _log_normal_pdf(log_psi, self.log_psi_mean, self.log_psi_std)

    def log_lambda_density(self, log_lambda: float) -> float:
        return _log_normal_pdf(log_lambda, self.log_lambda_mean, self.log_lambda_std)


def _log_normal_pdf(x: float, mean: float, std: float) -> float:
    return float(-0.5 * ((x - mean) / std) ** 2 - np.log(std) - _LOG_SQRT_2PI)


@dataclass(frozen=True)
class ClassificationDataset:
    """Distinct inputs (rows of `inputs`) with binomial counts."""

    inputs: np.ndarray
    trials: np.ndarray
    successes: np.ndarray

    def __post_init__(self) -> None:
        n = np.asarray(self.trials, dtype=np.int64).reshape(-1)
        k = np.asarray(self.successes, dtype=np.int64).reshape(-1)
        X = np.asarray(self.inputs, dtype=float)
        if X.ndim != 2:
            X = X.reshape(n.shape[0], -1) if n.shape[0] else np.zeros((0, 0))
        if k.shape != n.shape or X.shape[0] != n.shape[0]:
            raise DimensionError("inputs, trials and successes differ in length")
        if np.any(n < 1) or np.any(k < 0) or np.any(k > n):
            raise DomainError("counts need 1 <= n and 0 <= k <= n")
        if len({tuple(row) for row in X}) != X.shape[0]:
            raise DomainError("dataset inputs must be pairwise distinct")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "trials", n)
        object.__setattr__(self, "successes", k)

    @classmethod
    def empty(cls, dim: int = 0) -> ClassificationDataset:
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_triples(cls, triples: Sequence[tuple[Sequence[float], int, int]]) -> ClassificationDataset:
        if not triples:
            return cls.empty()
        X = np.array([np.asarray(g, dtype=float).reshape(-1) for g, _, _ in triples])
        return cls(X, [n for _, n, _ in triples], [k for _, _, k in triples])

    def __len__(self) -> int:
        return self.trials.shape[0]

    @property
    def total_trials(self) -> int:
        return int(self.trials.sum())

    def triples(self) -> list[tuple[tuple[float, ...], int, int]]:
        return [(tuple(float(v) for v in x), int(n), int(k)) for x, n, k in zip(self.inputs, self.trials, self.successes)]

    def flipped(self) -> ClassificationDataset:
        """Successes and failures swapped."""
        return ClassificationDataset(self.inputs, self.trials, self.trials - self.successes)


def aggregate(
    raw: Iterable[tuple[Sequence[float], int]],
    base: ClassificationDataset | None = None,
) -> ClassificationDataset:
    """Group (γ, label) pairs by exact γ; new inputs are appended in first-seen order."""
    counts: dict[tuple[float, ...], list[int]] = {}
    if base is not None:
        for key, n, k in base.triples():
            counts[key] = [n, k]
    for gamma, label in raw:
        key = tuple(float(v) for v in np.asarray(gamma, dtype=float).reshape(-1))
        entry = counts.setdefault(key, [0, 0])
        entry[0] += 1
        entry[1] += int(bool(label))
    if not counts:
        return base if base is not None else ClassificationDataset.empty()
    return ClassificationDataset.from_triples([(key, n, k) for key, (n, k) in counts.items()])


def gram(kernel: SeKernel, inputs: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    K = kernel.cross(X, X)
    return 0.5 * (K + K.T)


def likelihood_terms(f: np.ndarray, trials: np.ndarray, successes: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Binomial probit log-likelihood at latent f (coefficient excluded), its gradient and W = -∇²."""
    y = _SQRT2 * f
    log_p, log_q = log_ndtr(y), log_ndtr(-y)
    log_phi = -0.5 * y**2 - _LOG_SQRT_2PI
    r_pos = np.exp(log_phi - log_p)
    r_neg = np.exp(log_phi - log_q)
    fails = trials - successes
    value = float(np.sum(successes * log_p + fails * log_q))
    grad = _SQRT2 * (successes * r_pos - fails * r_neg)
    W = 2.0 * (successes * r_pos * (y + r_pos) + fails * r_neg * (r_neg - y))
    return value, grad, np.maximum(W, 0.0)


@dataclass(frozen=True)
class LaplaceFit:
    dataset: ClassificationDataset
    kernel: SeKernel
    mode: np.ndarray
    W: np.ndarray
    chol: np.ndarray
    grad: np.ndarray
    log_evidence: float
    iterations: int = 0

    @property
    def sqrt_W(self) -> np.ndarray:
        return np.sqrt(self.W)


def _factor(K: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sW = np.sqrt(W)
    B = np.eye(K.shape[0]) + sW[:, None] * K * sW[None, :]
    return sW, cholesky(0.5 * (B + B.T))


def laplace_fit(data: ClassificationDataset, kernel: SeKernel, K: np.ndarray | None = None) -> LaplaceFit:
    """Newton iterations on the latent mode in the a = K⁻¹f parametrisation, with backtracking."""
    if len(data) == 0:
        raise DomainError("cannot fit an empty dataset")
    if K is None:
        K = gram(kernel, data.inputs)
    n, k = data.trials, data.successes

    def objective(a_vec: np.ndarray) -> tuple[float, np.ndarray]:
        f_vec = K @ a_vec
        return -0.5 * a_vec @ f_vec + likelihood_terms(f_vec, n, k)[0], f_vec

    a = np.zeros(len(data))
    f = np.zeros(len(data))
    psi_val = objective(a)[0]
    prev_residual = np.inf
    for iteration in range(1, NEWTON_MAX_STEPS + 1):
        _, grad, W = likelihood_terms(f, n, k)
        residual = float(np.abs(grad - a).max())
        if residual <= NEWTON_TOL:
            break
        # Остаток перестал убывать: достигнут предел округления
        if residual >= prev_residual and residual <= NEWTON_TOL * max(1.0, np.abs(grad).max()):
            logger.debug("Laplace Newton stopped at rounding level, residual %.3g", residual)
            break
        prev_residual = residual
        sW, L = _factor(K, W)
        b = W * f + grad
        a_new = b - sW * cho_solve((L, True), sW * (K @ b))
        delta = a_new - a
        step = 1.0
        while True:
            cand_val, cand_f = objective(a + step * delta)
            if cand_val >= psi_val or step < 1e-10:
                break
            step *= 0.5
        a, f, psi_val = a + step * delta, cand_f, cand_val
    else:
        raise NonConvergenceError(
            f"Laplace Newton did not converge in {NEWTON_MAX_STEPS} steps (psi={kernel.psi:g}, lambda={kernel.lambda_:g})"
        )

    loglik, grad, W = likelihood_terms(f, n, k)
    sW, L = _factor(K, W)
    log_evidence = -0.5 * a @ f + loglik - float(np.sum(np.log(np.diag(L))))
    return LaplaceFit(
        dataset=data,
        kernel=kernel,
        mode=f,
        W=W,
        chol=L,
        grad=grad,
        log_evidence=log_evidence,
        iterations=iteration,
    )


@dataclass(frozen=True)
class Prediction:
    latent_mean: float
    latent_var: float
    probability: float


def probit_predictive(mean, var):
    """E[s(q)] for q ~ N(mean, var)."""
    return sigmoid(np.asarray(mean) / np.sqrt(1.0 + 2.0 * np.asarray(var)))


def predict_many(fit: LaplaceFit, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    Xs = np.atleast_2d(np.asarray(inputs, dtype=float))
    Ks = fit.kernel.cross(Xs, fit.dataset.inputs)
    mean = Ks @ fit.grad
    V = solve_triangular(fit.chol, fit.sqrt_W[:, None] * Ks.T, lower=True)
    var = np.maximum(fit.kernel.prior_variance - np.sum(V**2, axis=0), 0.0)
    prob = probit_predictive(mean, var)
    return mean, var, prob


def predict(fit: LaplaceFit, gamma: Sequence[float] | np.ndarray) -> Prediction:
    mean, var, prob = predict_many(fit, np.asarray(gamma, dtype=float).reshape(1, -1))
    return Prediction(float(mean[0]), float(var[0]), float(prob[0]))


def hyper_grid(prior: HyperPrior) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.linspace(-GRID_HALF_WIDTH, GRID_HALF_WIDTH, GRID_POINTS)
    return prior.log_psi_mean + offsets, prior.log_lambda_mean + offsets


def log_hyperposterior(fit: LaplaceFit, prior: HyperPrior) -> float:
    """Unnormalised log p(ψ, λ | D). The λ term is dropped when λ cannot affect the likelihood."""
    score = fit.log_evidence + prior.log_psi_density(np.log(fit.kernel.psi))
    if len(fit.dataset) >= 2:
        score += prior.log_lambda_density(np.log(fit.kernel.lambda_))
    return float(score)


def map_hyperparameters(data: ClassificationDataset, prior: HyperPrior) -> tuple[SeKernel, LaplaceFit]:
    if len(data) == 0:
        raise DomainError("cannot choose hyperparameters for an empty dataset")
    log_psis, log_lambdas = hyper_grid(prior)
    sq_dist = cdist(data.inputs, data.inputs, "sqeuclidean")
    best: tuple[float, int, int] | None = None
    best_fit: LaplaceFit | None = None
    rejected = 0
    for j, log_lam in enumerate(log_lambdas):
        for i, log_psi in enumerate(log_psis):
            kernel = SeKernel(psi=float(np.exp(log_psi)), lambda_=float(np.exp(log_lam)))
            K = kernel.from_sq_dist(sq_dist)
            try:
                fit = laplace_fit(data, kernel, K=0.5 * (K + K.T))
            except (NonConvergenceError, SingularError) as e:
                rejected += 1
                logger.debug("Hyperparameter candidate rejected: %s", e)
                continue
            key = (log_hyperposterior(fit, prior), j, i)
            if best is None or key > best:
                best, best_fit = key, fit
    if best_fit is None:
        raise AllRejectedError(f"all {GRID_POINTS ** 2} hyperparameter candidates failed")
    if rejected:
        logger.info("%d of %d hyperparameter candidates rejected", rejected, GRID_POINTS**2)
    return best_fit.kernel, best_fit
