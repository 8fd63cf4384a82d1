"""
True stochastic plant x⁺ = A x + B u + w, its noise and the constraint indicator.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from errors import DimensionError, DomainError

_MASK64 = (1 << 64) - 1
# Подпотоки занимают старшие биты счётчика
_SUBSTREAM_SHIFT = 48


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream: equal (seed, counter) give equal draws."""

    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        key = (self.seed & _MASK64) | ((self.counter & _MASK64) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def advance(self, steps: int = 1) -> RngStream:
        return RngStream(self.seed, (self.counter + steps) & _MASK64)

    def substream(self, index: int) -> RngStream:
        return RngStream(self.seed, (self.counter + (index << _SUBSTREAM_SHIFT)) & _MASK64)


class NoiseKind(str, Enum):
    UNIFORM_BOX = "uniform"
    GAUSSIAN_DIAG = "gaussian"


@dataclass(frozen=True)
class NoiseModel:
    kind: NoiseKind
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind is NoiseKind.UNIFORM_BOX:
            lo = np.asarray(self.lower, dtype=float).reshape(-1)
            hi = np.asarray(self.upper, dtype=float).reshape(-1)
            if lo.shape != hi.shape:
                raise DimensionError("noise lower/upper differ in length")
            if np.any(lo > hi):
                raise DomainError("noise box needs lower <= upper")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
        else:
            mu = np.asarray(self.mean, dtype=float).reshape(-1)
            sd = np.asarray(self.std, dtype=float).reshape(-1)
            if mu.shape != sd.shape:
                raise DimensionError("noise mean/std differ in length")
            if np.any(sd <= 0):
                raise DomainError("noise standard deviations must be positive")
            object.__setattr__(self, "mean", mu)
            object.__setattr__(self, "std", sd)

    @classmethod
    def uniform(cls, lower, upper) -> NoiseModel:
        return cls(NoiseKind.UNIFORM_BOX, lower=lower, upper=upper)

    @classmethod
    def gaussian(cls, mean, std) -> NoiseModel:
        return cls(NoiseKind.GAUSSIAN_DIAG, mean=mean, std=std)

    @property
    def dim(self) -> int:
        return (self.lower if self.kind is NoiseKind.UNIFORM_BOX else self.mean).shape[0]

    def covariance(self) -> np.ndarray:
        if self.kind is NoiseKind.UNIFORM_BOX:
            return np.diag((self.upper - self.lower) ** 2 / 12.0)
        return np.diag(self.std**2)

    def draw(self, gen: np.random.Generator, count: int) -> np.ndarray:
        if self.kind is NoiseKind.UNIFORM_BOX:
            return self.lower + (self.upper - self.lower) * gen.random((count, self.dim))
        return self.mean + self.std * gen.standard_normal((count, self.dim))


@dataclass(frozen=True)
class AffineConstraint:
    """h(x) = H_x x - offset; satisfied iff h(x) <= 0 componentwise."""

    H: np.ndarray
    offset: np.ndarray

    def __post_init__(self) -> None:
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        offset = np.asarray(self.offset, dtype=float).reshape(-1)
        if H.shape[0] < 1 or offset.shape != (H.shape[0],):
            raise DimensionError(f"constraint H {H.shape} and offset {offset.shape} disagree")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "offset", offset)

    @property
    def d_c(self) -> int:
        return self.H.shape[0]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        return self.H @ x - self.offset


@dataclass(frozen=True)
class LinearPlant:
    A: np.ndarray
    B: np.ndarray
    noise: NoiseModel
    constraint: AffineConstraint
    x0: np.ndarray | None = None

    def __post_init__(self) -> None:
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float).reshape(A.shape[0], -1)
        if A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise DimensionError("A and B must be finite")
        if self.noise.dim != A.shape[0] or self.constraint.H.shape[1] != A.shape[0]:
            raise DimensionError("noise / constraint dimensions do not match the state")
        x0 = np.zeros(A.shape[0]) if self.x0 is None else np.asarray(self.x0, dtype=float).reshape(-1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "x0", x0)

    @property
    def d_x(self) -> int:
        return self.A.shape[0]

    @property
    def d_u(self) -> int:
        return self.B.shape[1]


def sample_noise(model: NoiseModel, rng: RngStream) -> tuple[np.ndarray, RngStream]:
    return model.draw(rng.generator(), 1)[0], rng.advance()


def sample_noise_batch(model: NoiseModel, rng: RngStream, count: int) -> tuple[np.ndarray, RngStream]:
    return model.draw(rng.generator(), count), rng.advance()


def step(plant: LinearPlant, x: np.ndarray, u: np.ndarray, rng: RngStream) -> tuple[np.ndarray, RngStream]:
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.shape != (plant.d_x,) or u.shape != (plant.d_u,):
        raise DimensionError(f"state {x.shape} / input {u.shape} do not match the plant")
    w, rng = sample_noise(plant.noise, rng)
    return plant.A @ x + plant.B @ u + w, rng


def constraint_label(c: AffineConstraint, x: np.ndarray) -> int:
    return int(np.all(c.evaluate(np.asarray(x, dtype=float)) <= 0.0))
