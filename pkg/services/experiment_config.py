"""
Experiment files: TOML parsed by tomllib, validated by pydantic, turned into plant / OCP / tightener objects.
"""
from __future__ import annotations

import logging
import math
import re
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from config import DEFAULT_PROFILE, EVAL_BURN_IN, PROFILE_ALIASES, PROFILES, SCENARIO_SAMPLES, SLACK_WEIGHT
from errors import ConfigParseError, ConfigValidationError, SmpcError
from services.gp_classify import HyperPrior
from services.numerics import solve_discrete_lyapunov
from services.plant import AffineConstraint, LinearPlant, NoiseModel
from services.smpc import OcpSpec
from services.tightener import GammaSpace, TightenerConfig, TwaitBound, tcol_bound

logger = logging.getLogger(__name__)

Matrix = list[list[float]]
Method = Literal["learned", "chebyshev", "gaussian", "scenario"]
METHODS: tuple[str, ...] = ("learned", "chebyshev", "gaussian", "scenario")

_TOML_POS = re.compile(r"line (\d+), column (\d+)")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NoiseSection(_Section):
    kind: Literal["uniform", "gaussian"]
    lower: list[float] | None = None
    upper: list[float] | None = None
    mean: list[float] | None = None
    std: list[float] | None = None

    @model_validator(mode="after")
    def _fields_for_kind(self) -> NoiseSection:
        need = ("lower", "upper") if self.kind == "uniform" else ("mean", "std")
        missing = [n for n in need if getattr(self, n) is None]
        if missing:
            raise ValueError(f"{self.kind} noise needs {', '.join(missing)}")
        return self


class ConstraintSection(_Section):
    H: Matrix
    offset: list[float]


class PlantSection(_Section):
    A: Matrix
    B: Matrix
    x0: list[float] | None = None
    noise: NoiseSection
    constraint: ConstraintSection


class OcpSection(_Section):
    horizon: int = Field(10, ge=1)
    Q: Matrix
    R: Matrix
    terminal: Literal["lyapunov", "lyapunov_transposed", "zero", "explicit"] = "lyapunov"
    P: Matrix | None = None
    input_lower: list[float]
    input_upper: list[float]
    slack_weight: float = Field(SLACK_WEIGHT, gt=0)

    @model_validator(mode="after")
    def _explicit_needs_p(self) -> OcpSection:
        if self.terminal == "explicit" and self.P is None:
            raise ValueError("terminal = 'explicit' needs P")
        return self


class GammaSpaceSection(_Section):
    lower: list[float]
    upper: list[float]
    resolution: int | list[int] = 241
    embedding: Literal["ones"] | Matrix = "ones"


class TwaitBoundSection(_Section):
    vartheta: float = Field(gt=0)
    varphi: float = Field(gt=0, lt=1)
    W: Matrix


class HyperPriorSection(_Section):
    log_psi_mean: float = -1.0
    log_psi_std: float = Field(1.0, gt=0)
    log_lambda_mean: float = 0.0
    log_lambda_std: float = Field(1.0, gt=0)


class TightenerSection(_Section):
    gamma0: list[float] = [0.0]
    c_rand: int = Field(100, ge=1)
    weights: list[float] | None = None
    t_wait_bound: TwaitBoundSection | None = None
    c_col: float | None = Field(None, gt=0)
    hyper_prior: HyperPriorSection = HyperPriorSection()
    refit_every: int | None = Field(None, ge=1)
    steps_every: int = Field(10, ge=0)


class RiskSection(_Section):
    values: list[float] = Field(min_length=1)
    interpretation: Literal["satisfaction", "risk"] = "satisfaction"

    @field_validator("values")
    @classmethod
    def _in_unit_interval(cls, values: list[float]) -> list[float]:
        for v in values:
            if not 0.0 < v < 1.0:
                raise ValueError(f"risk value {v} is outside (0, 1)")
        return values

    @property
    def deltas(self) -> list[float]:
        if self.interpretation == "risk":
            return list(self.values)
        return [round(1.0 - v, 12) for v in self.values]


class EvaluationSection(_Section):
    horizon: int | None = Field(None, ge=1)
    burn_in: int = Field(EVAL_BURN_IN, ge=0)


class ScenarioSection(_Section):
    samples: int = Field(SCENARIO_SAMPLES, ge=1)


class ProfileSection(_Section):
    t_wait: int = Field(ge=0)
    t_col: int = Field(ge=1)
    t_final: int = Field(ge=1)
    eval_horizon: int = Field(ge=1)
    refit_every: int = Field(1, ge=1)


class ExperimentConfig(_Section):
    name: str = "experiment"
    methods: list[Method] = Field(min_length=1)
    seeds: list[int] = Field([0], min_length=1)
    output_dir: str | None = None
    profile: str = DEFAULT_PROFILE
    profiles: dict[str, ProfileSection] = {}
    plant: PlantSection
    ocp: OcpSection
    gamma_space: GammaSpaceSection
    tightener: TightenerSection = TightenerSection()
    risk: RiskSection
    evaluation: EvaluationSection = EvaluationSection()
    scenario: ScenarioSection = ScenarioSection()

    @property
    def deltas(self) -> list[float]:
        return self.risk.deltas

    def resolve_profile(self, name: str | None = None) -> ProfileSection:
        name = name or self.profile
        if name not in self.profiles:
            name = PROFILE_ALIASES.get(name, name)
        if name in self.profiles:
            return self.profiles[name]
        if name in PROFILES:
            return ProfileSection(**PROFILES[name])
        raise ConfigValidationError(f"unknown profile '{name}'", ["profile"])

    def build_plant(self) -> LinearPlant:
        p = self.plant
        if p.noise.kind == "uniform":
            noise = NoiseModel.uniform(p.noise.lower, p.noise.upper)
        else:
            noise = NoiseModel.gaussian(p.noise.mean, p.noise.std)
        return LinearPlant(
            A=np.array(p.A),
            B=np.array(p.B),
            noise=noise,
            constraint=AffineConstraint(np.array(p.constraint.H), np.array(p.constraint.offset)),
            x0=None if p.x0 is None else np.array(p.x0),
        )

    def terminal_weight(self) -> np.ndarray:
        o = self.ocp
        A, Q = np.array(self.plant.A, dtype=float), np.array(o.Q, dtype=float)
        if o.terminal == "explicit":
            return np.array(o.P, dtype=float)
        if o.terminal == "zero":
            return np.zeros_like(Q)
        return solve_discrete_lyapunov(A, Q, transposed=o.terminal == "lyapunov_transposed")

    def build_ocp(self, plant: LinearPlant | None = None) -> OcpSpec:
        plant = plant or self.build_plant()
        o = self.ocp
        return OcpSpec(
            horizon=o.horizon,
            A=plant.A,
            B=plant.B,
            Q=np.array(o.Q),
            R=np.array(o.R),
            P=self.terminal_weight(),
            input_lower=np.array(o.input_lower),
            input_upper=np.array(o.input_upper),
            constraint=plant.constraint,
            slack_weight=o.slack_weight,
        )

    def build_gamma_space(self, spec: OcpSpec) -> GammaSpace:
        g = self.gamma_space
        d_red = len(g.lower)
        D = np.ones((spec.d_gamma, d_red)) if g.embedding == "ones" else np.array(g.embedding)
        return GammaSpace(D, g.lower, g.upper, tuple(np.broadcast_to(g.resolution, (d_red,))))

    def weights(self, spec: OcpSpec) -> np.ndarray:
        w = self.tightener.weights
        return np.ones(spec.d_gamma) if w is None else np.array(w, dtype=float)

    def build_tightener(self, spec: OcpSpec, delta: float, profile: ProfileSection) -> TightenerConfig:
        t = self.tightener
        wait: int | TwaitBound = profile.t_wait
        if t.t_wait_bound is not None:
            wait = TwaitBound(t.t_wait_bound.vartheta, t.t_wait_bound.varphi, np.array(t.t_wait_bound.W))
        t_col = profile.t_col
        if t.c_col is not None:
            t_col = max(1, tcol_bound(t.c_col, profile.t_final))
        return TightenerConfig(
            delta=delta,
            weights=self.weights(spec),
            t_wait=wait,
            t_col=t_col,
            c_rand=t.c_rand,
            t_final=profile.t_final,
            gamma0=np.array(t.gamma0),
            eval_horizon=self.eval_horizon(profile),
            hyper_prior=HyperPrior(**t.hyper_prior.model_dump()),
            refit_every=t.refit_every or profile.refit_every,
            steps_every=t.steps_every,
        )

    def eval_horizon(self, profile: ProfileSection) -> int:
        return self.evaluation.horizon or profile.eval_horizon

    def check(self) -> None:
        """Build every runtime object once so dimension errors surface as validation errors."""
        try:
            plant = self.build_plant()
            spec = self.build_ocp(plant)
            space = self.build_gamma_space(spec)
            profile = self.resolve_profile()
            if space.d_gamma != spec.d_gamma:
                raise ConfigValidationError(
                    f"gamma embedding has {space.d_gamma} rows, the OCP needs {spec.d_gamma}", ["gamma_space.embedding"])
            if len(self.tightener.gamma0) != space.d_reduced:
                raise ConfigValidationError("gamma0 must match the gamma box dimension", ["tightener.gamma0"])
            for delta in self.deltas:
                self.build_tightener(spec, delta, profile)
                if "scenario" in self.methods and self.scenario.samples < math.ceil(10.0 / delta - 1e-9):
                    raise ConfigValidationError(
                        f"scenario.samples={self.scenario.samples} is below 10/delta for delta={delta!r}",
                        ["scenario.samples"])
        except ConfigValidationError:
            raise
        except (SmpcError, ValueError) as e:
            raise ConfigValidationError(str(e)) from e


def _validation_error(e: ValidationError) -> ConfigValidationError:
    fields = [".".join(str(p) for p in err["loc"]) for err in e.errors()]
    message = "; ".join(f"{loc or '<root>'}: {err['msg']}" for loc, err in zip(fields, e.errors()))
    return ConfigValidationError(message, fields)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = _TOML_POS.search(str(e))
        line, col = (int(m.group(1)), int(m.group(2))) if m else (0, 0)
        raise ConfigParseError(f"{source}: {e}", line, col) from e
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise _validation_error(e) from e
    cfg.check()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    cfg = parse_config(path.read_text(encoding="utf-8"), source=str(path))
    logger.info("Loaded experiment '%s' from %s", cfg.name, path)
    return cfg
