from __future__ import annotations

import numpy as np
import pytest

from services.plant import AffineConstraint, LinearPlant, NoiseModel
from services.numerics import solve_discrete_lyapunov
from services.smpc import OcpSpec

DCDC_A = np.array([[1.0, 0.0075], [-0.143, 0.996]])
DCDC_B = np.array([[4.798], [0.115]])
DCDC_Q = np.diag([1.0, 10.0])


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def dcdc_plant(noise: NoiseModel | None = None, offset: float = 0.0) -> LinearPlant:
    noise = noise or NoiseModel.uniform([-0.14, -0.14], [0.14, 0.14])
    return LinearPlant(DCDC_A, DCDC_B, noise, AffineConstraint([[1.0, 0.0]], [offset]))


def dcdc_spec(plant: LinearPlant | None = None, horizon: int = 10) -> OcpSpec:
    plant = plant or dcdc_plant()
    return OcpSpec(
        horizon=horizon,
        A=plant.A,
        B=plant.B,
        Q=DCDC_Q,
        R=np.eye(1),
        P=solve_discrete_lyapunov(plant.A, DCDC_Q),
        input_lower=[-0.2],
        input_upper=[0.2],
        constraint=plant.constraint,
    )


@pytest.fixture
def plant() -> LinearPlant:
    return dcdc_plant()


@pytest.fixture
def spec(plant) -> OcpSpec:
    return dcdc_spec(plant)


def tiny_config_text(
    output_dir: str | None = None,
    methods: str = '["learned", "chebyshev", "gaussian", "scenario"]',
    noise: str = 'kind = "uniform"\nlower = [-0.14, -0.14]\nupper = [0.14, 0.14]',
    x0: str = "[0.0, 0.0]",
    seeds: str = "[0, 1]",
) -> str:
    """Small experiment that runs in seconds: short schedule, coarse grid."""
    out = f'output_dir = "{output_dir}"\n' if output_dir else ""
    return f"""
name = "tiny"
methods = {methods}
seeds = {seeds}
profile = "tiny"
{out}
[profiles.tiny]
t_wait = 2
t_col = 10
t_final = 2
eval_horizon = 40

[plant]
A = [[1.0, 0.0075], [-0.143, 0.996]]
B = [[4.798], [0.115]]
x0 = {x0}

[plant.noise]
{noise}

[plant.constraint]
H = [[1.0, 0.0]]
offset = [0.0]

[ocp]
horizon = 10
Q = [[1.0, 0.0], [0.0, 10.0]]
R = [[1.0]]
input_lower = [-0.2]
input_upper = [0.2]

[gamma_space]
lower = [-1.0]
upper = [0.2]
resolution = 25

[tightener]
c_rand = 100
steps_every = 1

[risk]
values = [0.9]

[evaluation]
burn_in = 5

[scenario]
samples = 100
"""
