from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import dcdc_plant, dcdc_spec
from errors import CertificateError, DimensionError, DomainError
from services.gp_classify import ClassificationDataset, SeKernel, laplace_fit, predict_many
from services.plant import NoiseModel, RngStream
from services.smpc import TighteningVector
from services.tightener import (
    DriftCertificate,
    GammaSpace,
    TightenerConfig,
    TwaitBound,
    estimate_H,
    final_gamma,
    lyapunov_value,
    monte_carlo_drift,
    random_gamma,
    run,
    select_gamma,
    simulate_closed_loop,
    tcol_bound,
    twait_bound,
    verify_drift_certificate,
)

ZERO_NOISE = NoiseModel.uniform([0.0, 0.0], [0.0, 0.0])
D_GAMMA = 10


def _cfg(**overrides) -> TightenerConfig:
    kwargs = dict(
        delta=0.1,
        weights=np.ones(D_GAMMA),
        t_wait=2,
        t_col=10,
        c_rand=100,
        t_final=2,
        gamma0=[0.0],
        refit_every=1,
        steps_every=1,
    )
    kwargs.update(overrides)
    return TightenerConfig(**kwargs)


def _fit_on(space: GammaSpace, reduced, trials, successes, kernel=SeKernel(psi=0.1, lambda_=1.0)):
    data = ClassificationDataset(space.embed(np.asarray(reduced, dtype=float)), trials, successes)
    return laplace_fit(data, kernel)


# --- bounds ---------------------------------------------------------------------

class TestScheduleBounds:
    def test_twait_examples(self):
        assert twait_bound(1.0, 0.5, 1.0, 0) == 0
        assert twait_bound(1.0, 0.5, 1.0, 10) == 10

    def test_twait_is_the_smallest_admissible_integer(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            vartheta, varphi = rng.uniform(0.5, 20.0), rng.uniform(0.05, 0.99)
            v, t_final = rng.uniform(1.0, 50.0), int(rng.integers(0, 200))
            T = twait_bound(vartheta, varphi, v, t_final)
            rhs = (math.log(vartheta * v) + t_final * math.log(2.0)) / -math.log(varphi)
            assert T >= rhs - 1e-6
            assert T == 0 or T - 1 < rhs

    def test_twait_domain(self):
        with pytest.raises(DomainError):
            twait_bound(1.0, 1.0, 1.0, 1)
        with pytest.raises(DomainError):
            twait_bound(1.0, 0.5, 0.5, 1)

    def test_tcol_examples(self):
        assert tcol_bound(1.0, 7) == 7
        assert tcol_bound(0.5, 7) == 4
        assert tcol_bound(33.4, 150) == 5010
        assert tcol_bound(1.0000000001, 7) == 8
        assert tcol_bound(0.9999999999, 7) == 7
        with pytest.raises(DomainError):
            tcol_bound(0.0, 7)

    def test_wait_steps_grow_with_the_state(self):
        bound = TwaitBound(vartheta=1.0, varphi=0.5, weight=np.eye(2))
        assert bound.wait_steps([0.0, 0.0], 3) == 3
        assert bound.wait_steps([3.0, 0.0], 3) == math.ceil(math.log(10.0) / math.log(2.0)) + 3
        cfg = _cfg(t_wait=bound)
        assert cfg.wait_steps(np.zeros(2)) == 2


# --- drift certificate ---------------------------------------------------------------

class TestDriftCertificate:
    def test_hand_example(self):
        b = verify_drift_certificate(DriftCertificate(np.eye(2), 0.5 * np.eye(2), 0.5 * np.eye(2), np.zeros((2, 2))))
        assert b.mu == pytest.approx(0.75)
        assert b.level == pytest.approx(2.0)
        assert b.K == pytest.approx(1.5)

    def test_noise_raises_the_level(self):
        b = verify_drift_certificate(DriftCertificate(np.eye(2), 0.5 * np.eye(2), 0.5 * np.eye(2), 0.2 * np.eye(2)))
        assert b.level == pytest.approx(0.08 / 0.25 + 2.0)

    def test_m_equal_p_is_rejected(self):
        with pytest.raises(CertificateError):
            verify_drift_certificate(DriftCertificate(np.eye(2), np.eye(2), 0.1 * np.eye(2), np.zeros((2, 2))))

    def test_no_decrease_is_rejected(self):
        with pytest.raises(CertificateError):
            verify_drift_certificate(DriftCertificate(np.eye(2), 0.1 * np.eye(2), np.eye(2), np.zeros((2, 2))))

    def test_monte_carlo_matches_closed_form(self):
        c = DriftCertificate(np.eye(2), 0.5 * np.eye(2), 0.5 * np.eye(2), 0.3 * np.eye(2))
        x = np.array([1.0, 1.0])
        mean, stderr, _ = monte_carlo_drift(c, x, RngStream(8), 200_000)
        expected = 1.0 + 0.5 * (0.5 + 0.18)
        assert abs(mean - expected) <= 5 * stderr
        bounds = verify_drift_certificate(c)
        assert mean <= bounds.mu * lyapunov_value(c.P, x) + bounds.K

    def test_expected_value_contracts_outside_the_level_set(self):
        c = DriftCertificate(np.eye(2), 0.5 * np.eye(2), np.array([[0.5, 0.2], [0.0, 0.4]]), 0.3 * np.eye(2))
        bounds = verify_drift_certificate(c)
        rng = np.random.default_rng(12)
        stream = RngStream(13)
        checked = 0
        while checked < 100:
            x = rng.uniform(-5.0, 5.0, size=2)
            v = lyapunov_value(c.P, x)
            if v <= bounds.level:
                continue
            mean, stderr, stream = monte_carlo_drift(c, x, stream, 20_000)
            assert mean <= bounds.mu * v + 3 * stderr
            checked += 1


# --- search space and selection --------------------------------------------------------

class TestGammaSpace:
    def test_grid_and_order(self):
        space = GammaSpace.uniform_offset(D_GAMMA, -1.0, 0.2, 241)
        assert space.grid.shape == (241, 1)
        reduced, full = space.ordered(np.ones(D_GAMMA))
        assert reduced[0, 0] == pytest.approx(-1.0)
        assert reduced[-1, 0] == pytest.approx(0.2)
        assert_allclose(full[0], -np.ones(D_GAMMA))

    def test_ties_are_broken_lexicographically(self):
        space = GammaSpace(np.eye(2), [0.0, 0.0], [1.0, 1.0], (2, 2))
        reduced, _ = space.ordered(np.ones(2))
        assert_allclose(reduced, [[0, 0], [0, 1], [1, 0], [1, 1]])

    def test_snap_and_degenerate_axis(self):
        space = GammaSpace(np.eye(2), [0.0, 0.5], [1.0, 0.5], (5, 3))
        assert space.grid.shape == (5, 2)
        assert np.all(space.grid[:, 1] == 0.5)
        assert_allclose(space.snap([0.3, 9.0]), [0.25, 0.5])

    def test_validation(self):
        with pytest.raises(DomainError):
            GammaSpace.uniform_offset(3, 1.0, 0.0, 10)
        with pytest.raises(DomainError):
            GammaSpace.uniform_offset(3, 0.0, 1.0, 1)
        with pytest.raises(DimensionError):
            GammaSpace(np.ones(3), [0.0], [1.0], (3,))


class TestSelection:
    space = GammaSpace.uniform_offset(D_GAMMA, -1.0, 0.2, 25)

    def test_all_violating_data_is_infeasible(self):
        xs = np.linspace(-1.0, 0.2, 13)
        fit = _fit_on(self.space, xs, np.full(13, 50), np.zeros(13, dtype=int))
        assert select_gamma(fit, self.space, _cfg()) is None

    def test_all_satisfying_data_gives_the_lowest_point(self):
        xs = np.linspace(-1.0, 0.2, 13)
        fit = _fit_on(self.space, xs, np.full(13, 50), np.full(13, 50))
        cand = select_gamma(fit, self.space, _cfg())
        assert cand.reduced == pytest.approx((-1.0,))
        assert_allclose(cand.vector.values, -np.ones(D_GAMMA))

    def test_choice_is_the_cheapest_qualifying_point(self):
        xs = np.linspace(-1.0, 0.2, 13)
        ks = np.where(xs >= -0.35, 50, 10)
        fit = _fit_on(self.space, xs, np.full(13, 50), ks)
        cfg = _cfg()
        cand = select_gamma(fit, self.space, cfg)
        reduced, full = self.space.ordered(cfg.weights)
        _, _, prob = predict_many(fit, full)
        qualifying = np.flatnonzero(prob >= 1.0 - cfg.delta)
        assert qualifying.size > 0
        assert cand.reduced == pytest.approx(tuple(reduced[qualifying[0]]))
        assert np.all(prob[: qualifying[0]] < 1.0 - cfg.delta)

    def test_final_choice_is_restricted_to_visited_points(self):
        xs = np.linspace(-1.0, 0.2, 13)
        fit = _fit_on(self.space, xs, np.full(13, 50), np.full(13, 50))
        visited = [self.space.candidate([0.2]), self.space.candidate([-0.5]), self.space.candidate([0.0])]
        cand, prob = final_gamma(fit, visited, _cfg())
        assert cand.reduced == pytest.approx((-0.5,))
        assert prob >= 0.9

    def test_random_draws(self):
        degenerate = GammaSpace.uniform_offset(D_GAMMA, -0.3, -0.3, 5)
        cand, _ = random_gamma(degenerate, RngStream(1))
        assert cand.reduced == pytest.approx((-0.3,))

        space = GammaSpace.uniform_offset(D_GAMMA, -1.0, 0.2, 241)
        rng = RngStream(2)
        draws = []
        for _ in range(20_000):
            cand, rng = random_gamma(space, rng)
            draws.append(cand.reduced[0])
        assert np.mean(draws) == pytest.approx(-0.4, abs=0.01)
        assert min(draws) >= -1.0 and max(draws) <= 0.2

        a, _ = random_gamma(space, RngStream(77, 3))
        b, _ = random_gamma(space, RngStream(77, 3))
        assert a == b


# --- online loop -------------------------------------------------------------------------

class TestRun:
    def test_single_update_is_random(self):
        plant = dcdc_plant()
        space = GammaSpace.uniform_offset(D_GAMMA, -1.0, 0.2, 25)
        cfg = _cfg(t_final=1, c_rand=1, t_wait=2, t_col=5)
        trace = run(plant, dcdc_spec(plant), space, cfg, RngStream(3))
        assert [u.i for u in trace.updates] == [0, 1]
        first = trace.updates[1]
        assert first.random and first.feasible is None
        assert first.t_i == 7
        assert trace.dataset.total_trials == 5
        assert len(trace.steps) == 7
        if trace.final_gamma is not None:
            assert trace.final_gamma in trace.visited()

    def test_schedule_and_exploration_invariants(self):
        plant = dcdc_plant()
        space = GammaSpace.uniform_offset(D_GAMMA, -1.0, 0.2, 25)
        cfg = _cfg(t_final=4, c_rand=2, t_wait=3, t_col=4, refit_every=2, steps_every=0)
        trace = run(plant, dcdc_spec(plant), space, cfg, RngStream(4))
        assert [u.t_i for u in trace.updates] == [0, 7, 14, 21, 28]
        for rec in trace.updates[1:]:
            if rec.i % 2 == 0:
                assert rec.random and rec.feasible is None
            else:
                assert rec.random == (rec.feasible is False)
        assert trace.dataset.total_trials == 16
        assert trace.steps == []

    def test_runs_are_reproducible(self):
        plant = dcdc_plant()
        space = GammaSpace.uniform_offset(D_GAMMA, -1.0, 0.2, 25)
        cfg = _cfg(t_final=2, t_col=6)
        a = run(plant, dcdc_spec(plant), space, cfg, RngStream(5))
        b = run(plant, dcdc_spec(plant), space, cfg, RngStream(5))
        assert a.updates == b.updates
        assert a.steps == b.steps
        assert a.final_gamma == b.final_gamma

    def test_noiseless_plant_settles_on_the_lowest_point(self):
        plant = dcdc_plant(ZERO_NOISE)
        spec = dcdc_spec(plant)
        space = GammaSpace.uniform_offset(D_GAMMA, -1.0, 0.2, 2)
        cfg = _cfg(gamma0=[-1.0], t_final=2, t_wait=2, t_col=20)
        trace = run(plant, spec, space, cfg, RngStream(6))
        assert all(s.label == 1 for s in trace.steps)
        assert trace.final_gamma.reduced == pytest.approx((-1.0,))
        assert estimate_H(plant, spec, trace.final_gamma.vector, 200, 0, RngStream(7)) == 1.0

    def test_final_choice_is_the_cheapest_visited_feasible_point(self):
        plant = dcdc_plant()
        space = GammaSpace.uniform_offset(D_GAMMA, -1.0, 0.2, 25)
        cfg = _cfg(t_final=6, c_rand=3, t_wait=2, t_col=8)
        trace = run(plant, dcdc_spec(plant), space, cfg, RngStream(14))
        visited = trace.visited()
        assert trace.final_fit is not None
        _, _, prob = predict_many(trace.final_fit, np.array([c.full for c in visited]))
        level = 1.0 - cfg.delta
        clear = [c for c, p in zip(visited, prob) if p >= level + 1e-12]
        if trace.final_gamma is None:
            assert clear == []
            return
        assert trace.final_probability >= level
        chosen = float(np.dot(cfg.weights, trace.final_gamma.full))
        assert all(float(np.dot(cfg.weights, c.full)) >= chosen for c in clear)

    def test_dimension_mismatch(self):
        plant = dcdc_plant()
        space = GammaSpace.uniform_offset(D_GAMMA + 1, -1.0, 0.2, 5)
        with pytest.raises(DimensionError):
            run(plant, dcdc_spec(plant), space, _cfg(weights=np.ones(D_GAMMA + 1)), RngStream(0))

    def test_config_validation(self):
        with pytest.raises(DomainError):
            _cfg(delta=1.0)
        with pytest.raises(DomainError):
            _cfg(weights=np.zeros(D_GAMMA))
        with pytest.raises(DomainError):
            _cfg(c_rand=0)


# --- evaluation -------------------------------------------------------------------------

class TestEvaluation:
    def test_never_violated_constraint(self):
        spec = dcdc_spec()
        labels = dcdc_plant(offset=1e6)
        gamma = TighteningVector.zeros(spec.d_gamma)
        assert estimate_H(labels, spec, gamma, 200, 10, RngStream(1)) == 1.0

    def test_always_violated_constraint(self):
        spec = dcdc_spec()
        labels = dcdc_plant(offset=-1e6)
        gamma = TighteningVector.zeros(spec.d_gamma)
        assert estimate_H(labels, spec, gamma, 200, 10, RngStream(1)) == 0.0

    @pytest.mark.slow
    def test_long_run_estimates_agree_across_seeds(self):
        plant = dcdc_plant()
        spec = dcdc_spec(plant)
        gamma = TighteningVector.zeros(spec.d_gamma)
        n = 100_000
        a = estimate_H(plant, spec, gamma, n, 1_000, RngStream(21))
        b = estimate_H(plant, spec, gamma, n, 1_000, RngStream(22))
        p = 0.5 * (a + b)
        # соседние метки коррелированы: считаем эффективный объём выборки n / 50
        std = math.sqrt(2.0 * p * (1.0 - p) / (n / 50))
        assert abs(a - b) <= 3 * std + 1e-12

    def test_burn_in_drops_the_transient(self):
        plant = dcdc_plant()
        spec = dcdc_spec(plant)
        gamma = TighteningVector.zeros(spec.d_gamma)
        full = simulate_closed_loop(plant, spec, gamma, 60, RngStream(9))
        tail = simulate_closed_loop(plant, spec, gamma, 40, RngStream(9), burn_in=20)
        assert_allclose(tail.states, full.states[20:], rtol=0, atol=1e-12)
        assert tail.start == 20
        assert tail.average_cost == pytest.approx(full.stage_costs[20:].mean())
