import numpy as np
import pytest

from gradfree.momentum import (
    DecayMode,
    MomentumState,
    decay_factor,
    fixed_decay_ratio,
    momentum_variance_profile,
    run_accelerated,
    update_direction,
    weight_ratio,
)
from gradfree.problems import conditioned_quadratic
from gradfree.sgfd import InfeasibleScheduleError, RunConfig, StepsizeSchedule, feasible_sigma, run_sgfd


class TestDecayFactor:
    def test_values(self):
        assert decay_factor(1, 1) == 0.5
        assert decay_factor(3, 2) == 0.5625

    def test_telescoping(self):
        assert decay_factor(2, 1) * decay_factor(3, 1) == pytest.approx(0.5)

    @pytest.mark.parametrize("p", [0, -1])
    def test_rejects_nonpositive_p(self, p):
        with pytest.raises(ValueError):
            decay_factor(1, p)

    def test_in_unit_interval(self):
        k = np.arange(1, 1000)
        g = np.array([decay_factor(int(i), 2.5) for i in k])
        assert np.all((g > 0) & (g < 1))


class TestDecayMode:
    @pytest.mark.parametrize("kwargs", [dict(kind="changing", p=0), dict(kind="fixed", gamma=1.0),
                                        dict(kind="fixed", gamma=None), dict(kind="fixed", gamma=0.0),
                                        dict(kind="linear")])
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            DecayMode(**kwargs)

    def test_default_p(self):
        assert DecayMode().p == 2.0


class TestUpdateDirection:
    def test_first_direction(self):
        state = MomentumState(DecayMode.changing(3.0))
        s = np.array([0.2, -0.4])
        np.testing.assert_allclose(update_direction(state, s, 0.1), s / 0.1, rtol=1e-15)

    def test_constant_inputs(self):
        state = MomentumState()
        u = np.array([1.0, -2.0, 3.0])
        for k in range(1, 50):
            np.testing.assert_allclose(update_direction(state, 0.5 * u / k, 0.5 / k), u, rtol=1e-13)

    def test_five_step_closed_form(self):
        rng = np.random.default_rng(0)
        steps = rng.standard_normal((5, 3))
        alphas = np.array([0.5, 0.4, 0.3, 0.25, 0.2])
        state = MomentumState(DecayMode.changing(2.0))
        for s, a in zip(steps, alphas):
            m = update_direction(state, s, a)
        w = np.arange(1, 6) ** 2.0
        direct = (w[:, None] * steps / alphas[:, None]).sum(0) / w.sum()
        np.testing.assert_allclose(m, direct, rtol=1e-10)

    @pytest.mark.parametrize("p", [0.5, 1.0, 2.0, 4.0])
    def test_accumulator_closed_form(self, p):
        rng = np.random.default_rng(int(p * 10))
        K = 1000
        steps = rng.standard_normal((K, 2))
        alphas = 1.0 / (np.arange(1, K + 1) + 3.0)
        state = MomentumState(DecayMode.changing(p))
        j = np.arange(1, K + 1, dtype=float)
        for k in range(1, K + 1):
            update_direction(state, steps[k - 1], alphas[k - 1])
            if k in (1, 10, 100, 1000):
                w = (j[:k] / (k + 1)) ** p
                v = (w[:, None] * steps[:k] / alphas[:k, None]).sum(0)
                np.testing.assert_allclose(state.v, v, rtol=1e-10)
                assert state.W == pytest.approx(w.sum(), rel=1e-12)

    def test_normalizer_linear_growth(self):
        state = MomentumState(DecayMode.changing(2.0))
        for _ in range(10_000):
            update_direction(state, np.zeros(1), 1.0)
        # sum j^2 / (k+1)^2 ~ k/3
        assert state.W / 10_000 == pytest.approx(1 / 3, rel=1e-3)

    def test_rejects(self):
        with pytest.raises(ValueError):
            update_direction(MomentumState(), np.ones(2), 0.0)
        with pytest.raises(ValueError):
            update_direction(MomentumState(), np.array([np.inf, 0.0]), 0.1)

    def test_direction_before_update(self):
        with pytest.raises(ValueError):
            MomentumState().direction


class TestWeightRatio:
    def test_equal_weights_limit(self):
        # p -> 0 gives equal weights, ratio 1/k
        assert weight_ratio(100, DecayMode.changing(1e-9)) == pytest.approx(0.01, rel=1e-6)

    @pytest.mark.parametrize("p", [1.0, 2.0])
    def test_changing_bounded_by_c_over_k(self, p):
        # sum j^2p / (sum j^p)^2 -> (p+1)^2 / (2p+1) / k
        C = (p + 1) ** 2 / (2 * p + 1)
        for k in (10, 100, 1000, 10_000, 100_000):
            assert weight_ratio(k, DecayMode.changing(p)) <= 1.01 * C / k

    def test_fixed_closed_form(self):
        for k in (1, 5, 50):
            assert weight_ratio(k, DecayMode.fixed(0.9)) == pytest.approx(fixed_decay_ratio(0.9, k), rel=1e-12)
        assert weight_ratio(2000, DecayMode.fixed(0.9)) == pytest.approx(fixed_decay_ratio(0.9), rel=1e-12)
        assert fixed_decay_ratio(0.9) == pytest.approx(1 / 19)


def _config(iterations, beta=5.0, seed=2, **kw):
    p = conditioned_quadratic(4, 4.0, noise_sd=0.5, seed=1)
    sched = StepsizeSchedule.robbins_monro(beta, feasible_sigma(beta, p.constants.L))
    return RunConfig(p, sched, iterations, replications=kw.pop("replications", 4), seed=seed, **kw)


class TestRunAccelerated:
    def test_first_iteration_bit_exact(self):
        cfg = _config(1, stride=1)
        a, b = run_sgfd(cfg), run_accelerated(cfg)
        assert a.mean_gap[0] == b.mean_gap[0]
        assert a.mean_grad_sq[0] == b.mean_grad_sq[0]

    def test_second_iteration_differs(self):
        cfg = _config(2, stride=1)
        assert run_sgfd(cfg).mean_gap[1] != run_accelerated(cfg).mean_gap[1]

    def test_records_variance(self):
        tr = run_accelerated(_config(100, stride=10))
        assert tr.var_mk is not None and np.all(tr.var_mk > 0)
        assert tr.metadata["decay"] == {"kind": "changing", "p": 2.0, "gamma": None}

    def test_single_replication_variance_missing(self):
        tr = run_accelerated(_config(20, stride=10, replications=1))
        assert np.all(np.isnan(tr.var_mk))

    def test_momentum_feasibility(self):
        with pytest.raises(InfeasibleScheduleError, match="4/l"):
            run_accelerated(_config(10, beta=2.0))

    def test_deterministic(self):
        a = run_accelerated(_config(300, stride=10))
        b = run_accelerated(_config(300, stride=10))
        np.testing.assert_array_equal(a.mean_gap, b.mean_gap)
        np.testing.assert_array_equal(a.var_mk, b.var_mk)

    def test_clip_radius_keeps_iterates_in_ball(self):
        p = conditioned_quadratic(2, 2.0, noise_sd=5.0, seed=0)
        sched = StepsizeSchedule.robbins_monro(5.0, feasible_sigma(5.0, 2.0))
        cfg = RunConfig(p, sched, 200, replications=3, seed=0, stride=1, clip_radius=0.5)
        tr = run_accelerated(cfg)
        # gap of a point within 0.5 of x1 = x* + 1 is bounded by the max over that ball
        reach = np.linalg.norm(np.ones(2)) + 0.5
        assert np.all(tr.mean_gap <= 0.5 * 2.0 * reach**2 + 1e-12)

    def test_fixed_decay_runs(self):
        tr = run_accelerated(_config(100, stride=10), DecayMode.fixed(0.9))
        assert tr.metadata["decay"]["gamma"] == 0.9


class TestVarianceProfile:
    def setup_method(self):
        self.p = conditioned_quadratic(4, 4.0, noise_sd=1.0, seed=0)
        self.sched = StepsizeSchedule.robbins_monro(5.0, feasible_sigma(5.0, 4.0))

    def test_changing_decay_like_one_over_k(self):
        prof = momentum_variance_profile(self.p, self.sched, DecayMode.changing(2.0), 2000, 200, seed=1,
                                         record=[100, 200, 500, 1000, 2000])
        # V[m_k] ~ C V[g] / k with C = 9/5 for p = 2
        expected = 1.8 * prof.var_g / prof.k
        np.testing.assert_allclose(prof.var_mk, expected, rtol=0.3)

    def test_fixed_decay_plateau(self):
        prof = momentum_variance_profile(self.p, self.sched, DecayMode.fixed(0.8), 1000, 300, seed=2,
                                         record=range(500, 1001, 50))
        level = prof.var_mk.mean() / prof.var_g
        assert level == pytest.approx(fixed_decay_ratio(0.8), rel=0.25)

    def test_trajectory_mode(self):
        path = self.p.x0 + np.linspace(0, 1, 50)[:, None] * np.ones(4)
        prof = momentum_variance_profile(self.p, self.sched, DecayMode.changing(1.0), 50, 20, trajectory=path)
        assert prof.var_mk.shape == (50,)

    def test_validation(self):
        with pytest.raises(ValueError):
            momentum_variance_profile(self.p, self.sched, DecayMode(), 10, 1)
        with pytest.raises(ValueError):
            momentum_variance_profile(self.p, self.sched, DecayMode(), 10, 5, trajectory=np.zeros((3, 4)))
        with pytest.raises(ValueError):
            momentum_variance_profile(self.p, self.sched, DecayMode(), 10, 5, record=[11])
