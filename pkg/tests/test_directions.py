import math

import numpy as np
import pytest

from gradfree.directions import (
    NORMAL,
    UNIFORM,
    DirectionDistribution,
    empirical_moments,
    moment_constants,
    normal_directions,
    reconstruction_error,
    sample,
    third_moment_bound,
    third_moment_norm,
    uniform_directions,
)
from gradfree.streams import draw_blocks, open_uniform, replication_rng


class TestConstruction:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown direction law"):
            DirectionDistribution("sphere", 3)

    @pytest.mark.parametrize("dim", [0, -2, 1.5])
    def test_rejects_bad_dimension(self, dim):
        with pytest.raises(ValueError, match="dimension"):
            DirectionDistribution(UNIFORM, dim)

    def test_default_is_uniform(self):
        assert DirectionDistribution().kind == UNIFORM


class TestMomentConstants:
    def test_normal_d2(self):
        # m4 = 3: sqrt(1 + 3/2 - 1/2)
        r, m4, dz = moment_constants(normal_directions(2))
        assert r is None
        assert m4 == 3.0
        assert dz == pytest.approx(math.sqrt(2.0), rel=1e-15)

    def test_uniform_d1(self):
        r, m4, dz = moment_constants(uniform_directions(1))
        assert r == pytest.approx(math.sqrt(3.0))
        assert m4 == pytest.approx(1.8)
        assert dz == pytest.approx(1.3416407864998738, rel=1e-15)

    def test_uniform_large_d_tends_to_one(self):
        assert uniform_directions(10**6).d_zeta == pytest.approx(1.0, abs=1e-6)

    def test_min_picks_bound_when_smaller(self):
        # sqrt(1 + 0.8) < sqrt(3) for d=1; r only wins if the moment term exceeds it
        dist = uniform_directions(1)
        assert dist.d_zeta < dist.r_zeta

    def test_uniform_fourth_moment_integral(self):
        # (1/(2 sqrt3)) int t^4 dt over [-sqrt3, sqrt3] = 9/5
        r = math.sqrt(3.0)
        assert (2 * r**5 / 5) / (2 * r) == pytest.approx(uniform_directions(1).m4, rel=1e-14)


class TestSampling:
    def test_uniform_support(self):
        z = uniform_directions(3).sample(np.random.default_rng(0), 10_000)
        assert z.shape == (10_000, 3)
        assert np.all(np.abs(z) <= math.sqrt(3.0))

    def test_single_draw_shape(self):
        z = sample(uniform_directions(4), np.random.default_rng(0))
        assert z.shape == (4,)

    @pytest.mark.parametrize("kind", [UNIFORM, NORMAL])
    def test_same_seed_bit_identical(self, kind):
        dist = DirectionDistribution(kind, 5)
        a = dist.sample(replication_rng(3, 1), 100)
        b = dist.sample(replication_rng(3, 1), 100)
        np.testing.assert_array_equal(a, b)

    def test_block_equals_sequential(self):
        rngs = [replication_rng(9, r) for r in range(3)]
        block = draw_blocks(rngs, 4, 6)
        seq_rngs = [replication_rng(9, r) for r in range(3)]
        seq = np.stack([np.stack([open_uniform(g, 6) for g in seq_rngs]) for _ in range(4)])
        np.testing.assert_array_equal(block, seq)

    def test_open_uniform_never_hits_endpoints(self):
        u = open_uniform(np.random.default_rng(1), 10**5)
        assert u.min() > 0 and u.max() < 1

    def test_normal_fourth_moment(self):
        n = 10**6
        z = normal_directions(1).sample(np.random.default_rng(4), n)[:, 0]
        se = math.sqrt((105 - 9) / n)  # Var(z^4) = E z^8 - 9
        assert abs(np.mean(z**4) - 3.0) < 3 * se

    def test_uniform_fourth_moment(self):
        n = 10**6
        z = uniform_directions(1).sample(np.random.default_rng(5), n)[:, 0]
        se = math.sqrt((27 / 7 - 1.8**2) / n)  # E z^8 = 3^4/9 = 27/7
        assert abs(np.mean(z**4) - 1.8) < 3 * se


class TestEmpiricalMoments:
    @pytest.mark.parametrize("kind", [UNIFORM, NORMAL])
    def test_mean_and_covariance(self, kind):
        n, d = 200_000, 6
        mean, second = empirical_moments(DirectionDistribution(kind, d), n, np.random.default_rng(7))
        assert np.all(np.abs(mean) < 4 / math.sqrt(n))
        np.testing.assert_allclose(second, np.eye(d), atol=0.02)


class TestReconstruction:
    def test_zero_vector_gives_zero(self):
        assert reconstruction_error(uniform_directions(3), np.zeros(3), 10, np.random.default_rng(0)) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            reconstruction_error(uniform_directions(3), np.ones(2), 10, np.random.default_rng(0))

    def test_needs_samples(self):
        with pytest.raises(ValueError):
            reconstruction_error(uniform_directions(3), np.ones(3), 0, np.random.default_rng(0))

    def test_normal_e1_small(self):
        e1 = np.eye(4)[0]
        assert reconstruction_error(normal_directions(4), e1, 10**6, np.random.default_rng(8)) < 0.01

    def test_error_shrinks_with_n(self):
        e1 = np.eye(3)[0]
        dist = uniform_directions(3)
        wins = sum(
            reconstruction_error(dist, e1, 10**6, replication_rng(s, 0))
            < reconstruction_error(dist, e1, 10**4, replication_rng(s, 1))
            for s in range(20)
        )
        assert wins >= 18


class TestThirdMoment:
    def test_symmetric_law_near_zero(self):
        n = 400_000
        t = third_moment_norm(uniform_directions(3), n, np.random.default_rng(2))
        assert t < 0.05

    def test_normal_d3_under_bound(self):
        n = 10**6
        t = third_moment_norm(normal_directions(3), n, np.random.default_rng(3))
        assert t <= 3**1.5 * math.sqrt(5 / 3) * (1 + 5 / math.sqrt(n))

    def test_bound_formula(self):
        assert third_moment_bound(normal_directions(3)) == pytest.approx(3**1.5 * math.sqrt(5 / 3))

    def test_normal_d1_near_zero(self):
        assert third_moment_norm(normal_directions(1), 10**6, np.random.default_rng(6)) < 0.02
