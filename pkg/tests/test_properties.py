import math
import tempfile
from pathlib import Path

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from gradfree.analysis import BoundParams, bound_A, bound_B_sequence, schedule_bounds
from gradfree.directions import KINDS, DirectionDistribution
from gradfree.momentum import DecayMode, MomentumState, update_direction
from gradfree.sgfd import Trace
from gradfree.streams import draw_blocks, replication_rng
from gradfree.traceio import read_trace_csv, trace_to_csv

finite = st.floats(-1e300, 1e300, allow_nan=False, allow_subnormal=True)


@given(p=st.floats(0.05, 8.0), k=st.integers(1, 300))
def test_constant_inputs_give_unit_weights(p, k):
    state = MomentumState(DecayMode.changing(p))
    for _ in range(k):
        m = update_direction(state, np.ones(2), 1.0)
    np.testing.assert_allclose(m, 1.0, rtol=1e-12)


@given(beta=st.floats(0.1, 20.0), sigma=st.floats(1e-3, 100.0), l=st.floats(0.05, 5.0), k=st.integers(1, 400))
def test_bound_A_matches_product(beta, sigma, l, k):
    a = beta * l
    if abs((1 + sigma - a) - round(1 + sigma - a)) < 1e-6 and round(1 + sigma - a) <= 0:
        return
    direct = float(np.prod(1 - a / (np.arange(1, k + 1) + sigma)))
    got = bound_A(BoundParams(beta, sigma, l, k))
    assert math.isclose(got, direct, rel_tol=1e-9, abs_tol=1e-12 * max(1.0, abs(direct)))


@given(alphas=st.lists(st.floats(1e-4, 0.5), min_size=1, max_size=60), l=st.floats(0.1, 1.9))
def test_schedule_bounds_recursion(alphas, l):
    alphas = np.array(alphas)
    A, B = schedule_bounds(alphas, l)
    a_prev, b_prev = 1.0, 0.0
    for i, al in enumerate(alphas):
        a_prev *= 1 - al * l
        b_prev = (1 - al * l) * b_prev + al**2
        assert math.isclose(A[i], a_prev, rel_tol=1e-9, abs_tol=1e-300)
        assert math.isclose(B[i], b_prev, rel_tol=1e-9)


@given(beta=st.floats(1.1, 6.0), sigma=st.floats(1e-3, 50.0), k=st.integers(1, 200))
def test_B_nonnegative_when_factors_are(beta, sigma, k):
    if beta > 1 + sigma:
        return
    assert np.all(bound_B_sequence(BoundParams(beta, sigma, 1.0, k)) >= 0)


@settings(max_examples=50)
@given(rows=st.lists(st.tuples(finite, finite, finite, st.one_of(st.none(), finite)), min_size=1, max_size=20),
       reps=st.integers(1, 1000))
def test_csv_round_trip(rows, reps):
    arr = np.array([[r[0], r[1], r[2], np.nan if r[3] is None else r[3]] for r in rows], dtype=float)
    tr = Trace(np.arange(1, len(rows) + 1), arr[:, 0], arr[:, 1], arr[:, 2], reps, var_mk=arr[:, 3])
    text = trace_to_csv(tr)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "t.csv"
        path.write_text(text)
        back = read_trace_csv(path)
    np.testing.assert_array_equal(back.alpha, tr.alpha)
    np.testing.assert_array_equal(back.mean_gap, tr.mean_gap)
    if np.all(np.isnan(tr.var_mk)):
        assert back.var_mk is None
    else:
        np.testing.assert_array_equal(back.var_mk, tr.var_mk)
    assert trace_to_csv(back) == text


@given(kind=st.sampled_from(KINDS), d=st.integers(1, 500))
def test_d_zeta_formula(kind, d):
    dist = DirectionDistribution(kind, d)
    expected = math.sqrt(1 + (dist.m4 - 1) / d)
    if dist.r_zeta is not None:
        expected = min(expected, dist.r_zeta)
    assert math.isclose(dist.d_zeta, expected, rel_tol=1e-15)
    assert dist.d_zeta >= 1.0 or kind == KINDS[0]


@settings(max_examples=30)
@given(seed=st.integers(0, 2**32), R=st.integers(1, 5), width=st.integers(1, 7),
       blocks=st.lists(st.integers(1, 9), min_size=1, max_size=4))
def test_block_draws_are_sequential(seed, R, width, blocks):
    rngs = [replication_rng(seed, r) for r in range(R)]
    chunks = [draw_blocks(rngs, b, width) for b in blocks]
    joined = np.concatenate(chunks, axis=0)
    fresh = [replication_rng(seed, r) for r in range(R)]
    ref = draw_blocks(fresh, sum(blocks), width)
    np.testing.assert_array_equal(joined, ref)
    assert np.all((joined > 0) & (joined < 1))
