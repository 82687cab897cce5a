"""Tests for verbalized-probability curves, convex blending, missing-curve
handling, and grid selection of the blend weight."""

import math

import numpy as np
import pytest

from survfuse.blending import (
    DEFAULT_LAMBDA_GRID,
    combine,
    handle_missing,
    mean_curve,
    select_lambda,
    verbalized_curve,
)
from survfuse.heads import SurvivalCurve
from survfuse.metrics import c_td

GRID = np.array([0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0])


def random_curve(rng, times=GRID):
    """Random valid step curve: S(0) = 1, non-increasing."""
    drops = rng.uniform(0.0, 0.3, size=times.size - 1)
    values = np.concatenate([[1.0], np.maximum(1.0 - np.cumsum(drops), 0.0)])
    return SurvivalCurve(times=times.copy(), values=values)


# ------------------------------------------------------------ S^v construction

def test_verbalized_curve_exponential_anchor():
    curve = verbalized_curve(90, GRID)
    rho = -math.log(0.9) / 3.0
    assert np.allclose(curve.values, np.exp(-rho * GRID), rtol=0, atol=1e-15)
    # anchored at the 3-year point, squared by 6 years
    assert abs(float(curve.at(3.0)) - 0.9) < 1e-12
    assert abs(float(curve.at(6.0)) - 0.81) < 1e-12
    assert curve.values[0] == 1.0


def test_verbalized_curve_certain_survival():
    curve = verbalized_curve(100, GRID)
    assert np.array_equal(curve.values, np.ones_like(GRID))


def test_verbalized_curve_floors_zero_percent():
    with pytest.warns(UserWarning):
        curve = verbalized_curve(0, GRID)
    assert abs(float(curve.at(3.0)) - 0.005) < 1e-12
    assert np.all(curve.values > 0.0)


def test_verbalized_curve_rejects_out_of_range():
    with pytest.raises(ValueError):
        verbalized_curve(-1, GRID)
    with pytest.raises(ValueError):
        verbalized_curve(101, GRID)


# ----------------------------------------------------------------- combination

def test_combine_formula():
    rng = np.random.default_rng(31)
    for _ in range(10):
        hidden = random_curve(rng)
        verb = random_curve(rng)
        for lam in (0.15, 0.5, 0.85):
            out = combine(hidden, verb, lam)
            expect = (1.0 - lam) * hidden.values + lam * verb.values
            assert np.array_equal(out.values, expect)
            assert np.array_equal(out.times, GRID)


def test_combine_endpoints_exact():
    rng = np.random.default_rng(32)
    hidden = random_curve(rng)
    verb = random_curve(rng)
    assert np.array_equal(combine(hidden, verb, 0.0).values, hidden.values)
    assert np.array_equal(combine(hidden, verb, 1.0).values, verb.values)


def test_combine_validation():
    rng = np.random.default_rng(33)
    hidden = random_curve(rng)
    verb = random_curve(rng)
    with pytest.raises(ValueError):
        combine(hidden, verb, -0.01)
    with pytest.raises(ValueError):
        combine(hidden, verb, 1.01)
    other = random_curve(rng, times=np.array([0.0, 1.0, 2.0]))
    with pytest.raises(ValueError):
        combine(hidden, other, 0.5)


def test_mean_curve():
    rng = np.random.default_rng(34)
    curves = [random_curve(rng) for _ in range(5)]
    out = mean_curve(curves)
    expect = np.mean([c.values for c in curves], axis=0)
    assert np.allclose(out.values, expect, rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        mean_curve([])
    with pytest.raises(ValueError):
        mean_curve([curves[0], random_curve(rng, times=np.array([0.0, 2.0]))])


def test_handle_missing():
    rng = np.random.default_rng(35)
    hidden = random_curve(rng)
    verb = random_curve(rng)
    cohort = random_curve(rng)
    # present: the verbalized curve serves both paths
    blend_in, verb_eval = handle_missing(hidden, verb, cohort)
    assert blend_in is verb and verb_eval is verb
    # absent: blend against the hidden curve itself, evaluate the cohort mean
    blend_in, verb_eval = handle_missing(hidden, None, cohort)
    assert blend_in is hidden and verb_eval is cohort
    # absent with no extractable probability anywhere
    blend_in, verb_eval = handle_missing(hidden, None, None)
    assert blend_in is hidden and verb_eval is None


# ------------------------------------------------------------- grid selection

def brute_force_lambda(hidden, verbalized, times, events, grid):
    best_lam, best_score = None, -np.inf
    for lam in sorted(grid):
        combined = [combine(h, v, lam) for h, v in zip(hidden, verbalized)]
        score = c_td(combined, times, events)
        if score > best_score:
            best_lam, best_score = lam, score
    return best_lam, best_score


def risk_ordered_curves(scores, times=GRID):
    """Higher score = steeper exponential = lower survival everywhere."""
    return [SurvivalCurve(times=times.copy(), values=np.exp(-s * times))
            for s in scores]


def test_select_lambda_prefers_the_informative_source():
    # event times decrease in the underlying risk; the verbalized curves
    # rank subjects correctly while the hidden curves rank them backwards
    times = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    events = np.ones(5, dtype=bool)
    risks = np.array([1.0, 0.8, 0.6, 0.4, 0.2])
    verbalized = risk_ordered_curves(risks)
    hidden = risk_ordered_curves(risks[::-1])
    lam, score = select_lambda(hidden, verbalized, times, events)
    assert score == 1.0
    # perfect concordance arrives somewhere past the midpoint, and ties
    # resolve to the smallest lambda achieving it
    assert lam > 0.5
    ref_lam, _ = brute_force_lambda(hidden, verbalized, times, events,
                                    DEFAULT_LAMBDA_GRID)
    assert lam == ref_lam
    # with the sources swapped the hidden curves already score 1 at lambda 0
    lam, score = select_lambda(verbalized, hidden, times, events)
    assert lam == 0.0
    assert score == 1.0


def test_select_lambda_ties_take_smallest():
    rng = np.random.default_rng(36)
    curves = [random_curve(rng) for _ in range(6)]
    times = rng.uniform(0.5, 5.5, size=6)
    events = np.ones(6, dtype=bool)
    # identical sources: every lambda scores the same
    lam, score = select_lambda(curves, curves, times, events)
    assert lam == 0.0
    assert score == c_td(curves, times, events)


def test_select_lambda_matches_brute_force():
    rng = np.random.default_rng(37)
    for trial in range(8):
        n = 12
        hidden = [random_curve(rng) for _ in range(n)]
        verbalized = [random_curve(rng) for _ in range(n)]
        times = rng.uniform(0.2, 5.8, size=n)
        events = rng.random(n) < 0.7
        if not events.any():
            events[0] = True
        lam, score = select_lambda(hidden, verbalized, times, events)
        ref_lam, ref_score = brute_force_lambda(hidden, verbalized, times,
                                                events, DEFAULT_LAMBDA_GRID)
        assert lam == ref_lam
        assert score == ref_score


def test_select_lambda_custom_grid_and_validation():
    rng = np.random.default_rng(38)
    hidden = [random_curve(rng) for _ in range(4)]
    verbalized = [random_curve(rng) for _ in range(4)]
    times = np.array([1.0, 2.0, 3.0, 4.0])
    events = np.ones(4, dtype=bool)
    grid = (0.0, 0.25, 0.5, 0.75, 1.0)
    lam, score = select_lambda(hidden, verbalized, times, events, grid=grid)
    assert lam in grid
    ref = brute_force_lambda(hidden, verbalized, times, events, grid)
    assert (lam, score) == ref
    with pytest.raises(ValueError):
        select_lambda(hidden, verbalized, times, events, grid=())
    with pytest.raises(ValueError):
        select_lambda(hidden, verbalized, times, events, grid=(-0.1, 0.5))
    with pytest.raises(ValueError):
        select_lambda(hidden, verbalized, times, events, grid=(0.5, 1.2))


def test_default_grid_shape():
    assert DEFAULT_LAMBDA_GRID[0] == 0.0
    assert DEFAULT_LAMBDA_GRID[-1] == 1.0
    assert len(DEFAULT_LAMBDA_GRID) == 21
    assert all(DEFAULT_LAMBDA_GRID[k] == k / 20 for k in range(21))
