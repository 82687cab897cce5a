"""Verbalized-probability curves and convex blending with hidden-state curves."""

from __future__ import annotations

import warnings

import numpy as np

from .heads import SurvivalCurve
from .metrics import c_td

PERCENT_FLOOR = 0.5
DEFAULT_LAMBDA_GRID = tuple(k / 20.0 for k in range(21))


def verbalized_curve(percent: float, times) -> SurvivalCurve:
    """Exponential curve anchored at the 3-year verbalized probability.

    rho = -ln(percent/100)/3, sampled at `times` (which must start at 0).
    percent 0 is floored to 0.5 before the log, with a warning.
    """
    if not (0 <= percent <= 100):
        raise ValueError(f"percent {percent} outside [0, 100]")
    if percent == 0:
        warnings.warn("verbalized probability 0 floored to 0.5% before the log",
                      stacklevel=2)
        percent = PERCENT_FLOOR
    rho = -np.log(percent / 100.0) / 3.0
    times = np.asarray(times, dtype=np.float64)
    return SurvivalCurve(times=times, values=np.exp(-rho * times))


def combine(hidden: SurvivalCurve, verbalized: SurvivalCurve, lam: float) -> SurvivalCurve:
    """Pointwise convex combination (1 - lam) * S + lam * S^v on a shared grid."""
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"lambda {lam} outside [0, 1]")
    if hidden.times.shape != verbalized.times.shape or np.any(hidden.times != verbalized.times):
        raise ValueError("curves must share evaluation times")
    values = (1.0 - lam) * hidden.values + lam * verbalized.values
    return SurvivalCurve(times=hidden.times.copy(), values=values)


def mean_curve(curves: list[SurvivalCurve]) -> SurvivalCurve:
    """Pointwise mean of curves on a shared grid (imputation for absent S^v)."""
    if not curves:
        raise ValueError("no curves to average")
    times = curves[0].times
    for c in curves[1:]:
        if c.times.shape != times.shape or np.any(c.times != times):
            raise ValueError("curves must share evaluation times")
    values = np.mean([c.values for c in curves], axis=0)
    return SurvivalCurve(times=times.copy(), values=values)


def handle_missing(hidden: SurvivalCurve, verbalized: SurvivalCurve | None,
                   cohort_mean: SurvivalCurve | None) -> tuple[SurvivalCurve, SurvivalCurve | None]:
    """Resolve an absent verbalized curve for the two evaluation paths.

    Returns (curve to blend with, curve for verbalized-only evaluation). The
    combined path falls back to the hidden curve itself (so the blend is a
    no-op); the verbalized path falls back to the cohort mean curve, or None
    when no sample had an extractable probability.
    """
    if verbalized is not None:
        return verbalized, verbalized
    return hidden, cohort_mean


def select_lambda(hidden_curves: list[SurvivalCurve],
                  verbalized_curves: list[SurvivalCurve],
                  times, events,
                  grid=DEFAULT_LAMBDA_GRID) -> tuple[float, float]:
    """Concordance-maximizing lambda over the grid; ties go to the smallest.

    Missing verbalized curves must already be resolved (handle_missing).
    Returns (lambda*, its validation concordance).
    """
    grid = sorted(float(g) for g in grid)
    if not grid or grid[0] < 0 or grid[-1] > 1:
        raise ValueError("lambda grid must lie in [0, 1]")
    best_lam = None
    best_score = -np.inf
    for lam in grid:
        combined = [combine(h, v, lam)
                    for h, v in zip(hidden_curves, verbalized_curves, strict=True)]
        score = c_td(combined, times, events)
        if score > best_score:
            best_score = score
            best_lam = lam
    return best_lam, float(best_score)
