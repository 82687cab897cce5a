"""Survival heads: discrete-time hazards and Cox partial likelihood.

Target construction, losses with exact gradients, Breslow baseline hazards,
and step-function survival curves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import sigmoid

PROB_CLIP = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Bin edges 0 = t_0 < t_1 < ... < t_B (years)."""

    edges: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        object.__setattr__(self, "edges", edges)
        if edges.ndim != 1 or edges.size < 2:
            raise ValueError("grid needs at least one bin")
        if edges[0] != 0.0:
            raise ValueError("grid must start at 0")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("grid edges must be strictly increasing")

    @property
    def n_bins(self) -> int:
        return self.edges.size - 1

    @classmethod
    def equal_width(cls, n_bins: int, horizon: float) -> "TimeGrid":
        return cls(np.linspace(0.0, float(horizon), n_bins + 1))

    @classmethod
    def from_quantiles(cls, times, n_bins: int, horizon: float) -> "TimeGrid":
        """Edges at observed-time quantiles, deduplicated, always ending at `horizon`."""
        qs = np.quantile(np.asarray(times, dtype=np.float64), np.linspace(0, 1, n_bins + 1))
        edges = np.unique(np.concatenate([[0.0], qs[1:-1], [float(horizon)]]))
        return cls(edges[edges <= horizon])


@dataclass
class DiscreteTargets:
    """Per-subject event indicators `y` and at-risk masks `a`, both (N, B)."""

    y: np.ndarray
    a: np.ndarray


@dataclass
class SurvivalCurve:
    """Right-continuous step function with S(0) = 1, non-increasing, in [0, 1]."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if times.shape != values.shape or times.ndim != 1:
            raise ValueError("times and values must be 1-D and the same length")
        if times[0] != 0.0 or values[0] != 1.0:
            raise ValueError("curve must start at (0, 1)")
        if np.any(np.diff(times) <= 0):
            raise ValueError("curve times must be strictly increasing")
        if np.any(np.diff(values) > 1e-12):
            raise ValueError("survival values must be non-increasing")
        if values.min() < -1e-12 or values.max() > 1.0 + 1e-12:
            raise ValueError("survival values must lie in [0, 1]")
        self.times = times
        # flatten sub-tolerance numerical bumps so the invariant holds exactly
        self.values = np.minimum.accumulate(np.clip(values, 0.0, 1.0))

    def at(self, t) -> np.ndarray:
        """Evaluate at time(s) t: value held from the preceding step."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0):
            raise ValueError("curves are defined for t >= 0")
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self.values[idx]


def build_discrete_targets(times, events, grid: TimeGrid) -> DiscreteTargets:
    """Event and at-risk indicator matrices for the masked Bernoulli objective.

    y[i, b] = 1 iff subject i has an event in (t_{b-1}, t_b]; a[i, b] = 1 iff
    the subject is still at risk at the start of bin b (observed time strictly
    past the bin's left edge). A subject censored exactly at an edge counts as
    at risk for the bin that ends there, not the next one.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if np.any(times > grid.edges[-1]):
        bad = float(times.max())
        raise ValueError(f"observed time {bad} lies outside the grid (t_B = {grid.edges[-1]})")
    lower = grid.edges[:-1][None, :]
    upper = grid.edges[1:][None, :]
    t_col = times[:, None]
    in_bin = (t_col > lower) & (t_col <= upper)
    y = (in_bin & events[:, None]).astype(np.float64)
    a = (t_col > lower).astype(np.float64)
    return DiscreteTargets(y=y, a=a)


def discrete_loss(logits: np.ndarray, targets: DiscreteTargets) -> float:
    """At-risk-masked mean binary cross-entropy of per-bin hazards."""
    loss, _ = discrete_loss_grad(logits, targets)
    return loss


def discrete_loss_grad(logits: np.ndarray, targets: DiscreteTargets) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    y, a = targets.y, targets.a
    if logits.shape != y.shape:
        raise ValueError(f"logits shape {logits.shape} does not match targets {y.shape}")
    total_at_risk = a.sum()
    if total_at_risk == 0:
        raise ValueError("all-zero at-risk mask")
    h = sigmoid(logits)
    h_clipped = np.clip(h, PROB_CLIP, 1.0 - PROB_CLIP)
    bce = -(y * np.log(h_clipped) + (1.0 - y) * np.log1p(-h_clipped))
    loss = float((a * bce).sum() / total_at_risk)
    grad = a * (h - y) / total_at_risk
    return loss, grad


def discrete_curve(logits: np.ndarray, grid: TimeGrid) -> SurvivalCurve:
    """Survival step curve from per-bin hazard logits: S(t_b) = prod_{k<=b}(1 - h_k)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (grid.n_bins,):
        raise ValueError(f"expected {grid.n_bins} logits, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    surv = np.cumprod(1.0 - sigmoid(logits))
    return SurvivalCurve(times=grid.edges, values=np.concatenate([[1.0], surv]))


def _event_time_groups(times: np.ndarray, events: np.ndarray,
                       scores: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct event times with event counts and log risk-set sums.

    Returns (event_times ascending, d_k, log sum_{t_j >= tau_k} exp(g_j)),
    computed with a running log-sum-exp over times sorted descending.
    """
    order = np.argsort(-times, kind="stable")
    t_sorted = times[order]
    g_sorted = scores[order]
    # running logsumexp of scores over the risk set {j: t_j >= tau}
    running = np.empty_like(g_sorted)
    acc_max = -np.inf
    acc_sum = 0.0
    for k in range(g_sorted.size):
        g = g_sorted[k]
        if g > acc_max:
            acc_sum = acc_sum * np.exp(acc_max - g) if np.isfinite(acc_max) else 0.0
            acc_max = g
        acc_sum += np.exp(g - acc_max)
        running[k] = acc_max + np.log(acc_sum)
    event_times = np.unique(times[events])
    d = np.zeros(event_times.size)
    log_risk = np.zeros(event_times.size)
    for i, tau in enumerate(event_times):
        d[i] = np.count_nonzero((times == tau) & events)
        # last position in the descending order whose time is still >= tau
        k = np.searchsorted(-t_sorted, -tau, side="right") - 1
        log_risk[i] = running[k]
    return event_times, d, log_risk


def cox_loss(scores, times, events) -> float:
    """Negative partial log-likelihood, averaged over events (Breslow ties)."""
    loss, _ = cox_loss_grad(scores, times, events)
    return loss


def cox_loss_grad(scores, times, events) -> tuple[float, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    n_events = int(events.sum())
    if n_events == 0:
        raise ValueError("partial likelihood undefined with zero events")
    event_times, d, log_risk = _event_time_groups(times, events, scores)
    loss = -(scores[events].sum() - float(d @ log_risk)) / n_events
    # dL/dg_k = -(1/D) * (e_k - exp(g_k) * sum_{event times tau <= t_k} d_tau / Z_tau)
    inv_risk = d * np.exp(-log_risk)
    cum_inv = np.cumsum(inv_risk)
    pos = np.searchsorted(event_times, times, side="right")
    coverage = np.where(pos > 0, cum_inv[np.maximum(pos - 1, 0)], 0.0)
    grad = -(events.astype(np.float64) - np.exp(scores) * coverage) / n_events
    return float(loss), grad


@dataclass
class BreslowBaseline:
    """Cumulative baseline hazard increments at distinct event times."""

    event_times: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        self.event_times = np.asarray(self.event_times, dtype=np.float64)
        self.increments = np.asarray(self.increments, dtype=np.float64)
        if np.any(self.increments < 0):
            raise ValueError("baseline hazard increments must be non-negative")

    def cumulative_hazard(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.event_times, t, side="right")
        cum = np.concatenate([[0.0], np.cumsum(self.increments)])
        return cum[idx]


def breslow_baseline(scores, times, events) -> BreslowBaseline:
    """Baseline hazard increment d_k / sum_{t_j >= tau_k} exp(g_j) at each event time.

    Risk sums run in linear space after subtracting the score maximum, so
    all-zero scores reduce to exact d_k / n_k increments.
    """
    scores = np.asarray(scores, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if not events.any():
        raise ValueError("baseline hazard undefined with zero events")
    m = scores.max()
    order = np.argsort(-times, kind="stable")
    t_desc = times[order]
    risk_cum = np.cumsum(np.exp(scores[order] - m))
    event_times = np.unique(times[events])
    d = np.array([np.count_nonzero((times == tau) & events) for tau in event_times])
    # last descending position whose time is still >= tau
    k = np.searchsorted(-t_desc, -event_times, side="right") - 1
    increments = d * np.exp(-m) / risk_cum[k]
    return BreslowBaseline(event_times=event_times, increments=increments)


def cox_curve(score: float, baseline: BreslowBaseline) -> SurvivalCurve:
    """Per-subject curve S(t) = exp(-H0(t) * exp(g)) on the baseline's event times."""
    if baseline.event_times.size == 0:
        raise ValueError("empty baseline")
    cum = np.cumsum(baseline.increments)
    values = np.exp(-cum * np.exp(float(score)))
    times = baseline.event_times
    if times[0] == 0.0:
        raise ValueError("baseline event times must be positive")
    return SurvivalCurve(times=np.concatenate([[0.0], times]),
                         values=np.concatenate([[1.0], values]))
