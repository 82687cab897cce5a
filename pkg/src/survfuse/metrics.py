"""Evaluation: time-dependent concordance, integrated Brier score, and the
censoring Kaplan-Meier estimator used for IPCW."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CensoringKM:
    """Product-limit estimate of the censoring survival function G(t)."""

    jump_times: np.ndarray
    values: np.ndarray  # G just after each jump time

    def at(self, t) -> np.ndarray:
        """Right-continuous G(t)."""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.jump_times, t, side="right")
        padded = np.concatenate([[1.0], self.values])
        return padded[idx]

    def at_left(self, t) -> np.ndarray:
        """Left limit G(t-)."""
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.jump_times, t, side="left")
        padded = np.concatenate([[1.0], self.values])
        return padded[idx]


def censoring_km(times, events) -> CensoringKM:
    """Kaplan-Meier with censorings (1 - e) treated as the events."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if times.size == 0:
        raise ValueError("empty outcomes")
    order = np.argsort(times, kind="stable")
    t_sorted = times[order]
    cens_sorted = ~events[order]
    n = times.size
    uniq, start_idx = np.unique(t_sorted, return_index=True)
    jump_times = []
    values = []
    g = 1.0
    for k, tau in enumerate(uniq):
        lo = start_idx[k]
        hi = start_idx[k + 1] if k + 1 < uniq.size else n
        d_cens = int(cens_sorted[lo:hi].sum())
        if d_cens == 0:
            continue
        at_risk = n - lo
        g *= 1.0 - d_cens / at_risk
        jump_times.append(tau)
        values.append(g)
    return CensoringKM(jump_times=np.array(jump_times, dtype=np.float64),
                       values=np.array(values, dtype=np.float64))


def c_td(curves, times, events) -> float:
    """Time-dependent concordance over comparable pairs.

    A pair (i, j) is comparable when t_i < t_j and e_i = 1; it scores 1 when
    S_i(t_i) < S_j(t_i), 0.5 on an exact tie, 0 otherwise.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    n = times.size
    if len(curves) != n:
        raise ValueError("one curve per outcome required")
    # S_k(t_i) for every curve k at every event subject's own time
    event_idx = np.flatnonzero(events)
    if event_idx.size == 0:
        raise ValueError("no comparable pairs (no events)")
    eval_times = times[event_idx]
    preds = np.empty((n, event_idx.size), dtype=np.float64)
    for k, curve in enumerate(curves):
        preds[k, :] = curve.at(eval_times)
    num = 0.0
    pairs = 0
    for col, i in enumerate(event_idx):
        comparable = times > times[i]
        if not comparable.any():
            continue
        s_i = preds[i, col]
        s_j = preds[comparable, col]
        num += float((s_i < s_j).sum()) + 0.5 * float((s_i == s_j).sum())
        pairs += int(comparable.sum())
    if pairs == 0:
        raise ValueError("no comparable pairs")
    return num / pairs


@dataclass
class IbsResult:
    value: float
    dropped_terms: int

    def __float__(self) -> float:
        return self.value


def ibs(curves, times, events, grid_points: int = 512) -> IbsResult:
    """Integrated Brier score with IPCW, composite-midpoint integration.

    At each t the score averages S(t|x_i)^2 / G(t_i-) over subjects with an
    observed event by t, plus (1 - S(t|x_i))^2 / G(t) over subjects still
    under observation after t; the integral over [0, t_max] is normalized by
    t_max. Terms whose IPCW denominator is zero are dropped and counted.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    n = times.size
    if len(curves) != n:
        raise ValueError("one curve per outcome required")
    if grid_points < 1:
        raise ValueError("grid_points must be positive")
    t_max = float(times.max())
    if t_max <= 0:
        raise ValueError("non-positive time horizon")
    km = censoring_km(times, events)
    g_left = km.at_left(times)

    width = t_max / grid_points
    mids = (np.arange(grid_points) + 0.5) * width
    surv = np.empty((n, grid_points), dtype=np.float64)
    for k, curve in enumerate(curves):
        surv[k, :] = curve.at(mids)

    g_mid = km.at(mids)
    had_event = events[:, None] & (times[:, None] <= mids[None, :])
    still_at_risk = times[:, None] > mids[None, :]

    event_ok = g_left > 0.0
    event_term = np.where(had_event & event_ok[:, None],
                          surv ** 2 / np.where(event_ok, g_left, 1.0)[:, None], 0.0)
    risk_ok = g_mid > 0.0
    risk_term = np.where(still_at_risk & risk_ok[None, :],
                         (1.0 - surv) ** 2 / np.where(risk_ok, g_mid, 1.0)[None, :], 0.0)

    dropped = int((had_event & ~event_ok[:, None]).sum()
                  + (still_at_risk & ~risk_ok[None, :]).sum())
    per_t = (event_term + risk_term).mean(axis=0)
    value = float(per_t.sum() * width / t_max)
    return IbsResult(value=value, dropped_terms=dropped)
