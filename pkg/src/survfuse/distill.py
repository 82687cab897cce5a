"""Teacher response parsing, parametric curve fitting, target sequences,
and the span-weighted text loss with optional calibration masking."""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

VPROB_OPEN = "«VPROB»"
VPROB_CLOSE = "«END_VPROB»"
S_FLOOR = 1e-6
HORIZONS = (1.0, 3.0, 5.0)

# a number, optionally followed by whitespace and a percent sign
_NUMBER_RE = re.compile(r"(\d+(?:\.\d+)?|\.\d+)(\s*%)?")


@dataclass
class TeacherRecord:
    """One teacher response set for one sample, parsed incrementally."""

    sample_id: str
    responses: dict[str, str | None]
    explanation: str
    probs: dict[float, float | None] = field(default_factory=dict)
    completed: tuple[float, float, float] | None = None
    rate: float | None = None
    percent: int | None = None

    def any_extracted(self) -> bool:
        return any(p is not None for p in self.probs.values())


@dataclass
class TargetSequence:
    """Student target string with byte spans into its UTF-8 encoding."""

    target: str
    vprob_span: tuple[int, int]
    num_span: tuple[int, int]


@dataclass
class ParametricFit:
    family: str
    rate: float | None = None
    shape: float | None = None
    scale: float | None = None


def extract_probability(text: str | None) -> float | None:
    """Pull a survival probability out of free text, scaled to [0, 1].

    Precedence: last number attached to '%' with value in [0, 100]; else last
    bare value in [0, 1] read as a probability; else last bare value in
    (1, 100] read as a percent. None when nothing matches.
    """
    if not text:
        return None
    pct_vals: list[float] = []
    bare_vals: list[float] = []
    for m in _NUMBER_RE.finditer(text):
        v = float(m.group(1))
        if m.group(2):
            if 0.0 <= v <= 100.0:
                pct_vals.append(v)
        else:
            bare_vals.append(v)
    if pct_vals:
        return pct_vals[-1] / 100.0
    in_unit = [v for v in bare_vals if 0.0 <= v <= 1.0]
    if in_unit:
        return in_unit[-1]
    in_pct = [v for v in bare_vals if 1.0 < v <= 100.0]
    if in_pct:
        return in_pct[-1] / 100.0
    return None


def fit_parametric(points: list[tuple[float, float]], family: str = "exponential") -> ParametricFit:
    """Fit a survival family to (t, S) points by the linearizing regression.

    exponential: rho = sum t * (-ln S) / sum t^2 (least squares through origin)
    weibull:     ln(-ln S) on ln t -> slope = shape, scale = exp(-intercept/shape)
    loglogistic: ln((1-S)/S) on ln t -> slope = shape, scale = exp(-intercept/shape)
    """
    if not points:
        raise ValueError("no points to fit")
    t = np.array([p[0] for p in points], dtype=np.float64)
    s = np.array([p[1] for p in points], dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("fit times must be positive")
    if np.any(s > 1.0) or np.any(s < 0.0):
        raise ValueError("survival values must lie in [0, 1]")
    if np.any(s == 0.0):
        warnings.warn("survival value 0 clamped for log transform", stacklevel=2)
        s = np.maximum(s, S_FLOOR)

    if family == "exponential":
        rho = float(t @ (-np.log(s)) / (t @ t))
        return ParametricFit(family="exponential", rate=rho)

    if family not in ("weibull", "loglogistic"):
        raise ValueError(f"unknown family {family!r}")
    if np.unique(t).size < 2:
        raise ValueError("two-parameter families need at least two distinct times")
    if np.any(s == 1.0):
        warnings.warn("survival value 1 clamped for log transform", stacklevel=2)
        s = np.minimum(s, 1.0 - 1e-12)
    x = np.log(t)
    if family == "weibull":
        y = np.log(-np.log(s))
    else:
        y = np.log((1.0 - s) / s)
    slope, intercept = np.polyfit(x, y, 1)
    if slope <= 0:
        raise ValueError(f"non-positive fitted shape {slope}")
    return ParametricFit(family=family, shape=float(slope),
                         scale=float(math.exp(-intercept / slope)))


def fit_survival_at(fit: ParametricFit, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if fit.family == "exponential":
        return np.exp(-fit.rate * t)
    if fit.family == "weibull":
        return np.exp(-((t / fit.scale) ** fit.shape))
    if fit.family == "loglogistic":
        return 1.0 / (1.0 + (t / fit.scale) ** fit.shape)
    raise ValueError(f"unknown family {fit.family!r}")


def horizon_means(prob_rows: list[dict[float, float | None]]) -> dict[float, float]:
    """Per-horizon means of the extracted probabilities (training split)."""
    means: dict[float, float] = {}
    for h in HORIZONS:
        vals = [row[h] for row in prob_rows if row.get(h) is not None]
        if not vals:
            raise ValueError(f"no extracted probability at horizon {h} anywhere in the split")
        means[h] = float(np.mean(vals))
    return means


def complete_horizons(probs: dict[float, float | None],
                      means: dict[float, float]) -> tuple[float, float, float]:
    """Fill missing horizon probabilities.

    With at least one extraction, refit an exponential through the present
    points and evaluate it at the missing horizons; with none, fall back to
    the per-horizon training means. Result clipped to [0, 1] and made
    non-increasing in t.
    """
    present = [(h, probs[h]) for h in HORIZONS if probs.get(h) is not None]
    if present:
        fit = fit_parametric(present, "exponential")
        out = [probs[h] if probs.get(h) is not None else float(fit_survival_at(fit, h))
               for h in HORIZONS]
    else:
        out = [means[h] for h in HORIZONS]
    clipped = np.clip(np.array(out, dtype=np.float64), 0.0, 1.0)
    return tuple(np.minimum.accumulate(clipped).tolist())


def round_to_nearest_five(x: float) -> int:
    """Nearest multiple of 5, ties away from zero."""
    if x < 0:
        return -round_to_nearest_five(-x)
    return 5 * math.floor(x / 5.0 + 0.5)


def three_year_percent(fit: ParametricFit) -> int:
    return round_to_nearest_five(float(fit_survival_at(fit, 3.0)) * 100.0)


def build_target_sequence(explanation: str, percent: int) -> TargetSequence:
    """Render the student target and record byte spans (UTF-8 offsets).

    The vprob span covers the delimited region including both delimiters;
    the numeric span covers exactly the percent digits.
    """
    if not (0 <= percent <= 100):
        raise ValueError(f"percent {percent} outside [0, 100]")
    if VPROB_OPEN in explanation or VPROB_CLOSE in explanation:
        raise ValueError("explanation contains a reserved delimiter")
    number = str(int(percent))
    prefix = f"{explanation} "
    sentence = (f"{VPROB_OPEN}\n\n The estimated 3-year survival probability "
                f"is: {number}%. {VPROB_CLOSE}")
    target = prefix + sentence
    vprob_start = len(prefix.encode("utf-8"))
    vprob_end = len(target.encode("utf-8"))
    num_start = vprob_end - len(f"{number}%. {VPROB_CLOSE}".encode("utf-8"))
    num_end = num_start + len(number.encode("utf-8"))
    return TargetSequence(target=target, vprob_span=(vprob_start, vprob_end),
                          num_span=(num_start, num_end))


def token_masks(seq: TargetSequence,
                token_offsets: list[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks per token: overlap with the vprob span / the numeric span.

    Offsets are byte ranges [start, end) in the same convention as the spans;
    they must be monotone and non-overlapping (gaps are fine).
    """
    prev_end = 0
    for start, end in token_offsets:
        if start < prev_end or end < start:
            raise ValueError("token offsets must be monotone and non-overlapping")
        prev_end = end
    starts = np.array([s for s, _ in token_offsets], dtype=np.int64)
    ends = np.array([e for _, e in token_offsets], dtype=np.int64)

    def overlaps(span: tuple[int, int]) -> np.ndarray:
        return (starts < span[1]) & (ends > span[0])

    return overlaps(seq.vprob_span), overlaps(seq.num_span)


def weighted_text_loss(token_nlls, vprob_mask, num_mask,
                       w: float = 2.0, w_num: float = 5.0) -> float:
    loss, _ = weighted_text_loss_grad(token_nlls, vprob_mask, num_mask, w, w_num)
    return loss


def weighted_text_loss_grad(token_nlls, vprob_mask, num_mask,
                            w: float = 2.0, w_num: float = 5.0) -> tuple[float, np.ndarray]:
    """Span-weighted mean NLL over the target tokens.

    Per-token weights: 1 outside the vprob span, w inside it, w + w_num - 1
    on numeric tokens; every sub-loss shares the full token count as its
    denominator.
    """
    nll = np.asarray(token_nlls, dtype=np.float64)
    if nll.size == 0:
        raise ValueError("empty token sequence")
    vprob_mask = np.asarray(vprob_mask, dtype=bool)
    num_mask = np.asarray(num_mask, dtype=bool)
    if vprob_mask.shape != nll.shape or num_mask.shape != nll.shape:
        raise ValueError("mask shapes must match the token sequence")
    weights = np.ones_like(nll)
    weights[vprob_mask] = w
    weights[num_mask] = w + w_num - 1.0
    grad = weights / nll.size
    return float(grad @ nll), grad


def calibration_mask(percent: float, time: float, event: bool,
                     horizon: float = 3.0, threshold: float = 50.0) -> bool:
    """Whether a sample's text loss stays in the objective.

    Excluded when the verbalized probability contradicts a known outcome:
    event before the horizon with percent above threshold, or known
    alive/at-risk at the horizon with percent below it. Censoring before the
    horizon is unknowable, so those samples stay in. Exactly-threshold
    percents always stay in.
    """
    if event and time < horizon and percent > threshold:
        return False
    if time >= horizon and percent < threshold:
        return False
    return True


def parse_teacher_file(rows: list[dict]) -> list[TeacherRecord]:
    """Build records from teacher JSONL rows, running probability extraction."""
    records = []
    seen: set[str] = set()
    for row in rows:
        sid = row["id"]
        if sid in seen:
            raise ValueError(f"duplicate teacher record for id {sid!r}")
        seen.add(sid)
        responses = row.get("responses", {})
        rec = TeacherRecord(sample_id=sid, responses=responses,
                            explanation=row.get("explanation", ""))
        for key, h in (("y1", 1.0), ("y3", 3.0), ("y5", 5.0)):
            rec.probs[h] = extract_probability(responses.get(key))
        records.append(rec)
    return records


def finalize_records(records: list[TeacherRecord],
                     train_ids: set[str] | None = None) -> None:
    """Complete horizons, refit, and round each record's 3-year percent.

    Horizon means for the all-missing fallback come from the training split
    when `train_ids` is given, else from every record with an extraction.
    """
    # the means are only defined (and only needed) when some record has no
    # extraction at all; a fully extracting file must not require coverage
    means: dict[float, float] = {}
    if any(not r.any_extracted() for r in records):
        pool = [r.probs for r in records
                if (train_ids is None or r.sample_id in train_ids) and r.any_extracted()]
        if not pool:
            pool = [r.probs for r in records if r.any_extracted()]
        means = horizon_means(pool)
    for rec in records:
        rec.completed = complete_horizons(rec.probs, means)
        fit = fit_parametric(list(zip(HORIZONS, rec.completed)), "exponential")
        rec.rate = fit.rate
        rec.percent = three_year_percent(fit)


def target_rows(records: list[TeacherRecord], outcomes: dict[str, tuple[float, bool]],
                correction: bool = True) -> list[dict]:
    """JSONL rows for the student targets, with spans and the text-loss flag."""
    rows = []
    for rec in records:
        if rec.percent is None:
            raise ValueError(f"record {rec.sample_id!r} not finalized")
        seq = build_target_sequence(rec.explanation, rec.percent)
        included = True
        if correction and rec.sample_id in outcomes:
            t, e = outcomes[rec.sample_id]
            included = calibration_mask(rec.percent, t, e)
        rows.append({
            "id": rec.sample_id,
            "target": seq.target,
            "vprob_span": list(seq.vprob_span),
            "num_span": list(seq.num_span),
            "text_loss_included": included,
        })
    return rows
