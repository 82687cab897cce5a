"""Synthetic multimodal cohorts with known hazards, plus a simulated teacher."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .cohort import HORIZON_YEARS
from .nn import sigmoid


@dataclass
class GeneratorSpec:
    n: int = 2000
    d_c: int = 8
    d_g: int = 40
    ge_latent: int = 4
    seq_len: int = 12
    d_text: int = 16
    w_text: float = 0.7
    w_cov: float = 0.7
    w_ge: float = 0.7
    base_rate: float = 0.12
    censor_rate: float = 0.04
    ge_noise: float = 0.1
    text_noise: float = 0.5
    event_family: str = "exponential"  # or 'weibull'
    weibull_shape: float = 1.5
    calibration_shift: float = 0.0     # logit-space teacher bias
    response_noise: float = 0.0        # logit-space teacher jitter
    missing_rate: float = 0.0          # per-horizon null responses
    refusal_rate: float = 0.0          # whole-sample non-numeric responses
    horizon: float = HORIZON_YEARS
    seed: int = 0

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("need at least 3 samples")
        if self.base_rate <= 0 or self.censor_rate <= 0:
            raise ValueError("hazard rates must be positive")
        for name in ("missing_rate", "refusal_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.event_family not in ("exponential", "weibull"):
            raise ValueError(f"unknown event family {self.event_family!r}")


def spec_from_kv(kv: dict[str, str]) -> GeneratorSpec:
    """GeneratorSpec from a flat key=value mapping (keys are field names)."""
    kwargs = {}
    fields = GeneratorSpec.__dataclass_fields__
    for key, raw in kv.items():
        if key not in fields:
            raise ValueError(f"unknown generator key {key!r}")
        if key == "event_family":
            kwargs[key] = raw.strip()
        elif "int" in fields[key].type:
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    return GeneratorSpec(**kwargs)


@dataclass
class ExponentialCurve:
    """Exact S(t) = exp(-rate * t); oracle counterpart of the step curves."""

    rate: float

    def at(self, t) -> np.ndarray:
        return np.exp(-self.rate * np.asarray(t, dtype=np.float64))


@dataclass
class WeibullCurve:
    """Exact S(t) = exp(-(rate * t)^shape)."""

    rate: float
    shape: float

    def at(self, t) -> np.ndarray:
        return np.exp(-((self.rate * np.asarray(t, dtype=np.float64)) ** self.shape))


@dataclass
class SynthResult:
    spec: GeneratorSpec
    out_dir: str
    files: dict[str, str]
    ids: list[str]
    rates: np.ndarray                      # lambda_i
    components: dict[str, np.ndarray]      # per-modality risk scalars u_m
    true_s3: np.ndarray = field(default=None)


def _sample_id(i: int) -> str:
    return f"s{i:06d}"


def true_survival(spec: GeneratorSpec, rates: np.ndarray, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if spec.event_family == "weibull":
        return np.exp(-((rates[:, None] * t[None, :]) ** spec.weibull_shape))
    return np.exp(-rates[:, None] * t[None, :])


def _event_times(spec: GeneratorSpec, rates: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    u = rng.random(rates.size)
    if spec.event_family == "weibull":
        return (-np.log(u)) ** (1.0 / spec.weibull_shape) / rates
    return -np.log(u) / rates


def _teacher_rows(spec: GeneratorSpec, ids: list[str], rates: np.ndarray,
                  rng: np.random.Generator) -> list[dict]:
    horizons = (1.0, 3.0, 5.0)
    s_true = true_survival(spec, rates, np.array(horizons))
    rows = []
    for i, sid in enumerate(ids):
        refused = rng.random() < spec.refusal_rate
        responses: dict[str, str | None] = {}
        for k, h in enumerate(horizons):
            key = f"y{int(h)}"
            if refused:
                responses[key] = "I cannot provide an estimate."
                continue
            if rng.random() < spec.missing_rate:
                responses[key] = None
                continue
            p = float(np.clip(s_true[i, k], 1e-6, 1.0 - 1e-6))
            logit = math.log(p / (1.0 - p)) + spec.calibration_shift
            if spec.response_noise > 0:
                logit += spec.response_noise * rng.standard_normal()
            pct = 100.0 * float(sigmoid(np.array(logit)))
            responses[key] = (f"The estimated {int(h)}-year survival "
                              f"probability is: {pct:.1f}%.")
        rows.append({"id": sid, "responses": responses,
                     "explanation": f"Synthetic case summary for {sid}."})
    return rows


def generate(spec: GeneratorSpec, out_dir: str) -> SynthResult:
    """Write a full synthetic cohort in every on-disk interface format.

    Covariates are standard normal with the risk component in column 0; gene
    expression is a noisy linear map of a low-dimensional latent whose first
    coordinate carries risk; token matrices put a shared risk direction in
    every row. lambda_i = base * exp(w_text u_t + w_cov u_c + w_ge u_g).
    """
    os.makedirs(out_dir, exist_ok=True)
    streams = np.random.SeedSequence(spec.seed).spawn(6)
    rng_cov, rng_ge, rng_text, rng_time, rng_cens, rng_teacher = map(
        np.random.default_rng, streams)

    ids = [_sample_id(i) for i in range(spec.n)]

    x_cov = rng_cov.standard_normal((spec.n, spec.d_c))
    u_cov = x_cov[:, 0].copy()

    latent = rng_ge.standard_normal((spec.n, spec.ge_latent))
    mix = rng_ge.standard_normal((spec.ge_latent, spec.d_g)) / np.sqrt(spec.ge_latent)
    x_ge = latent @ mix + spec.ge_noise * rng_ge.standard_normal((spec.n, spec.d_g))
    u_ge = latent[:, 0].copy()

    u_text = rng_text.standard_normal(spec.n)
    direction = rng_text.standard_normal(spec.d_text)
    direction /= np.linalg.norm(direction)
    hidden = {}
    for i, sid in enumerate(ids):
        noise = spec.text_noise * rng_text.standard_normal((spec.seq_len, spec.d_text))
        hidden[sid] = u_text[i] * direction[None, :] + noise

    rates = spec.base_rate * np.exp(spec.w_text * u_text + spec.w_cov * u_cov
                                    + spec.w_ge * u_ge)
    t_event = _event_times(spec, rates, rng_time)
    t_cens = -np.log(rng_cens.random(spec.n)) / spec.censor_rate
    observed = np.minimum(t_event, t_cens)
    event = t_event <= t_cens
    over = observed > spec.horizon
    observed[over] = spec.horizon
    event[over] = False

    files = {}

    def path(name: str) -> str:
        files[name.split(".")[0]] = os.path.join(out_dir, name)
        return files[name.split(".")[0]]

    formats.write_csv_table(
        path("outcomes.csv"), ["id", "time_years", "event"],
        [[sid, formats.format_float(observed[i]), "1" if event[i] else "0"]
         for i, sid in enumerate(ids)])
    formats.write_csv_table(
        path("covariates.csv"), ["id"] + [f"c{j + 1}" for j in range(spec.d_c)],
        [[sid] + [formats.format_float(v) for v in x_cov[i]]
         for i, sid in enumerate(ids)])
    formats.write_csv_table(
        path("ge.csv"), ["id"] + [f"g{j + 1}" for j in range(spec.d_g)],
        [[sid] + [formats.format_float(v) for v in x_ge[i]]
         for i, sid in enumerate(ids)])
    formats.write_hidden_states(path("hidden.svhs"), hidden)
    formats.write_jsonl(path("teacher.jsonl"),
                        _teacher_rows(spec, ids, rates, rng_teacher))
    formats.write_csv_table(
        path("truth.csv"), ["id", "rate", "u_text", "u_cov", "u_ge"],
        [[sid, formats.format_float(rates[i]), formats.format_float(u_text[i]),
          formats.format_float(u_cov[i]), formats.format_float(u_ge[i])]
         for i, sid in enumerate(ids)])

    return SynthResult(spec=spec, out_dir=out_dir, files=files, ids=ids,
                       rates=rates,
                       components={"text": u_text, "cov": u_cov, "ge": u_ge},
                       true_s3=true_survival(spec, rates, np.array([3.0]))[:, 0])


def partial_rates(result: SynthResult, modalities) -> np.ndarray:
    """Hazard rates using only the chosen modalities' risk terms."""
    spec = result.spec
    weights = {"text": spec.w_text, "cov": spec.w_cov, "ge": spec.w_ge}
    score = np.zeros(len(result.ids))
    for m in modalities:
        score += weights[m] * result.components[m]
    return spec.base_rate * np.exp(score)


def oracle_curves(result: SynthResult, indices=None, modalities=None) -> list:
    """Exact per-sample survival curves from the generator's own hazards."""
    rates = result.rates if modalities is None else partial_rates(result, modalities)
    if indices is None:
        indices = range(len(result.ids))
    spec = result.spec
    if spec.event_family == "weibull":
        return [WeibullCurve(rate=float(rates[i]), shape=spec.weibull_shape)
                for i in indices]
    return [ExponentialCurve(rate=float(rates[i])) for i in indices]
