"""Cohort loading, validation, covariate preprocessing, and splitting."""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .distill import TeacherRecord, parse_teacher_file

HORIZON_YEARS = 5.0

CANCER_FAMILIES = ("gastrointestinal", "gynecological", "genitourinary",
                   "respiratory", "skin", "brain", "other")

# best-effort TCGA project-code mapping; direct family names always work
_FAMILY_BY_CODE = {
    "COAD": "gastrointestinal", "READ": "gastrointestinal", "STAD": "gastrointestinal",
    "ESCA": "gastrointestinal", "LIHC": "gastrointestinal", "PAAD": "gastrointestinal",
    "CHOL": "gastrointestinal",
    "OV": "gynecological", "UCEC": "gynecological", "CESC": "gynecological",
    "UCS": "gynecological",
    "BLCA": "genitourinary", "KIRC": "genitourinary", "KIRP": "genitourinary",
    "KICH": "genitourinary", "PRAD": "genitourinary", "TGCT": "genitourinary",
    "LUAD": "respiratory", "LUSC": "respiratory", "MESO": "respiratory",
    "SKCM": "skin",
    "GBM": "brain", "LGG": "brain",
}

_STAGE_CODES = {"I": 1.0, "II": 2.0, "III": 3.0, "IV": 4.0,
                "1": 1.0, "2": 2.0, "3": 3.0, "4": 4.0}

CLINICAL_FIELDS = ("age", "sex", "race", "stage", "cancer_type")


@dataclass
class Outcome:
    time: float
    event: bool

    def __post_init__(self):
        self.time = float(self.time)
        self.event = bool(self.event)
        if not (self.time > 0):
            raise ValueError(f"follow-up time must be positive, got {self.time}")


@dataclass
class Sample:
    sample_id: str
    outcome: Outcome
    cov: np.ndarray | None = None
    ge: np.ndarray | None = None
    text_hidden: np.ndarray | None = None
    text_pooled: np.ndarray | None = None
    teacher: TeacherRecord | None = None
    raw_cov: dict[str, str] | None = None


@dataclass
class CohortSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def as_dict(self) -> dict[str, list[int]]:
        return {"train": self.train.tolist(), "val": self.val.tolist(),
                "test": self.test.tolist()}


@dataclass
class Cohort:
    samples: list[Sample]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def index_of(self) -> dict[str, int]:
        return {s.sample_id: i for i, s in enumerate(self.samples)}


def administrative_censor(outcome: Outcome, horizon_years: float = HORIZON_YEARS) -> Outcome:
    if outcome.time > horizon_years:
        return Outcome(time=horizon_years, event=False)
    return outcome


def _parse_outcomes(path: str) -> dict[str, Outcome]:
    header, rows = formats.read_csv_table(path)
    for col in ("id", "time_years", "event"):
        if col not in header:
            raise ValueError(f"outcomes file missing column {col!r}")
    out: dict[str, Outcome] = {}
    for lineno, row in enumerate(rows, start=2):
        sid = row["id"]
        if sid in out:
            raise ValueError(f"duplicate outcome id {sid!r} (line {lineno})")
        try:
            time = float(row["time_years"])
            event_raw = row["event"].strip()
            if event_raw not in ("0", "1"):
                raise ValueError(f"event must be 0 or 1, got {event_raw!r}")
            out[sid] = Outcome(time=time, event=event_raw == "1")
        except ValueError as exc:
            raise ValueError(f"outcomes row for id {sid!r} (line {lineno}): {exc}") from exc
    if not out:
        raise ValueError(f"no outcome rows in {path}")
    return out


def _parse_numeric_table(path: str, missing_to_zero: bool) -> dict[str, np.ndarray]:
    header, rows = formats.read_csv_table(path)
    if not header or header[0] != "id":
        raise ValueError(f"{path}: first column must be 'id'")
    width = len(header) - 1
    out: dict[str, np.ndarray] = {}
    for lineno, row in enumerate(rows, start=2):
        sid = row["id"]
        if sid in out:
            raise ValueError(f"duplicate id {sid!r} in {path} (line {lineno})")
        vec = np.empty(width, dtype=np.float64)
        for j, col in enumerate(header[1:]):
            cell = row[col].strip()
            if cell == "":
                if missing_to_zero:
                    vec[j] = 0.0
                    continue
                raise ValueError(f"{path} id {sid!r} (line {lineno}): empty cell in {col!r}")
            try:
                vec[j] = float(cell)
            except ValueError as exc:
                raise ValueError(f"{path} id {sid!r} (line {lineno}): {exc}") from exc
        out[sid] = vec
    return out


def _parse_clinical_table(path: str) -> tuple[dict[str, dict[str, str]], set[str]]:
    """Raw clinical rows keyed by id, plus ids excluded for missing fields."""
    header, rows = formats.read_csv_table(path)
    for col in ("id",) + CLINICAL_FIELDS:
        if col not in header:
            raise ValueError(f"covariates file missing column {col!r}")
    out: dict[str, dict[str, str]] = {}
    excluded: set[str] = set()
    for lineno, row in enumerate(rows, start=2):
        sid = row["id"]
        if sid in out or sid in excluded:
            raise ValueError(f"duplicate covariate id {sid!r} (line {lineno})")
        if any(row[c].strip() == "" for c in CLINICAL_FIELDS):
            excluded.add(sid)
            continue
        out[sid] = {c: row[c].strip() for c in CLINICAL_FIELDS}
    return out, excluded


def cancer_family(label: str, allow_other: bool = True) -> str:
    norm = label.strip().lower()
    if norm in CANCER_FAMILIES:
        return norm
    mapped = _FAMILY_BY_CODE.get(label.strip().upper())
    if mapped is not None:
        return mapped
    if allow_other:
        return "other"
    raise ValueError(f"unknown cancer type {label!r}")


def _stage_code(label: str) -> float:
    norm = label.strip().upper().removeprefix("STAGE").strip()
    if norm not in _STAGE_CODES:
        raise ValueError(f"unknown stage label {label!r}")
    return _STAGE_CODES[norm]


def load_cohort(outcomes_path: str,
                covariates_path: str | None = None,
                ge_path: str | None = None,
                hidden_states_path: str | None = None,
                pooled_path: str | None = None,
                teacher_path: str | None = None,
                schema: str = "numeric",
                horizon_years: float | None = HORIZON_YEARS,
                allow_other_family: bool = True) -> Cohort:
    """Assemble one Sample per outcome row, attaching whatever modalities exist.

    schema 'numeric' reads covariates as ready numeric vectors; 'clinical'
    keeps raw text fields for preprocess_covariates (which needs the training
    split). Administrative censoring at `horizon_years` unless None.
    """
    if schema not in ("numeric", "clinical"):
        raise ValueError(f"unknown schema {schema!r}")
    outcomes = _parse_outcomes(outcomes_path)

    cov_numeric: dict[str, np.ndarray] = {}
    cov_raw: dict[str, dict[str, str]] = {}
    excluded: set[str] = set()
    if covariates_path is not None:
        if schema == "numeric":
            cov_numeric = _parse_numeric_table(covariates_path, missing_to_zero=False)
        else:
            cov_raw, excluded = _parse_clinical_table(covariates_path)
    ge = _parse_numeric_table(ge_path, missing_to_zero=True) if ge_path else {}
    hidden = formats.read_hidden_states(hidden_states_path) if hidden_states_path else {}
    pooled = formats.read_pooled(pooled_path) if pooled_path else {}
    teacher: dict[str, TeacherRecord] = {}
    if teacher_path is not None:
        for rec in parse_teacher_file(formats.read_jsonl(teacher_path)):
            teacher[rec.sample_id] = rec

    for name, table in (("covariates", cov_numeric), ("gene expression", ge),
                        ("hidden states", hidden), ("pooled vectors", pooled)):
        widths = {v.shape[-1] for v in table.values()}
        if len(widths) > 1:
            raise ValueError(f"inconsistent {name} dimensions: {sorted(widths)}")

    samples = []
    for sid, outcome in outcomes.items():
        if sid in excluded:
            continue
        if horizon_years is not None:
            outcome = administrative_censor(outcome, horizon_years)
        samples.append(Sample(
            sample_id=sid,
            outcome=outcome,
            cov=cov_numeric.get(sid),
            ge=ge.get(sid),
            text_hidden=hidden.get(sid),
            text_pooled=pooled.get(sid),
            teacher=teacher.get(sid),
            raw_cov=cov_raw.get(sid),
        ))
    meta = {"schema": schema, "n_samples": len(samples),
            "excluded_missing_critical": len(excluded),
            "horizon_years": horizon_years,
            "allow_other_family": allow_other_family}
    return Cohort(samples=samples, metadata=meta)


def preprocess_covariates(cohort: Cohort, train_indices) -> dict:
    """Turn raw clinical fields into numeric vectors, scaling with train stats.

    Layout: [age, sex, race, stage, 7-way cancer-family one-hot]. Age and
    stage are min-max scaled with training extrema (test values may leave
    [0,1]; not clipped). Sex and race become majority-vs-other indicators,
    majority taken over the training split, ties to the lexicographically
    smallest label. Returns the metadata describing the encoding.
    """
    train_indices = np.asarray(train_indices, dtype=np.int64)
    train_rows = [cohort.samples[i].raw_cov for i in train_indices
                  if cohort.samples[i].raw_cov is not None]
    if not train_rows:
        raise ValueError("no raw clinical rows in the training split")

    ages = np.array([float(r["age"]) for r in train_rows])
    stages = np.array([_stage_code(r["stage"]) for r in train_rows])

    def majority(field_name: str) -> str:
        values = sorted(r[field_name] for r in train_rows)
        uniq, counts = np.unique(values, return_counts=True)
        return str(uniq[np.argmax(counts)])  # ties: first = lexicographic smallest

    sex_ref = majority("sex")
    race_ref = majority("race")
    stats = {
        "age_min": float(ages.min()), "age_max": float(ages.max()),
        "stage_min": float(stages.min()), "stage_max": float(stages.max()),
        "sex_majority": sex_ref, "race_majority": race_ref,
    }

    def scale(x: float, lo: float, hi: float) -> float:
        if hi == lo:
            return 0.0
        return (x - lo) / (hi - lo)

    allow_other = bool(cohort.metadata.get("allow_other_family", True))
    for sample in cohort.samples:
        raw = sample.raw_cov
        if raw is None:
            continue
        fam = cancer_family(raw["cancer_type"], allow_other=allow_other)
        onehot = [1.0 if fam == f else 0.0 for f in CANCER_FAMILIES]
        sample.cov = np.array([
            scale(float(raw["age"]), stats["age_min"], stats["age_max"]),
            1.0 if raw["sex"] == sex_ref else 0.0,
            1.0 if raw["race"] == race_ref else 0.0,
            scale(_stage_code(raw["stage"]), stats["stage_min"], stats["stage_max"]),
            *onehot,
        ])
    layout = ["age", "sex", "race", "stage"] + [f"family_{f}" for f in CANCER_FAMILIES]
    meta = {"cov_layout": layout, **stats}
    cohort.metadata.update(meta)
    return meta


def split_cohort(n_or_cohort, ratios=(0.70, 0.10, 0.20), seed: int = 0) -> CohortSplit:
    """Seeded shuffle, then floor sizes with the final split taking the remainder."""
    n = n_or_cohort if isinstance(n_or_cohort, int) else len(n_or_cohort)
    if n < 3:
        raise ValueError(f"cohort of {n} is too small to split")
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("need three non-negative ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios sum to {sum(ratios)}, expected 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(ratios[0] * n))
    n_val = int(np.floor(ratios[1] * n))
    return CohortSplit(train=np.sort(perm[:n_train]),
                       val=np.sort(perm[n_train:n_train + n_val]),
                       test=np.sort(perm[n_train + n_val:]))


def outcome_arrays(cohort: Cohort, indices) -> tuple[np.ndarray, np.ndarray]:
    indices = np.asarray(indices, dtype=np.int64)
    times = np.array([cohort.samples[i].outcome.time for i in indices])
    events = np.array([cohort.samples[i].outcome.event for i in indices], dtype=bool)
    return times, events


def modality_matrix(cohort: Cohort, indices, modality: str) -> np.ndarray:
    """Stack one modality over samples; every selected sample must carry it."""
    indices = np.asarray(indices, dtype=np.int64)
    rows = []
    for i in indices:
        value = getattr(cohort.samples[i], modality)
        if value is None:
            raise ValueError(f"sample {cohort.samples[i].sample_id!r} lacks {modality}")
        rows.append(value)
    return np.stack(rows)


BUNDLE_VERSION = 1


def save_bundle(cohort: Cohort, out_dir: str, split: CohortSplit | None = None) -> None:
    """Serialize a cohort to a directory; numeric fields round-trip bit-exactly."""
    os.makedirs(out_dir, exist_ok=True)
    ids = cohort.ids()

    header = ["id", "time_years", "event"]
    rows = [[s.sample_id, formats.format_float(s.outcome.time),
             "1" if s.outcome.event else "0"] for s in cohort.samples]
    formats.write_csv_table(os.path.join(out_dir, "outcomes.csv"), header, rows)

    def write_matrix(name: str, attr: str, prefix: str):
        present = [s for s in cohort.samples if getattr(s, attr) is not None]
        if not present:
            return None
        width = present[0].__getattribute__(attr).size
        header = ["id"] + [f"{prefix}{j + 1}" for j in range(width)]
        rows = [[s.sample_id] + [formats.format_float(v)
                                 for v in getattr(s, attr)] for s in present]
        formats.write_csv_table(os.path.join(out_dir, name), header, rows)
        return name

    cov_file = write_matrix("covariates.csv", "cov", "c")
    ge_file = write_matrix("ge.csv", "ge", "g")

    hidden = {s.sample_id: s.text_hidden for s in cohort.samples
              if s.text_hidden is not None}
    if hidden:
        formats.write_hidden_states(os.path.join(out_dir, "hidden.svhs"), hidden)
    pooled = {s.sample_id: s.text_pooled for s in cohort.samples
              if s.text_pooled is not None}
    if pooled:
        formats.write_pooled(os.path.join(out_dir, "pooled.svpv"), pooled)

    teacher_rows = [{"id": s.sample_id, "responses": s.teacher.responses,
                     "explanation": s.teacher.explanation}
                    for s in cohort.samples if s.teacher is not None]
    if teacher_rows:
        formats.write_jsonl(os.path.join(out_dir, "teacher.jsonl"), teacher_rows)

    meta = {
        "bundle_version": BUNDLE_VERSION,
        "ids": ids,
        "metadata": cohort.metadata,
        "files": {"covariates": cov_file, "ge": ge_file,
                  "hidden": "hidden.svhs" if hidden else None,
                  "pooled": "pooled.svpv" if pooled else None,
                  "teacher": "teacher.jsonl" if teacher_rows else None},
        "split": {k: [ids[i] for i in v] for k, v in split.as_dict().items()}
                 if split is not None else None,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)


def load_bundle(bundle_dir: str) -> tuple[Cohort, CohortSplit | None]:
    with open(os.path.join(bundle_dir, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("bundle_version") != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {meta.get('bundle_version')}")
    files = meta["files"]

    def path_of(key: str) -> str | None:
        return os.path.join(bundle_dir, files[key]) if files.get(key) else None

    cohort = load_cohort(
        outcomes_path=os.path.join(bundle_dir, "outcomes.csv"),
        covariates_path=path_of("covariates"),
        ge_path=path_of("ge"),
        hidden_states_path=path_of("hidden"),
        pooled_path=path_of("pooled"),
        teacher_path=path_of("teacher"),
        schema="numeric",
        horizon_years=None,  # bundle outcomes are already censored
    )
    stored_ids = meta["ids"]
    if cohort.ids() != stored_ids:
        order = cohort.index_of()
        missing = [sid for sid in stored_ids if sid not in order]
        if missing:
            raise ValueError(f"bundle ids missing from outcomes: {missing[:5]}")
        cohort.samples = [cohort.samples[order[sid]] for sid in stored_ids]
    cohort.metadata = meta["metadata"]

    split = None
    if meta.get("split") is not None:
        index = cohort.index_of()
        split = CohortSplit(**{k: np.array([index[sid] for sid in v], dtype=np.int64)
                               for k, v in meta["split"].items()})
    return cohort, split
