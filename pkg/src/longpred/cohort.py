"""Longitudinal cohort data model and design-matrix construction.

A cohort is a list of subjects, each with a strictly time-ordered series of
visits starting at a baseline visit (time 0).  Every visit records the
outcome biomarker (CD4 count), white blood cell count, and lymphocyte
percentage.  From a subject we build the fixed-effects design matrix with a
piecewise-linear time trend (knot at one month by default), baseline
covariates, time-varying covariates, and time-by-baseline interactions,
plus a random intercept-and-slope design.

Fixed-effects columns, in order::

    intercept, log10(cd4 at baseline), wbc at baseline, lymph% at baseline,
    t, (t - knot)+, wbc(t), lymph%(t),
    t * wbc0, t * lymph0, (t - knot)+ * wbc0, (t - knot)+ * lymph0

Rows correspond to post-baseline visits only: the baseline outcome enters
the design as a predictor, never as a response.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyResponseError, RecordError, SchemaError, SubjectError

log = logging.getLogger(__name__)

N_FIXED_COLUMNS = 12

COLUMN_NAMES = (
    "intercept",
    "log10_cd4_baseline",
    "wbc_baseline",
    "lymph_baseline",
    "time",
    "time_after_knot",
    "wbc",
    "lymph_pct",
    "time_x_wbc_baseline",
    "time_x_lymph_baseline",
    "time_after_knot_x_wbc_baseline",
    "time_after_knot_x_lymph_baseline",
)

DEFAULT_SCHEMA = {
    "subject_id": "subject_id",
    "time_months": "time_months",
    "cd4": "cd4",
    "wbc": "wbc",
    "lymph_pct": "lymph_pct",
}


@dataclass(frozen=True)
class Observation:
    """One visit: months since therapy start plus the three lab values."""

    time_months: float
    cd4: float
    wbc: float
    lymph_pct: float

    def __post_init__(self):
        if not (self.time_months >= 0 and math.isfinite(self.time_months)):
            raise RecordError(f"time_months must be finite and >= 0, got {self.time_months}")
        if not (math.isfinite(self.cd4) and self.cd4 > 0):
            raise RecordError(f"cd4 must be finite and > 0, got {self.cd4}")
        if not math.isfinite(self.wbc) or self.wbc <= 0:
            raise RecordError(f"wbc must be finite and > 0, got {self.wbc}")
        if not (math.isfinite(self.lymph_pct) and 0 < self.lymph_pct <= 100):
            raise RecordError(f"lymph_pct must be in (0, 100], got {self.lymph_pct}")


@dataclass(frozen=True)
class Subject:
    """A subject's visit series; the first visit must be the baseline (t=0)."""

    id: str
    observations: tuple[Observation, ...]

    def __post_init__(self):
        if len(self.observations) == 0:
            raise SubjectError(f"subject {self.id!r} has no observations")
        if self.observations[0].time_months != 0.0:
            raise SubjectError(f"subject {self.id!r} lacks a baseline (t=0) observation")
        times = [o.time_months for o in self.observations]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise SubjectError(f"subject {self.id!r} observation times not strictly increasing")

    @property
    def baseline(self) -> Observation:
        return self.observations[0]

    @property
    def post_baseline(self) -> tuple[Observation, ...]:
        return self.observations[1:]


@dataclass(frozen=True)
class CohortDataset:
    """A set of subjects playing either the learning or the test role."""

    subjects: tuple[Subject, ...]
    role_label: str = "learning"

    def __post_init__(self):
        if self.role_label not in ("learning", "test"):
            raise SubjectError(f"role_label must be 'learning' or 'test', got {self.role_label!r}")
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise SubjectError(f"duplicate subject ids: {dupes}")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_records(self) -> int:
        return sum(len(s.observations) for s in self.subjects)

    @property
    def n_post_baseline(self) -> int:
        return sum(len(s.post_baseline) for s in self.subjects)


@dataclass(frozen=True)
class DesignPair:
    """Fixed (n x 12) and random (n x 2) design matrices for one subject."""

    x: np.ndarray
    z: np.ndarray
    knot_months: float = 1.0

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[1] != N_FIXED_COLUMNS:
            raise SubjectError(f"x must have {N_FIXED_COLUMNS} columns, got shape {self.x.shape}")
        if self.z.ndim != 2 or self.z.shape[1] != 2 or self.z.shape[0] != self.x.shape[0]:
            raise SubjectError(f"z must be (n, 2) matching x rows, got shape {self.z.shape}")
        if not self.knot_months > 0:
            raise SubjectError(f"knot_months must be > 0, got {self.knot_months}")


def hinge(t, knot):
    """Elementwise (t - knot)+ = max(t - knot, 0)."""
    return np.maximum(np.asarray(t, dtype=float) - knot, 0.0)


def design_row(time_months: float, wbc: float, lymph_pct: float,
               baseline: Observation, knot_months: float = 1.0) -> np.ndarray:
    """One fixed-effects row for a visit at ``time_months``.

    ``wbc``/``lymph_pct`` are the visit's own covariate values; baseline
    covariates and log10 baseline CD4 come from ``baseline``.
    """
    t = float(time_months)
    h = max(t - knot_months, 0.0)
    w0, l0 = baseline.wbc, baseline.lymph_pct
    return np.array([
        1.0,
        math.log10(baseline.cd4),
        w0,
        l0,
        t,
        h,
        float(wbc),
        float(lymph_pct),
        t * w0,
        t * l0,
        h * w0,
        h * l0,
    ])


def random_effects_row(time_months: float) -> np.ndarray:
    """Random intercept-and-slope row (1, t)."""
    return np.array([1.0, float(time_months)])


def build_design(subject: Subject, knot_months: float = 1.0,
                 outcome: str = "continuous",
                 threshold_k: float | None = None) -> tuple[DesignPair, np.ndarray]:
    """Design matrices and response vector for one subject.

    ``outcome`` is ``"continuous"`` (response = post-baseline CD4 counts) or
    ``"dichotomized"`` (response = indicators CD4 > ``threshold_k``).  The
    baseline visit contributes predictors only; a subject with nothing but
    a baseline row cannot be used for fitting.
    """
    if knot_months <= 0:
        raise SubjectError(f"knot_months must be > 0, got {knot_months}")
    if outcome not in ("continuous", "dichotomized"):
        raise SubjectError(f"outcome must be 'continuous' or 'dichotomized', got {outcome!r}")
    if outcome == "dichotomized" and (threshold_k is None or threshold_k <= 0):
        raise SubjectError("dichotomized outcome requires threshold_k > 0")
    post = subject.post_baseline
    if not post:
        raise EmptyResponseError(f"subject {subject.id!r} has only a baseline observation")

    base = subject.baseline
    x = np.stack([design_row(o.time_months, o.wbc, o.lymph_pct, base, knot_months) for o in post])
    z = np.stack([random_effects_row(o.time_months) for o in post])
    cd4 = np.array([o.cd4 for o in post])
    if outcome == "continuous":
        response = cd4
    else:
        response = (cd4 > threshold_k).astype(float)
    return DesignPair(x=x, z=z, knot_months=knot_months), response


def _parse_field(raw: str, column: str, row_index: int) -> float:
    raw = raw.strip()
    if raw == "" or raw.upper() in ("NA", "NAN", "NULL", "."):
        return math.nan
    try:
        return float(raw)
    except ValueError:
        raise RecordError(
            f"row {row_index}: non-numeric value {raw!r} in column {column!r}",
            row_index=row_index,
        ) from None


def load_cohort(path, schema: dict[str, str] | None = None,
                role_label: str = "learning", delimiter: str = ",") -> CohortDataset:
    """Load a delimited-text cohort file.

    The file must have a header row.  ``schema`` maps the canonical field
    names (``subject_id``, ``time_months``, ``cd4``, ``wbc``, ``lymph_pct``)
    to the column names actually present; omitted keys default to the
    canonical names.  Rows are grouped by subject and sorted by time.

    Rows with a missing wbc or lymph_pct value are dropped with a warning
    (they cannot contribute design rows); a missing or non-positive cd4 is
    an error, as is a subject without a t=0 baseline row.
    """
    colmap = dict(DEFAULT_SCHEMA)
    if schema:
        unknown = set(schema) - set(DEFAULT_SCHEMA)
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        colmap.update(schema)

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, expected a header row")
        missing = [c for c in colmap.values() if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}; found {reader.fieldnames}")

        by_subject: dict[str, list[tuple[float, Observation]]] = {}
        order: list[str] = []
        n_dropped = 0
        for row_index, row in enumerate(reader, start=1):
            sid = row[colmap["subject_id"]].strip()
            if not sid:
                raise RecordError(f"row {row_index}: empty subject id", row_index=row_index)
            t = _parse_field(row[colmap["time_months"]], "time_months", row_index)
            cd4 = _parse_field(row[colmap["cd4"]], "cd4", row_index)
            wbc = _parse_field(row[colmap["wbc"]], "wbc", row_index)
            lymph = _parse_field(row[colmap["lymph_pct"]], "lymph_pct", row_index)
            if math.isnan(t) or t < 0:
                raise RecordError(f"row {row_index}: invalid time_months {t}", row_index=row_index)
            if math.isnan(cd4) or cd4 <= 0:
                raise RecordError(
                    f"row {row_index}: cd4 must be positive, got {cd4}", row_index=row_index
                )
            if math.isnan(wbc) or math.isnan(lymph):
                n_dropped += 1
                log.warning("row %d (subject %s): missing wbc/lymph_pct, row dropped", row_index, sid)
                continue
            try:
                obs = Observation(time_months=t, cd4=cd4, wbc=wbc, lymph_pct=lymph)
            except RecordError as e:
                raise RecordError(f"row {row_index}: {e}", row_index=row_index) from None
            if sid not in by_subject:
                by_subject[sid] = []
                order.append(sid)
            by_subject[sid].append((t, obs))

    if n_dropped:
        log.warning("dropped %d rows with missing covariates", n_dropped)

    subjects = []
    for sid in order:
        rows = sorted(by_subject[sid], key=lambda p: p[0])
        times = [t for t, _ in rows]
        if len(set(times)) != len(times):
            raise SubjectError(f"subject {sid!r} has duplicate observation times")
        if times[0] != 0.0:
            raise SubjectError(f"subject {sid!r} lacks a baseline (t=0) row")
        subjects.append(Subject(id=sid, observations=tuple(o for _, o in rows)))

    return CohortDataset(subjects=tuple(subjects), role_label=role_label)


def save_cohort(dataset: CohortDataset, path, delimiter: str = ",") -> None:
    """Write a cohort in the same delimited format ``load_cohort`` reads."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(list(DEFAULT_SCHEMA))
        for s in dataset.subjects:
            for o in s.observations:
                writer.writerow([s.id, repr(float(o.time_months)), repr(float(o.cd4)),
                                 repr(float(o.wbc)), repr(float(o.lymph_pct))])


def stack_designs(dataset: CohortDataset, knot_months: float = 1.0,
                  outcome: str = "continuous", threshold_k: float | None = None):
    """Per-subject (DesignPair, response) lists for every subject in a cohort.

    Subjects with only a baseline row are skipped with a warning: they carry
    no response information.
    """
    designs, responses, ids = [], [], []
    for s in dataset.subjects:
        if not s.post_baseline:
            log.warning("subject %s has no post-baseline rows; excluded from fitting", s.id)
            continue
        pair, resp = build_design(s, knot_months, outcome, threshold_k)
        designs.append(pair)
        responses.append(resp)
        ids.append(s.id)
    return designs, responses, ids
