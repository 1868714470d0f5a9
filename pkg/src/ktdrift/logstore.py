"""Interaction logs: CSV ingestion, eligibility filters, sampling and sequences."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

COLUMNS = (
    "student_id",
    "assignment_log_id",
    "problem_set_id",
    "exercise_id",
    "kc_id",
    "timestamp",
    "correct",
    "gradable",
)
TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%SZ"
SUMMER = frozenset({6, 7, 8})


@dataclass(frozen=True, slots=True)
class InteractionRow:
    student_id: str
    assignment_log_id: str
    problem_set_id: str
    exercise_id: str
    kc_id: str
    timestamp: int  # UTC epoch seconds
    correct: int
    gradable: int = 1


def parse_timestamp(text: str) -> int:
    dt = datetime.strptime(text, TIMESTAMP_FORMAT).replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime(TIMESTAMP_FORMAT)


def utc_month(ts: int) -> int:
    return datetime.fromtimestamp(ts, tz=timezone.utc).month


def year_start(label: str) -> int:
    """Calendar year an academic-year label starts in: ``"2019-2020" -> 2019``."""
    try:
        return int(str(label).strip()[:4])
    except ValueError:
        raise ValueError(f"academic year label must start with a 4-digit year: {label!r}") from None


@dataclass(frozen=True)
class LogStore:
    rows: tuple[InteractionRow, ...]
    year_label: str = ""
    rejected: tuple[tuple[int, str], ...] = ()  # (line number, reason)

    def __len__(self):
        return len(self.rows)

    def assignment_log_ids(self) -> list[str]:
        return sorted({r.assignment_log_id for r in self.rows})


@dataclass(frozen=True)
class FilterRules:
    excluded_months: frozenset = SUMMER
    min_assignments_per_problem_set: int = 100
    require_gradable: bool = True

    def __post_init__(self):
        if self.min_assignments_per_problem_set < 1:
            raise ValueError("min_assignments_per_problem_set must be >= 1")


@dataclass(frozen=True)
class Sample:
    sample_id: int
    year_label: str
    assignment_log_ids: frozenset
    rows: tuple[InteractionRow, ...]
    seed: int

    def manifest(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "year_label": self.year_label,
            "seed": self.seed,
            "assignment_log_ids": sorted(self.assignment_log_ids),
        }


@dataclass(frozen=True)
class Vocabulary:
    kc_index: dict
    exercise_index: dict

    @property
    def oov_kc(self) -> int:
        return len(self.kc_index)

    @property
    def oov_exercise(self) -> int:
        return len(self.exercise_index)

    @property
    def n_kcs(self) -> int:
        """KC slots including the OOV slot."""
        return len(self.kc_index) + 1

    @property
    def n_exercises(self) -> int:
        return len(self.exercise_index) + 1

    @classmethod
    def from_rows(cls, rows) -> "Vocabulary":
        kcs = sorted({r.kc_id for r in rows})
        exercises = sorted({r.exercise_id for r in rows})
        return cls({k: i for i, k in enumerate(kcs)}, {e: i for i, e in enumerate(exercises)})

    def kc(self, kc_id: str) -> int:
        return self.kc_index.get(kc_id, self.oov_kc)

    def exercise(self, exercise_id: str) -> int:
        return self.exercise_index.get(exercise_id, self.oov_exercise)

    def to_json(self) -> dict:
        return {"kcs": sorted(self.kc_index, key=self.kc_index.get),
                "exercises": sorted(self.exercise_index, key=self.exercise_index.get)}

    @classmethod
    def from_json(cls, data: dict) -> "Vocabulary":
        return cls({k: i for i, k in enumerate(data["kcs"])},
                   {e: i for i, e in enumerate(data["exercises"])})


@dataclass(frozen=True)
class StudentSequence:
    student_id: str
    exercise: np.ndarray
    kc: np.ndarray
    correct: np.ndarray
    timestamp: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.correct)


def ingest_csv(path, year_label: str | None = None) -> LogStore:
    """Parse a log file in the documented schema.

    Malformed data lines are skipped and listed in ``LogStore.rejected``;
    a missing file or a header without the required columns raises.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such log file: {path}")
    rows, rejected = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise ValueError(f"{path}: missing required column(s) {', '.join(missing)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                rows.append(_parse_row(rec))
            except ValueError as exc:
                rejected.append((lineno, str(exc)))
    if rejected:
        log.warning("%s: rejected %d malformed row(s)", path, len(rejected))
    return LogStore(tuple(rows), year_label if year_label is not None else path.stem, tuple(rejected))


def _parse_row(rec: dict) -> InteractionRow:
    correct, gradable = rec["correct"], rec["gradable"]
    if correct not in ("0", "1"):
        raise ValueError(f"correct must be 0 or 1, got {correct!r}")
    if gradable not in ("0", "1"):
        raise ValueError(f"gradable must be 0 or 1, got {gradable!r}")
    kc = rec["kc_id"]
    if not kc:
        raise ValueError("empty kc_id")
    try:
        ts = parse_timestamp(rec["timestamp"])
    except (TypeError, ValueError):
        raise ValueError(f"unparseable timestamp {rec['timestamp']!r}") from None
    return InteractionRow(
        rec["student_id"], rec["assignment_log_id"], rec["problem_set_id"],
        rec["exercise_id"], kc, ts, int(correct), int(gradable),
    )


def write_csv(store_or_rows, path) -> None:
    rows = store_or_rows.rows if isinstance(store_or_rows, (LogStore, Sample)) else store_or_rows
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow((r.student_id, r.assignment_log_id, r.problem_set_id, r.exercise_id,
                        r.kc_id, format_timestamp(r.timestamp), r.correct, r.gradable))


def assignment_counts(stores) -> Counter:
    """Distinct assignment logs per problem set, pooled over all given stores."""
    seen = set()
    for store in stores:
        seen.update((r.problem_set_id, r.assignment_log_id) for r in store.rows)
    return Counter(ps for ps, _ in seen)


def filter_eligible(store: LogStore, rules: FilterRules, global_assignment_counts) -> LogStore:
    keep = []
    for r in store.rows:
        if rules.require_gradable and r.gradable != 1:
            continue
        if utc_month(r.timestamp) in rules.excluded_months:
            continue
        if global_assignment_counts.get(r.problem_set_id, 0) < rules.min_assignments_per_problem_set:
            continue
        keep.append(r)
    return LogStore(tuple(keep), store.year_label)


class InsufficientDataError(ValueError):
    pass


def sample_assignment_logs(store: LogStore, n_samples: int, sample_size: int, seed: int) -> list[Sample]:
    """Draw ``n_samples`` pairwise-disjoint sets of ``sample_size`` assignment logs."""
    ids = store.assignment_log_ids()
    need = n_samples * sample_size
    if len(ids) < need:
        raise InsufficientDataError(
            f"year {store.year_label}: need {need} assignment logs "
            f"({n_samples} x {sample_size}), only {len(ids)} available"
        )
    order = np.random.default_rng(seed).permutation(len(ids))
    by_log: dict[str, list[InteractionRow]] = {}
    for r in store.rows:
        by_log.setdefault(r.assignment_log_id, []).append(r)
    samples = []
    for k in range(n_samples):
        chosen = frozenset(ids[i] for i in order[k * sample_size:(k + 1) * sample_size])
        rows = tuple(r for r in store.rows if r.assignment_log_id in chosen)
        samples.append(Sample(k, store.year_label, chosen, rows, seed))
    return samples


def sample_from_manifest(store: LogStore, manifest: dict) -> Sample:
    chosen = frozenset(manifest["assignment_log_ids"])
    rows = tuple(r for r in store.rows if r.assignment_log_id in chosen)
    found = {r.assignment_log_id for r in rows}
    if found != chosen:
        raise ValueError(f"{len(chosen - found)} manifest assignment logs are absent from the store")
    return Sample(int(manifest["sample_id"]), manifest["year_label"], chosen, rows, int(manifest["seed"]))


def write_manifest(sample: Sample, path) -> None:
    Path(path).write_text(json.dumps(sample.manifest(), indent=1) + "\n", encoding="utf-8")


def build_sequences(sample_or_rows, vocab: Vocabulary) -> list[StudentSequence]:
    """One time-ordered sequence per student, in student-id order.

    Ties are broken by assignment log id and then by input position.
    """
    rows = sample_or_rows.rows if isinstance(sample_or_rows, (Sample, LogStore)) else sample_or_rows
    by_student: dict[str, list[tuple]] = {}
    for pos, r in enumerate(rows):
        by_student.setdefault(r.student_id, []).append((r.timestamp, r.assignment_log_id, pos, r))
    out = []
    for sid in sorted(by_student):
        steps = sorted(by_student[sid], key=lambda k: k[:3])
        out.append(StudentSequence(
            sid,
            np.array([vocab.exercise(s[3].exercise_id) for s in steps], dtype=np.int64),
            np.array([vocab.kc(s[3].kc_id) for s in steps], dtype=np.int64),
            np.array([s[3].correct for s in steps], dtype=np.int64),
            np.array([s[0] for s in steps], dtype=np.int64),
        ))
    return out
