"""Synthetic interaction logs from ground-truth BKT populations with parameter drift."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from .logstore import InteractionRow, LogStore

PARAMS = ("L0", "T", "G", "S", "F")


@dataclass(frozen=True)
class KcTruth:
    L0: float
    T: float
    G: float
    S: float
    F: float = 0.0

    def __post_init__(self):
        for name in PARAMS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class DriftSpec:
    dL0: float = 0.0
    dT: float = 0.0
    dG: float = 0.0
    dS: float = 0.0
    dF: float = 0.0
    lo: float = 0.001
    hi: float = 0.999

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("drift clamp requires lo < hi")


@dataclass(frozen=True)
class SynthConfig:
    n_students: int
    n_kcs: int
    steps_per_student_per_kc: int
    truths: dict = field(default_factory=dict)
    drift: DriftSpec = DriftSpec()
    seed: int = 0
    exercises_per_kc: int = 5
    base_year: int = 2019

    def __post_init__(self):
        for name in ("n_students", "n_kcs", "steps_per_student_per_kc", "exercises_per_kc"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        missing = [k for k in kc_ids(self.n_kcs) if k not in self.truths]
        if missing:
            raise ValueError(f"no ground truth for KC(s) {missing[:5]}")


def kc_ids(n_kcs: int) -> list[str]:
    return [f"kc{k:03d}" for k in range(n_kcs)]


def random_truths(n_kcs: int, seed: int) -> dict:
    """A heterogeneous population of KC parameters in a plausible range."""
    rng = np.random.default_rng(seed)
    out = {}
    for kc in kc_ids(n_kcs):
        out[kc] = KcTruth(
            L0=float(rng.uniform(0.1, 0.7)),
            T=float(rng.uniform(0.05, 0.3)),
            G=float(rng.uniform(0.05, 0.3)),
            S=float(rng.uniform(0.03, 0.15)),
            F=float(rng.uniform(0.0, 0.05)),
        )
    return out


def drift_params(truths: dict, drift: DriftSpec, years: int) -> dict:
    out = {}
    for kc, t in truths.items():
        shifted = {}
        for name in PARAMS:
            v = getattr(t, name)
            if years:
                v = v + years * getattr(drift, "d" + name)
                v = min(max(v, drift.lo), drift.hi)
            shifted[name] = v
        out[kc] = replace(t, **shifted)
    return out


def year_label(base_year: int, year_index: int) -> str:
    y = base_year + year_index
    return f"{y}-{y + 1}"


def _school_year_window(start_year: int) -> tuple[int, int]:
    start = datetime(start_year, 9, 1, tzinfo=timezone.utc)
    end = datetime(start_year + 1, 6, 1, tzinfo=timezone.utc)
    return int(start.timestamp()), int(end.timestamp())


def simulate_year(config: SynthConfig, year_index: int, return_traces: bool = False):
    """Sample one academic year of logs.

    Each student works through every KC once, in a student-specific random
    order, with ``steps_per_student_per_kc`` consecutive exercises per KC
    forming one assignment log. With ``return_traces`` the latent mastery
    states are returned as ``{student_id: {kc_id: [0/1, ...]}}``.
    """
    truths = drift_params(config.truths, config.drift, year_index)
    kcs = kc_ids(config.n_kcs)
    n_steps = config.steps_per_student_per_kc
    per_student = config.n_kcs * n_steps
    t0, t1 = _school_year_window(config.base_year + year_index)
    offsets = [t0 + int((i + 0.5) * (t1 - t0) / per_student) for i in range(per_student)]

    rows = []
    traces = {}
    for s in range(config.n_students):
        rng = np.random.default_rng([config.seed, year_index, s])
        sid = f"y{year_index}s{s:05d}"
        student_trace = {}
        slot = 0
        for k in rng.permutation(config.n_kcs):
            kc = kcs[k]
            t = truths[kc]
            u = rng.random((n_steps, 3))
            ex_pick = rng.integers(config.exercises_per_kc, size=n_steps)
            mastered = rng.random() < t.L0
            states = []
            log_id = f"{sid}-{kc}"
            for i in range(n_steps):
                states.append(int(mastered))
                correct = u[i, 0] < (1.0 - t.S if mastered else t.G)
                rows.append(InteractionRow(
                    sid, log_id, f"ps-{kc}", f"{kc}-e{ex_pick[i]:02d}", kc,
                    offsets[slot], int(correct), 1,
                ))
                slot += 1
                mastered = (u[i, 1] >= t.F) if mastered else (u[i, 2] < t.T)
            student_trace[kc] = states
        traces[sid] = student_trace

    store = LogStore(tuple(rows), year_label(config.base_year, year_index))
    return (store, traces) if return_traces else store


def truth_json(config: SynthConfig, year_index: int, traces=None) -> str:
    truths = drift_params(config.truths, config.drift, year_index)
    doc = {
        "year_label": year_label(config.base_year, year_index),
        "year_index": year_index,
        "seed": config.seed,
        "drift": asdict(config.drift),
        "kcs": {kc: asdict(t) for kc, t in sorted(truths.items())},
    }
    if traces is not None:
        doc["mastery_traces"] = traces
    return json.dumps(doc, sort_keys=True)
