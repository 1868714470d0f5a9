"""Within-year and cross-year evaluation protocols, tuning and reporting."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from . import metrics
from .logstore import LogStore, Sample, Vocabulary, build_sequences, sample_assignment_logs, year_start
from .models import DEEP_FAMILIES, FAMILIES
from .models.classical import BktModel, BktParams, PfaModel, PfaParams, fit_bkt_model, fit_pfa_model
from .models.deep import DEFAULT_HYPER, DeepModel, Hyperparams, fit_deep

log = logging.getLogger(__name__)

METRICS = ("auc", "log_loss", "f1")
RECORD_COLUMNS = ("family", "train_year", "eval_year", "years_between", "train_sample",
                  "eval_sample", "auc", "log_loss", "f1", "n_interactions")
TUNER_NOTE = ("hyperparameters searched by scrambled-Halton quasi-random sampling "
              "(stand-in for tree-structured Bayesian optimisation)")
REUSE_NOTE = "cross-year evaluations reuse the model fitted for the within-year protocol"

# small deep configurations for --test-scale runs
TEST_SCALE_HYPER = {
    "DKT": Hyperparams(20, 16, 16, 2, 0.1, 5e-3, reg_lambda=1e-5),
    "SAKT-KC": Hyperparams(20, 16, 16, 2, 0.1, 5e-3, num_heads=2, learn_decay_rate=0.9),
    "SAKT-E": Hyperparams(20, 16, 16, 2, 0.1, 5e-3, num_heads=2, learn_decay_rate=0.9),
}


@dataclass(frozen=True)
class ModelSpec:
    family: str
    hyper: Hyperparams | None = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}; choose from {FAMILIES}")
        if self.family in DEEP_FAMILIES and self.hyper is None:
            object.__setattr__(self, "hyper", DEFAULT_HYPER[self.family])


@dataclass(frozen=True)
class EvalRecord:
    family: str
    train_year: str
    eval_year: str
    years_between: int
    train_sample: int
    eval_sample: int
    auc: float
    log_loss: float
    f1: float
    n_interactions: int

    def __post_init__(self):
        if self.years_between < 0:
            raise ValueError("evaluation year precedes training year")

    def sort_key(self):
        return (self.family, year_start(self.train_year), self.train_sample,
                year_start(self.eval_year), self.eval_sample)


@dataclass(frozen=True)
class TrialResult:
    hyper: Hyperparams
    fold_aucs: tuple
    mean_auc: float


def job_seed(seed: int, *parts) -> int:
    key = [seed] + [zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(key).generate_state(1, dtype=np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# fitting and scoring
# ---------------------------------------------------------------------------

def fit_model(spec: ModelSpec, train, seed: int | None = None):
    """Fit ``spec`` on a sample (or any row collection); the vocabulary comes from it."""
    rows = train.rows if hasattr(train, "rows") else train
    if not rows:
        raise ValueError("cannot fit on an empty training sample")
    vocab = Vocabulary.from_rows(rows)
    seqs = build_sequences(rows, vocab)
    seed = spec.seed if seed is None else seed
    if spec.family == "BKT":
        return fit_bkt_model(seqs, vocab)
    if spec.family == "PFA":
        return fit_pfa_model(seqs, vocab)
    return fit_deep(spec.family, seqs, vocab, spec.hyper, seed)


def save_model(model, path) -> None:
    """Deep models go to a parameter archive, classical ones to JSON."""
    if isinstance(model, DeepModel):
        model.save(path)
        return
    doc = {"family": model.family, "vocab": model.vocab.to_json(),
           "params": json.loads(model.params.to_json())}
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def load_model(path):
    raw = Path(path).read_bytes()
    if raw.startswith(b"KTARCH01"):
        return DeepModel.load(path)
    doc = json.loads(raw)
    vocab = Vocabulary.from_json(doc["vocab"])
    params = json.dumps(doc["params"])
    if doc["family"] == "BKT":
        return BktModel(BktParams.from_json(params), vocab)
    if doc["family"] == "PFA":
        return PfaModel(PfaParams.from_json(params), vocab)
    raise ValueError(f"{path}: unknown family {doc['family']!r}")


def score(model, rows) -> metrics.ScoredLabels:
    """Pool every interaction of ``rows`` into one scored set (micro averaging)."""
    rows = rows.rows if hasattr(rows, "rows") else rows
    seqs = build_sequences(rows, model.vocab)
    probs = model.predict(seqs)
    return metrics.ScoredLabels(
        np.concatenate([s.correct for s in seqs]) if seqs else np.zeros(0, dtype=np.int64),
        np.concatenate(probs) if probs else np.zeros(0),
    )


def evaluate(model, train: Sample, target: Sample) -> EvalRecord:
    data = score(model, target)
    n = len(data)
    if n != len(target.rows):
        raise AssertionError(f"scored {n} interactions, sample has {len(target.rows)}")
    try:
        auc = metrics.auc(data)
    except ValueError as exc:
        raise ValueError(f"{model.family} on {target.year_label}#{target.sample_id}: {exc}") from None
    return EvalRecord(
        model.family, train.year_label, target.year_label,
        year_start(target.year_label) - year_start(train.year_label),
        train.sample_id, target.sample_id,
        auc, metrics.log_loss(data), metrics.f1_score(data), n,
    )


def _fit_for(spec: ModelSpec, sample: Sample, models: dict | None):
    key = (spec.family, sample.year_label, sample.sample_id)
    if models is not None and key in models:
        return models[key]
    model = fit_model(spec, sample, job_seed(spec.seed, spec.family, sample.year_label, sample.sample_id))
    if models is not None:
        models[key] = model
    return model


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def run_within_year(samples, spec: ModelSpec, test_mode: bool = False, models: dict | None = None):
    """Train on each sample, evaluate on every sibling sample of the same year."""
    samples = sorted(samples, key=lambda s: s.sample_id)
    if not test_mode and len(samples) != 10:
        raise ValueError(f"within-year protocol needs exactly 10 samples, got {len(samples)}")
    if len({s.year_label for s in samples}) != 1:
        raise ValueError("within-year samples must all come from one academic year")
    records = []
    for train in samples:
        model = _fit_for(spec, train, models)
        records.extend(evaluate(model, train, other) for other in samples if other is not train)
    return records


def _round_robin(samples, i: int) -> Sample:
    ordered = sorted(samples, key=lambda s: s.sample_id)
    return ordered[i % len(ordered)]


def run_cross_year(train_samples, later_years: dict, spec: ModelSpec, models: dict | None = None):
    """Evaluate each training-year model on one sample of every strictly later year.

    Train sample ``i`` is scored on sample ``i mod n`` of each later year.
    """
    train_samples = sorted(train_samples, key=lambda s: s.sample_id)
    y0 = year_start(train_samples[0].year_label)
    for label in later_years:
        if year_start(label) <= y0:
            raise ValueError(f"year {label} is not after training year {train_samples[0].year_label}")
    records = []
    for i, train in enumerate(train_samples):
        model = _fit_for(spec, train, models)
        for label in sorted(later_years, key=year_start):
            records.append(evaluate(model, train, _round_robin(later_years[label], i)))
    return records


def _matrix_job(spec: ModelSpec, train: Sample, within, later):
    model = _fit_for(spec, train, None)
    out = [evaluate(model, train, s) for s in within]
    out += [evaluate(model, train, s) for s in later]
    return out


def run_matrix(samples_by_year: dict, specs, workers: int = 1, test_mode: bool = False):
    """Full within-year plus cross-year grid; records come back in a fixed order."""
    years = sorted(samples_by_year, key=year_start)
    jobs = []
    for spec in specs:
        for yi, label in enumerate(years):
            samples = sorted(samples_by_year[label], key=lambda s: s.sample_id)
            if not test_mode and len(samples) != 10:
                raise ValueError(f"year {label}: within-year protocol needs 10 samples, got {len(samples)}")
            for i, train in enumerate(samples):
                within = [s for s in samples if s is not train]
                later = [_round_robin(samples_by_year[l], i) for l in years[yi + 1:]]
                jobs.append((spec, train, within, later))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_matrix_job, *zip(*jobs)))
    else:
        results = [_matrix_job(*job) for job in jobs]
    records = [r for chunk in results for r in chunk]
    return sorted(records, key=EvalRecord.sort_key)


def expected_record_counts(n_years: int, n_samples: int, n_families: int) -> tuple[int, int]:
    within = n_families * n_years * n_samples * (n_samples - 1)
    cross = n_families * n_samples * sum(range(n_years))
    return within, cross


# ---------------------------------------------------------------------------
# records I/O
# ---------------------------------------------------------------------------

def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([r.family, r.train_year, r.eval_year, r.years_between, r.train_sample,
                    r.eval_sample, repr(r.auc), repr(r.log_loss), repr(r.f1), r.n_interactions])
    return buf.getvalue()


def read_records_csv(path) -> list[EvalRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            out.append(EvalRecord(
                rec["family"], rec["train_year"], rec["eval_year"], int(rec["years_between"]),
                int(rec["train_sample"]), int(rec["eval_sample"]), float(rec["auc"]),
                float(rec["log_loss"]), float(rec["f1"]), int(rec["n_interactions"]),
            ))
    return out


# ---------------------------------------------------------------------------
# hyperparameter search
# ---------------------------------------------------------------------------

SEARCH_RANGES = {
    "num_steps": (20, 100),
    "batch_size": (16, 64),
    "d_model": (64, 512),
    "num_epochs": {"DKT": (100, 300), "SAKT": (10, 40)},
    "dropout_rate": (0.1, 0.5),
    "learn_rate": (1e-4, 1e-2),
    "reg_lambda": (1e-6, 1e-2),
    "num_heads": (2, 4, 8, 16, 32),
    "learn_decay_rate": (0.7, 0.99),
}


def _int_in(u, lo, hi):
    return int(min(hi, lo + math.floor(u * (hi - lo + 1))))


def _log_in(u, lo, hi):
    return float(math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo))))


def draw_hyperparams(family: str, u, ranges=None) -> Hyperparams:
    """Map a point of the unit cube onto the search ranges."""
    r = dict(SEARCH_RANGES, **(ranges or {}))
    epochs = r["num_epochs"]
    if isinstance(epochs, dict):
        epochs = epochs["DKT" if family == "DKT" else "SAKT"]
    base = dict(
        num_steps=_int_in(u[0], *r["num_steps"]),
        batch_size=_int_in(u[1], *r["batch_size"]),
        d_model=_int_in(u[2], *r["d_model"]),
        num_epochs=_int_in(u[3], *epochs),
        dropout_rate=float(r["dropout_rate"][0] + u[4] * (r["dropout_rate"][1] - r["dropout_rate"][0])),
        learn_rate=_log_in(u[5], *r["learn_rate"]),
    )
    if family == "DKT":
        return Hyperparams(**base, reg_lambda=_log_in(u[6], *r["reg_lambda"]))
    heads = r["num_heads"][min(len(r["num_heads"]) - 1, int(u[6] * len(r["num_heads"])))]
    lo, hi = r["d_model"]
    d = max(heads * math.ceil(lo / heads), min(heads * (hi // heads), heads * round(base["d_model"] / heads)))
    base["d_model"] = d
    decay = r["learn_decay_rate"]
    return Hyperparams(**base, num_heads=heads,
                       learn_decay_rate=float(decay[0] + u[7] * (decay[1] - decay[0])))


def build_validation_sample(stores, size: int = 100_000, seed: int = 0) -> Sample:
    """Pool every year's logs and draw one sample of ``size`` assignment logs."""
    rows = tuple(r for s in stores for r in s.rows)
    pooled = LogStore(rows, "pooled")
    return sample_assignment_logs(pooled, 1, size, seed)[0]


def _student_folds(sample: Sample, k: int, seed: int):
    students = sorted({r.student_id for r in sample.rows})
    order = np.random.default_rng(seed).permutation(len(students))
    fold_of = {students[j]: n % k for n, j in enumerate(order)}
    return [[r for r in sample.rows if fold_of[r.student_id] == f] for f in range(k)], fold_of


def tune_hyperparams(family: str, validation_sample: Sample, n_trials: int = 50, seed: int = 0,
                     ranges=None, max_train_epochs: int | None = None, n_folds: int = 4):
    """Quasi-random search scored by student-level k-fold cross-validated AUC.

    ``max_train_epochs`` caps training during the search only (desk-scale runs);
    returned hyperparameters are always the drawn ones.
    """
    if family not in DEEP_FAMILIES:
        raise ValueError(f"{family} has no tunable hyperparameters")
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    dims = 7 if family == "DKT" else 8
    points = qmc.Halton(d=dims, scramble=True, seed=seed).random(n_trials)
    folds, _ = _student_folds(validation_sample, n_folds, seed)
    trials = []
    for t, u in enumerate(points):
        hyper = draw_hyperparams(family, u, ranges)
        run_hyper = hyper if max_train_epochs is None else replace(
            hyper, num_epochs=min(hyper.num_epochs, max_train_epochs))
        aucs = []
        for f in range(n_folds):
            train_rows = [r for g in range(n_folds) if g != f for r in folds[g]]
            model = fit_model(ModelSpec(family, run_hyper), train_rows, job_seed(seed, family, t, f))
            aucs.append(metrics.auc(score(model, folds[f])))
        trials.append(TrialResult(hyper, tuple(aucs), float(np.mean(aucs))))
        log.info("trial %d/%d %s: mean AUC %.4f", t + 1, n_trials, family, trials[-1].mean_auc)
    best = max(range(len(trials)), key=lambda i: (trials[i].mean_auc, -i))
    return trials[best].hyper, trials


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

@dataclass
class Report:
    groups: list = field(default_factory=list)
    spearman: dict = field(default_factory=dict)
    regressions: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "meta": self.meta,
            "groups": self.groups,
            "spearman": self.spearman,
            "regressions": {k: asdict(v) for k, v in self.regressions.items()},
            "warnings": self.warnings,
        }, indent=1)

    def to_text(self) -> str:
        out = [f"# {self.meta.get('tuner', '')}", f"# {self.meta.get('cross_year', '')}", ""]
        out.append("Mean (95% CI) by family and years between")
        for g in self.groups:
            cells = []
            for m in METRICS:
                mean, lo, hi = g[m]
                ci = "n/a" if lo is None else f"[{lo:.4f}, {hi:.4f}]"
                cells.append(f"{m}={mean:.4f} {ci}")
            out.append(f"  {g['family']:<8} YB={g['years_between']}  n={g['n']:<3} " + "  ".join(cells))
        out.append("")
        out.append("Spearman rho vs years between")
        for fam, row in self.spearman.items():
            cells = [f"{m}: rho={v['rho']:.3f} p={v['p']:.3g}" for m, v in row.items()]
            out.append(f"  {fam:<8} " + "  ".join(cells))
        for m, res in self.regressions.items():
            out.append("")
            out.append(f"Regression results for {m} (reference: BKT when present)")
            out.append(res.to_text())
        if self.warnings:
            out.append("")
            out.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(out) + "\n"


def aggregate_report(records, families=None) -> Report:
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    rep = Report(meta={"tuner": TUNER_NOTE, "cross_year": REUSE_NOTE, "n_records": len(records)})
    order = [f for f in FAMILIES if f in {r.family for r in records}]
    order += sorted({r.family for r in records} - set(order))
    for fam in families or order:
        fam_recs = [r for r in records if r.family == fam]
        if not fam_recs:
            rep.warnings.append(f"no records for family {fam}; omitted")
            log.warning(rep.warnings[-1])
            continue
        for yb in sorted({r.years_between for r in fam_recs}):
            grp = [r for r in fam_recs if r.years_between == yb]
            entry = {"family": fam, "years_between": yb, "n": len(grp)}
            for m in METRICS:
                vals = [getattr(r, m) for r in grp]
                if len(vals) >= 2:
                    entry[m] = metrics.mean_ci(vals)
                else:
                    entry[m] = (float(vals[0]), None, None)
            rep.groups.append(entry)
        row = {}
        for m in METRICS:
            try:
                rho, p = metrics.spearman([r.years_between for r in fam_recs], [getattr(r, m) for r in fam_recs])
                row[m] = {"rho": rho, "p": p}
            except ValueError as exc:
                rep.warnings.append(f"spearman {fam}/{m}: {exc}")
        if row:
            rep.spearman[fam] = row
    kept = [r for r in records if r.family in set(families or order)]
    for m in METRICS:
        try:
            rep.regressions[m] = metrics.ols_fixed_effects(kept, m, family_order=order)
        except (ValueError, np.linalg.LinAlgError) as exc:
            rep.warnings.append(f"regression {m}: {exc}")
    for w in rep.warnings:
        log.warning(w)
    return rep


def write_report(report: Report, records, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.csv").write_text(records_to_csv(records), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
