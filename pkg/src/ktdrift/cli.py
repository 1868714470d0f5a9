"""Command-line entry point: ``ktdrift <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import harness, metrics, numcore as nc
from .logstore import (
    FilterRules,
    LogStore,
    assignment_counts,
    filter_eligible,
    ingest_csv,
    sample_assignment_logs,
    sample_from_manifest,
    write_csv,
    write_manifest,
    year_start,
)
from .models import DEEP_FAMILIES, FAMILIES
from .models.deep import DEFAULT_HYPER, Hyperparams, batch_loss, init_dkt, init_sakt, make_batches
from .synth import DriftSpec, SynthConfig, random_truths, simulate_year, truth_json, year_label

log = logging.getLogger("ktdrift")


def _families(text: str) -> list[str]:
    fams = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in fams if f not in FAMILIES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown families {bad}; choose from {', '.join(FAMILIES)}")
    return fams


def _load_years(data_dir, years=None) -> dict[str, LogStore]:
    files = sorted(Path(data_dir).glob("*.csv"), key=lambda p: p.stem)
    stores = {}
    for f in files:
        try:
            year_start(f.stem)
        except ValueError:
            continue
        if years and f.stem not in years:
            continue
        stores[f.stem] = ingest_csv(f, f.stem)
    if not stores:
        raise SystemExit(f"no <academic-year>.csv files found in {data_dir}")
    return dict(sorted(stores.items(), key=lambda kv: year_start(kv[0])))


def _filtered(stores: dict, min_assignments: int) -> dict:
    counts = assignment_counts(stores.values())
    rules = FilterRules(min_assignments_per_problem_set=min_assignments)
    return {y: filter_eligible(s, rules, counts) for y, s in stores.items()}


def _hyper_overrides(path) -> dict:
    if not path:
        return {}
    doc = json.loads(Path(path).read_text())
    return {fam: Hyperparams(**h) for fam, h in doc.items()}


def _specs(args) -> list[harness.ModelSpec]:
    overrides = _hyper_overrides(getattr(args, "hyperparams", None))
    specs = []
    for fam in args.families:
        hyper = None
        if fam in DEEP_FAMILIES:
            hyper = overrides.get(fam) or (harness.TEST_SCALE_HYPER[fam] if args.test_scale else DEFAULT_HYPER[fam])
        specs.append(harness.ModelSpec(fam, hyper, args.seed))
    return specs


def _apply_test_scale(args) -> None:
    if args.test_scale:
        args.samples_per_year = args.samples_per_year or 3
        args.sample_size = args.sample_size or 30
        if args.min_assignments is None:
            args.min_assignments = 1
    args.samples_per_year = args.samples_per_year or 10
    args.sample_size = args.sample_size or 50_000
    if args.min_assignments is None:
        args.min_assignments = 100


# -- subcommands -------------------------------------------------------------

def cmd_ingest(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for path in args.inputs:
        store = ingest_csv(path, args.year or Path(path).stem)
        write_csv(store, out / f"{store.year_label}.csv")
        summary[store.year_label] = {
            "rows": len(store),
            "rejected": [{"line": n, "reason": why} for n, why in store.rejected],
        }
        print(f"{path}: {len(store)} rows, {len(store.rejected)} rejected")
    (out / "ingest_report.json").write_text(json.dumps(summary, indent=1))
    return 0


def cmd_filter(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stores = _load_years(args.data_dir, args.years)
    for label, store in _filtered(stores, args.min_assignments or 100).items():
        write_csv(store, out / f"{label}.csv")
        print(f"{label}: {len(stores[label])} -> {len(store)} rows")
    return 0


def cmd_sample(args) -> int:
    _apply_test_scale(args)
    out = Path(args.out_dir)
    for label, store in _load_years(args.data_dir, args.years).items():
        samples = sample_assignment_logs(store, args.samples_per_year, args.sample_size,
                                         harness.job_seed(args.seed, "sample", label))
        (out / label).mkdir(parents=True, exist_ok=True)
        for s in samples:
            write_manifest(s, out / label / f"sample_{s.sample_id:02d}.json")
        print(f"{label}: wrote {len(samples)} manifests of {args.sample_size} assignment logs")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    drift = DriftSpec(dL0=args.dL0, dT=args.dT, dG=args.dG, dS=args.dS, dF=args.dF)
    cfg = SynthConfig(args.n_students, args.n_kcs, args.steps, random_truths(args.n_kcs, args.seed),
                      drift, args.seed, base_year=args.base_year)
    for y in range(args.n_years):
        store, traces = simulate_year(cfg, y, return_traces=True)
        write_csv(store, out / f"{store.year_label}.csv")
        (out / f"truth_{store.year_label}.json").write_text(
            truth_json(cfg, y, traces if args.traces else None))
        print(f"{store.year_label}: {len(store)} rows")
    return 0


def _sample_for(args, stores, label):
    if args.manifest:
        return sample_from_manifest(stores[label], json.loads(Path(args.manifest).read_text()))
    seed = harness.job_seed(args.seed, "sample", label)
    return sample_assignment_logs(stores[label], args.sample_index + 1, args.sample_size, seed)[args.sample_index]


def cmd_train(args) -> int:
    _apply_test_scale(args)
    stores = _filtered(_load_years(args.data_dir), args.min_assignments)
    label = args.year or next(iter(stores))
    sample = _sample_for(args, stores, label)
    spec = _specs(args)[0]
    model = harness.fit_model(spec, sample, harness.job_seed(args.seed, spec.family, label, sample.sample_id))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffix = "ktm" if spec.family in DEEP_FAMILIES else "json"
    path = out / f"{spec.family}_{label}_s{sample.sample_id:02d}.{suffix}"
    harness.save_model(model, path)
    print(f"saved {path} ({model.count_params()} trainable parameters)")
    return 0


def cmd_eval(args) -> int:
    _apply_test_scale(args)
    model = harness.load_model(args.model)
    stores = _filtered(_load_years(args.data_dir), args.min_assignments)
    label = args.year or next(iter(stores))
    data = harness.score(model, _sample_for(args, stores, label).rows)
    result = {"family": model.family, "year": label, "n_interactions": len(data),
              "auc": metrics.auc(data), "log_loss": metrics.log_loss(data), "f1": metrics.f1_score(data)}
    print(json.dumps(result, indent=1))
    return 0


def cmd_tune(args) -> int:
    stores = _filtered(_load_years(args.data_dir), args.min_assignments or 100)
    val = harness.build_validation_sample(stores.values(), args.validation_size, args.seed)
    best = {}
    log_rows = []
    for fam in args.families:
        if fam not in DEEP_FAMILIES:
            continue
        hyper, trials = harness.tune_hyperparams(fam, val, args.n_trials, args.seed,
                                                 max_train_epochs=args.max_train_epochs)
        best[fam] = hyper.to_dict()
        log_rows += [{"family": fam, **t.hyper.to_dict(), "fold_aucs": list(t.fold_aucs),
                      "mean_auc": t.mean_auc} for t in trials]
        print(f"{fam}: best mean AUC {max(t.mean_auc for t in trials):.4f} -> {best[fam]}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "hyperparams.json").write_text(json.dumps(best, indent=1))
    (out / "trials.json").write_text(json.dumps({"note": harness.TUNER_NOTE, "trials": log_rows}, indent=1))
    return 0


def cmd_matrix(args) -> int:
    _apply_test_scale(args)
    t0 = time.time()
    stores = _filtered(_load_years(args.data_dir, args.years), args.min_assignments)
    samples = {
        label: sample_assignment_logs(store, args.samples_per_year, args.sample_size,
                                      harness.job_seed(args.seed, "sample", label))
        for label, store in stores.items()
    }
    records = harness.run_matrix(samples, _specs(args), args.workers, test_mode=args.test_scale)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.csv").write_text(harness.records_to_csv(records), encoding="utf-8")
    print(f"{len(records)} records in {time.time() - t0:.1f}s -> {out / 'records.csv'}")
    return 0


def cmd_report(args) -> int:
    records = harness.read_records_csv(args.records)
    rep = harness.aggregate_report(records, args.families)
    harness.write_report(rep, records, args.out_dir)
    print(rep.to_text())
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    B, T, V, d, H = 2, 4, 3, 4, 2
    from .logstore import StudentSequence

    seqs = [StudentSequence(f"s{i}", rng.integers(V, size=T), rng.integers(V, size=T),
                            rng.integers(2, size=T), np.arange(T)) for i in range(B)]
    batch = make_batches(seqs, T, B, "KC", shuffle=False)[0]
    toy = Hyperparams(T, B, d, 1, 0.0, 1e-3, num_heads=H)
    worst = 0.0
    for fam, params in (("DKT", init_dkt(V, d, rng)), ("SAKT-KC", init_sakt(V, d, T, rng))):
        names = list(params)
        err = nc.grad_check(lambda ts: batch_loss(fam, dict(zip(names, ts)), batch, toy),
                            [params[k] for k in names], args.eps)
        worst = max(worst, err)
        print(f"{fam:<8} max relative error {err:.3e}  {'PASS' if err < args.tol else 'FAIL'}")
    return 0 if worst < args.tol else 1


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ktdrift", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, families="BKT,PFA,DKT,SAKT-KC,SAKT-E"):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--data-dir", default="data")
        sp.add_argument("--out-dir", default="out")
        sp.add_argument("--families", type=_families, default=_families(families))
        sp.add_argument("--years", type=lambda s: [y.strip() for y in s.split(",")], default=None)
        sp.add_argument("--samples-per-year", type=int, default=None)
        sp.add_argument("--sample-size", type=int, default=None)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--test-scale", action="store_true",
                        help="shrink samples, sample sizes and deep models for quick runs")
        sp.add_argument("--min-assignments", type=int, default=None,
                        help="drop problem sets assigned fewer times than this (default 100)")
        sp.add_argument("--hyperparams", default=None, help="JSON file of per-family hyperparameters")
        return sp

    sp = common(sub.add_parser("ingest", help="validate raw CSV logs"))
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--year", default=None)
    sp.set_defaults(func=cmd_ingest)

    common(sub.add_parser("filter", help="apply eligibility filters")).set_defaults(func=cmd_filter)
    common(sub.add_parser("sample", help="write assignment-log sample manifests")).set_defaults(func=cmd_sample)

    sp = common(sub.add_parser("synth", help="generate synthetic drifting years"))
    sp.add_argument("--n-years", type=int, default=5)
    sp.add_argument("--n-students", type=int, default=200)
    sp.add_argument("--n-kcs", type=int, default=10)
    sp.add_argument("--steps", type=int, default=10)
    sp.add_argument("--base-year", type=int, default=2019)
    for name in ("dL0", "dT", "dG", "dS", "dF"):
        sp.add_argument(f"--{name}", type=float, default=0.0)
    sp.add_argument("--traces", action="store_true", help="include latent mastery traces in truth files")
    sp.set_defaults(func=cmd_synth)

    for name, func, helptext in (("train", cmd_train, "fit one model on one sample"),
                                 ("eval", cmd_eval, "score a saved model on one sample")):
        sp = common(sub.add_parser(name, help=helptext), families="BKT")
        sp.add_argument("--year", dest="year", default=None)
        sp.add_argument("--manifest", default=None)
        sp.add_argument("--sample-index", type=int, default=0)
        if name == "eval":
            sp.add_argument("--model", required=True)
        sp.set_defaults(func=func)

    sp = common(sub.add_parser("tune", help="quasi-random hyperparameter search"), families="DKT,SAKT-KC,SAKT-E")
    sp.add_argument("--n-trials", type=int, default=50)
    sp.add_argument("--validation-size", type=int, default=100_000)
    sp.add_argument("--max-train-epochs", type=int, default=None)
    sp.set_defaults(func=cmd_tune)

    common(sub.add_parser("matrix", help="full within-year and cross-year grid")).set_defaults(func=cmd_matrix)

    sp = common(sub.add_parser("report", help="aggregate records into tables"))
    sp.add_argument("--records", required=True)
    sp.set_defaults(func=cmd_report, families=None)

    sp = common(sub.add_parser("gradcheck", help="finite-difference check of DKT and SAKT losses"))
    sp.add_argument("--eps", type=float, default=1e-6)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
