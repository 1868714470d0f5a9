"""Desk-scale experiments on synthetic drifting populations."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from . import metrics
from .harness import ModelSpec, fit_model, job_seed, score
from .models import FAMILIES
from .models.deep import Hyperparams
from .synth import DriftSpec, SynthConfig, random_truths, simulate_year

log = logging.getLogger(__name__)

# modest deep settings that train in minutes on one core
DRIFT_HYPER = {
    "DKT": Hyperparams(50, 32, 32, 4, 0.1, 5e-3, reg_lambda=1e-6),
    "SAKT-KC": Hyperparams(50, 32, 32, 4, 0.1, 3e-3, num_heads=4, learn_decay_rate=0.9),
    "SAKT-E": Hyperparams(50, 32, 32, 4, 0.1, 3e-3, num_heads=4, learn_decay_rate=0.9),
}


@dataclass
class DriftResult:
    auc_same_year: dict = field(default_factory=dict)
    auc_drifted: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def drop(self, family: str) -> float:
        return self.auc_same_year[family] - self.auc_drifted[family]


def drift_experiment(n_students: int = 2000, n_kcs: int = 20, steps: int = 10, drift_years: int = 3,
                     drift: DriftSpec = DriftSpec(dT=-0.03, dG=0.04, dS=0.03), families=FAMILIES,
                     n_eval_students: int = 1000, seed: int = 0, hyper=None) -> DriftResult:
    """Train on synthetic year 0, score on a fresh year-0 cohort and on year ``drift_years``.

    Both evaluation cohorts come from a second seed with the same ground truth,
    so the only difference between them is the parameter drift.
    """
    hyper = dict(DRIFT_HYPER, **(hyper or {}))
    truths = random_truths(n_kcs, seed)
    train_cfg = SynthConfig(n_students, n_kcs, steps, truths, drift, seed)
    eval_cfg = SynthConfig(n_eval_students, n_kcs, steps, truths, drift, seed + 1)
    train = simulate_year(train_cfg, 0)
    same = simulate_year(eval_cfg, 0)
    later = simulate_year(eval_cfg, drift_years)
    out = DriftResult()
    for fam in families:
        t0 = time.time()
        model = fit_model(ModelSpec(fam, hyper.get(fam), seed), train.rows, job_seed(seed, "drift", fam))
        out.auc_same_year[fam] = metrics.auc(score(model, same.rows))
        out.auc_drifted[fam] = metrics.auc(score(model, later.rows))
        out.seconds[fam] = time.time() - t0
        log.info("%s: AUC %.4f -> %.4f (%.0fs)", fam, out.auc_same_year[fam], out.auc_drifted[fam],
                 out.seconds[fam])
    return out
