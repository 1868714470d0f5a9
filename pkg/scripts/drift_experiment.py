"""Train every family on synthetic year 0 and compare AUC on a fresh year-0 cohort vs a drifted year.

    python3 scripts/drift_experiment.py --students 2000 --years 3
"""

import argparse
import json
import logging

from ktdrift.experiments import drift_experiment
from ktdrift.models import FAMILIES
from ktdrift.synth import DriftSpec


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--students", type=int, default=2000)
    p.add_argument("--kcs", type=int, default=20)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--years", type=int, default=3)
    p.add_argument("--dT", type=float, default=-0.03)
    p.add_argument("--dG", type=float, default=0.04)
    p.add_argument("--dS", type=float, default=0.03)
    p.add_argument("--families", default=",".join(FAMILIES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write results here")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    res = drift_experiment(args.students, args.kcs, args.steps, args.years,
                           DriftSpec(dT=args.dT, dG=args.dG, dS=args.dS),
                           families=args.families.split(","), seed=args.seed)
    print(f"{'family':<8} {'AUC y0':>8} {'AUC y' + str(args.years):>8} {'drop':>7} {'secs':>6}")
    for fam in res.auc_same_year:
        print(f"{fam:<8} {res.auc_same_year[fam]:8.4f} {res.auc_drifted[fam]:8.4f} "
              f"{res.drop(fam):7.4f} {res.seconds[fam]:6.0f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"same_year": res.auc_same_year, "drifted": res.auc_drifted,
                       "seconds": res.seconds}, fh, indent=1)


if __name__ == "__main__":
    main()
