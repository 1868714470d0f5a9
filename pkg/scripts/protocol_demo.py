"""End-to-end demo of the evaluation protocol on synthetic drifting years.

Generates years with the synthetic simulator, runs the within-year and
cross-year matrix, and writes records plus report tables.

    python3 scripts/protocol_demo.py --out runs/demo --families BKT,PFA,DKT
"""

import argparse
from pathlib import Path

from ktdrift.cli import main as cli


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="runs/demo")
    p.add_argument("--families", default="BKT,PFA")
    p.add_argument("--years", type=int, default=4)
    p.add_argument("--students", type=int, default=300)
    p.add_argument("--samples-per-year", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()

    out = Path(args.out)
    data = out / "data"
    cli(["synth", "--out-dir", str(data), "--n-years", str(args.years), "--n-students", str(args.students),
         "--n-kcs", "12", "--steps", "8", "--dT", "-0.02", "--dG", "0.03", "--dS", "0.02",
         "--seed", str(args.seed)])
    per_year = args.students * 12
    size = per_year // args.samples_per_year
    cli(["matrix", "--test-scale", "--data-dir", str(data), "--out-dir", str(out), "--families", args.families,
         "--samples-per-year", str(args.samples_per_year), "--sample-size", str(size),
         "--seed", str(args.seed), "--workers", str(args.workers)])
    cli(["report", "--records", str(out / "records.csv"), "--out-dir", str(out / "report")])


if __name__ == "__main__":
    main()
