"""Run all eight routing methods on identical episodes and print the comparison table.

    python scripts/run_ablation.py --out runs/ablation --jobs 4 [--config my.yaml]
"""

from __future__ import annotations

import argparse
import logging

from icr.config import load_config
from icr.pipeline import Pipeline


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    pipe = Pipeline(load_config(args.config), args.out, args.jobs)
    path = pipe.ablate()
    print((path.parent / "table2.txt").read_text())
    print(f"rows: {path}\nper-task series: {path.parent / 'ablation_series.csv'}")


if __name__ == "__main__":
    main()
