"""Cost-coefficient sweep: trains one agent per (lambda, seed) and writes sweep.csv and f1_vs_count.csv.

    AFA_THREADS=4 python3 scripts/lambda_sweep.py [--out runs/sweep] [--config configs/sweep.json]
"""

import argparse
import csv
import sys
from pathlib import Path

from afa.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--config", default="configs/sweep.json")
    a = ap.parse_args()
    root = Path(a.out)
    data = str(root / "data" / "dataset.jsonl")
    clf = str(root / "classifier" / "classifier.json")
    for args in (
        ["gen-data", "--config", a.config, "--out", str(root / "data")],
        ["train-classifier", "--config", a.config, "--data", data, "--out", str(root / "classifier")],
        ["sweep", "--config", a.config, "--data", data, "--classifier-ckpt", clf, "--out", str(root / "sweep")],
    ):
        if main(args):
            sys.exit(1)
    with open(root / "sweep" / "sweep.csv") as fh:
        for row in csv.DictReader(fh):
            print(f"lambda={row['lambda']:>8}  bACC={row['bacc_mean'][:6]}  count={row['count'][:6]}")
