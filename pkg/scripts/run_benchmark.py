"""Synthetic end-to-end run: data, classifier, agent at lambda=0.05, test eval, pathway tree.

    python3 scripts/run_benchmark.py [--out runs/benchmark] [--config configs/benchmark.json]
"""

import argparse
import json
import sys
from pathlib import Path

from afa.cli import main


def run(args):
    code = main(args)
    if code:
        sys.exit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/benchmark")
    ap.add_argument("--config", default="configs/benchmark.json")
    ap.add_argument("--seed", default="0")
    a = ap.parse_args()
    root = Path(a.out)
    data = str(root / "data" / "dataset.jsonl")
    clf = str(root / "classifier" / "classifier.json")
    agent = str(root / "agent" / "agent.json")
    common = ["--config", a.config, "--seed", a.seed]
    run(["gen-data", "--config", a.config, "--out", str(root / "data")])
    run(["train-classifier", *common, "--data", data, "--out", str(root / "classifier")])
    run(["eval", *common, "--data", data, "--classifier-ckpt", clf, "--out", str(root / "eval_full")])
    run(["train-agent", *common, "--data", data, "--classifier-ckpt", clf, "--out", str(root / "agent")])
    run(["eval", *common, "--data", data, "--classifier-ckpt", clf, "--agent-ckpt", agent,
         "--out", str(root / "eval_agent")])
    run(["pathway", *common, "--data", data, "--classifier-ckpt", clf, "--agent-ckpt", agent,
         "--out", str(root / "pathway")])
    full = json.loads((root / "eval_full" / "eval_report.json").read_text())
    rl = json.loads((root / "eval_agent" / "eval_report.json").read_text())
    print(f"full acquisition bACC {full['bacc']:.4f}; agent bACC {rl['bacc']:.4f} "
          f"with mean count {rl['acquired_count_mean']:.3f} ({100 * rl['acquired_ratio']:.1f}% of slots)")
