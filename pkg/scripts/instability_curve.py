#!/usr/bin/env python3
"""Instability of detection-encoder maps across a range of permutation counts.

Writes ``instability.dat`` (T, mean, std over seeds) ready for gnuplot or
matplotlib, plus the full report.
"""

import argparse
from pathlib import Path

from fstmatch.harness import pipelines
from fstmatch.harness.config import ExperimentConfig, load_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--T", type=int, nargs="+", default=[5, 10, 20, 30, 50, 100, 200])
    ap.add_argument("--images", type=int, default=50)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", type=Path, default=Path("runs/instability"))
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg.seeds = [int(s) for s in args.seeds.split(",")]
    cfg.shapley.instability_samples = sorted(args.T)
    cfg.shapley.instability_images = args.images
    report = pipelines.run_instability(cfg)
    report.write(args.out)
    for T, mean, std in report.series["instability"]["rows"]:
        print(f"T={T:<5d} instability {mean:.4f} +- {std:.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
