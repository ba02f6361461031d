#!/usr/bin/env python3
"""Sweep the identity-classification weight of the FST loss.

For each weight the FST comparison is rerun and one CSV row is written with
the seed wins on attribution stability and the compressed-test AUCs.
"""

import argparse
import csv
import sys
from pathlib import Path

from fstmatch.harness import pipelines
from fstmatch.harness.config import ExperimentConfig, from_dict, load_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--weights", type=float, nargs="+", default=[0.5, 1.0, 2.0, 5.0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    args = ap.parse_args()

    base = load_config(args.config) if args.config else ExperimentConfig()
    base.seeds = [int(s) for s in args.seeds.split(",")]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.writer(fh)
    writer.writerow(["lambda_id", "delta_wins", "fst_delta", "baseline_delta", "fst_auc_compressed",
                     "baseline_auc_compressed"])
    for lam in args.weights:
        cfg = from_dict(base.to_dict())
        cfg.fst.weights.lambda_s = cfg.fst.weights.lambda_t = lam
        s = pipelines.run_fst_comparison(cfg).summary
        writer.writerow([lam, int(s["fst_delta_wins"]["mean"]), s["fst_delta"]["mean"], s["baseline_delta"]["mean"],
                         s["fst_auc_compressed"]["mean"], s["baseline_auc_compressed"]["mean"]])
        fh.flush()
    if args.out:
        fh.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
