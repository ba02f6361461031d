#!/usr/bin/env python3
"""Run every experiment on one config and write reports plus a markdown digest.

    python3 scripts/run_all_experiments.py --out runs/all
    python3 scripts/run_all_experiments.py --config my.json --seeds 0,1 --skip fst
"""

import argparse
import logging
import time
from pathlib import Path

from fstmatch.harness import pipelines
from fstmatch.harness.config import ExperimentConfig, load_config
from fstmatch.harness.report import render

RUNS = {
    "instability": lambda cfg, d: pipelines.run_instability(cfg, d),
    "hyp1": lambda cfg, d: pipelines.run_hypothesis1(cfg, d, with_instability=False),
    "hyp2": lambda cfg, d: pipelines.run_hypothesis2(cfg, d),
    "hyp3": lambda cfg, d: pipelines.run_hypothesis3(cfg, d, include_fst=False),
    "fst": lambda cfg, d: pipelines.run_fst_comparison(cfg, d),
}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seeds", help="comma separated, overrides the config")
    ap.add_argument("--out", type=Path, default=Path("runs/all"))
    ap.add_argument("--skip", nargs="*", default=[], choices=tuple(RUNS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seeds:
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    args.out.mkdir(parents=True, exist_ok=True)
    digest, failed = [], []
    for name, run in RUNS.items():
        if name in args.skip:
            continue
        start = time.perf_counter()
        report = run(cfg, args.out / "models")
        report.write(args.out)
        logging.info("%s done in %.1f s", name, time.perf_counter() - start)
        digest.append(render(report))
        failed += [f"{name}.{k}" for k, ok in report.checks.items() if not ok]
    (args.out / "SUMMARY.md").write_text("\n\n".join(digest) + "\n")
    if failed:
        logging.warning("failed checks: %s", ", ".join(failed))
    return 2 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
