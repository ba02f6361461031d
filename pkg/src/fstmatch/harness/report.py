"""Experiment reports: JSON document + one CSV per table + gnuplot .dat series.

Reports hold no wall-clock data, so rerunning a config with the same seed
list reproduces every file byte for byte.  Timing goes to ``run_log.json``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__


def summarize(values) -> dict:
    vals = [float(v) for v in values]
    arr = np.asarray(vals)
    return {"mean": float(arr.mean()) if vals else math.nan,
            "std": float(arr.std(ddof=1)) if len(vals) > 1 else 0.0,
            "n": len(vals), "values": vals}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    seeds: list[int]
    tables: dict[str, list[dict]] = field(default_factory=dict)
    summary: dict[str, dict] = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)
    series: dict[str, dict] = field(default_factory=dict)
    figures: dict[str, dict] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.provenance.setdefault("tool_version", __version__)
        self.provenance.setdefault("seeds", list(self.seeds))

    def to_dict(self) -> dict:
        return _plain({"experiment": self.experiment, "config": self.config, "seeds": self.seeds,
                       "summary": self.summary, "checks": self.checks, "tables": self.tables,
                       "series": self.series, "figures": self.figures, "provenance": self.provenance})

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / f"{self.experiment}.json"]
        written[0].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        for name, rows in self.tables.items():
            if not rows:
                continue
            path = out / f"{self.experiment}_{name}.csv"
            columns = list(rows[0].keys())
            with open(path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
                w.writeheader()
                for row in rows:
                    w.writerow({k: _cell(row.get(k)) for k in columns})
            written.append(path)
        for name, s in self.series.items():
            path = out / f"{self.experiment}_{name}.dat"
            lines = ["# " + " ".join(s["columns"])]
            lines += [" ".join(_cell(v) for v in row) for row in s["rows"]]
            path.write_text("\n".join(lines) + "\n")
            written.append(path)
        return written

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        d = json.loads(Path(path).read_text())
        return cls(d["experiment"], d["config"], d["seeds"], d.get("tables", {}), d.get("summary", {}),
                   d.get("checks", {}), d.get("series", {}), d.get("figures", {}), d.get("provenance", {}))


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_cell(x) for x in v)
    return "" if v is None else str(v)


def render(report: ExperimentReport) -> str:
    """Markdown rendering of a report's summary and checks."""
    lines = [f"# {report.experiment}", "",
             f"seeds: {', '.join(str(s) for s in report.seeds)}  |  "
             f"version {report.provenance.get('tool_version', '?')}  |  "
             f"config {report.provenance.get('config_digest', '?')}", "",
             "| metric | mean | std | n |", "|---|---|---|---|"]
    for name, s in report.summary.items():
        lines.append(f"| {name} | {s['mean']:.4g} | {s['std']:.3g} | {s['n']} |")
    if report.checks:
        lines += ["", "| check | result |", "|---|---|"]
        lines += [f"| {k} | {'pass' if v else 'FAIL'} |" for k, v in report.checks.items()]
    return "\n".join(lines) + "\n"
