"""
Reports - CSV/YAML writers and the benchmark run ledger

All numeric CSV output goes through write_frame so every file carries 17
significant digits. RunLedger collects one record per (seed, instance, label)
run and turns them into per-label medians for the scenario summary.
"""

import math
import os
from typing import Dict, Iterable, List, Optional, Sequence

import pandas as pd
import yaml

FLOAT_FORMAT = "%.17g"
RULE = "=" * 70


def _ensure_parent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_frame(frame: pd.DataFrame, path: str):
    _ensure_parent(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_yaml(data: Dict, path: str):
    _ensure_parent(path)
    with open(path, "w") as f:
        yaml.safe_dump(data, f, sort_keys=True, default_flow_style=False)


def read_yaml(path: str) -> Dict:
    with open(path, "r") as f:
        return yaml.safe_load(f) or {}


def format_banner(title: str, lines: Iterable[str]) -> str:
    body = "\n".join(f"  {line}" for line in lines)
    return f"{RULE}\n{title}\n{RULE}\n{body}\n{RULE}"


class RunLedger:
    """Benchmark runs keyed by (seed, instance, label), aggregated to medians."""

    KEY = ("seed", "instance", "label")

    def __init__(self, scenario: str):
        self.scenario = scenario
        self._runs: Dict[tuple, Dict] = {}
        self.failures: List[Dict] = []

    def __len__(self):
        return len(self._runs)

    def record(self, seed: int, instance: int, label: str, **metrics):
        self._runs[(seed, instance, label)] = {"seed": seed, "instance": instance, "label": label, **metrics}

    def record_failure(self, seed: int, instance: int, label: str, message: str):
        self.failures.append({"seed": seed, "instance": instance, "label": label, "error": message})

    def to_frame(self) -> pd.DataFrame:
        """Runs in key order, so the file never depends on completion order."""
        rows = [self._runs[key] for key in sorted(self._runs)]
        return pd.DataFrame(rows)

    def medians(self, columns: Sequence[str]) -> pd.DataFrame:
        frame = self.to_frame()
        if frame.empty:
            return pd.DataFrame(columns=["label", "runs", *columns])
        present = [c for c in columns if c in frame.columns]
        grouped = frame.groupby("label", sort=True)
        out = grouped[present].median(numeric_only=True)
        out.insert(0, "runs", grouped.size())
        return out.reset_index()

    def median(self, label: str, column: str) -> float:
        frame = self.to_frame()
        if frame.empty or column not in frame.columns:
            return math.nan
        values = frame.loc[frame["label"] == label, column].dropna()
        return float(values.median()) if len(values) else math.nan

    def save(self, out_dir: str, columns: Optional[Sequence[str]] = None):
        os.makedirs(out_dir, exist_ok=True)
        frame = self.to_frame()
        write_frame(frame, os.path.join(out_dir, "runs.csv"))
        if columns is None:
            columns = [c for c in frame.columns if c not in self.KEY]
        write_frame(self.medians(columns), os.path.join(out_dir, "medians.csv"))
        if self.failures:
            failures = sorted(self.failures, key=lambda r: (r["seed"], r["instance"], r["label"]))
            write_frame(pd.DataFrame(failures), os.path.join(out_dir, "failures.csv"))
