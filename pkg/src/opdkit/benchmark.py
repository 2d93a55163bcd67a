"""Pairwise progress-judgment accuracy, stratified by hop bin and data setting.

Averages are unweighted means over present cells: a bin average is the mean
of that bin's setting cells and the overall average is the mean of all
present cells. A cell is present when at least one of its pairs was judged
successfully; failed verdicts are counted apart and never enter a
denominator.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from opdkit.errors import IdMismatch
from opdkit.judges import JudgeVerdict
from opdkit.sampler import BINS, SETTINGS, ProgressPair

AVERAGING = "unweighted mean over present cells"


@dataclass
class Cell:
    correct: int = 0
    judged: int = 0
    failed: int = 0

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.judged if self.judged else None


@dataclass
class AccuracyTable:
    cells: dict = field(default_factory=dict)  # (bin, setting) -> Cell
    ties: int = 0

    def accuracy(self, bin_name: str, setting: str) -> float | None:
        cell = self.cells.get((bin_name, setting))
        return cell.accuracy if cell else None

    def present(self) -> list[tuple]:
        return [k for k in _cell_order() if k in self.cells and self.cells[k].judged > 0]

    def bin_average(self, bin_name: str) -> float | None:
        accs = [self.cells[k].accuracy for k in self.present() if k[0] == bin_name]
        return sum(accs) / len(accs) if accs else None

    @property
    def overall(self) -> float | None:
        accs = [self.cells[k].accuracy for k in self.present()]
        return sum(accs) / len(accs) if accs else None

    @property
    def judged(self) -> int:
        return sum(c.judged for c in self.cells.values())

    @property
    def failed(self) -> int:
        return sum(c.failed for c in self.cells.values())

    @property
    def failure_rate(self) -> float:
        total = self.judged + self.failed
        return self.failed / total if total else 0.0

    def to_dict(self) -> dict:
        return {
            "averaging": AVERAGING,
            "cells": [
                {"bin": b, "setting": s, "accuracy": c.accuracy, "correct": c.correct,
                 "judged": c.judged, "failed": c.failed}
                for (b, s) in _cell_order() if (c := self.cells.get((b, s))) is not None
            ],
            "bin_average": {b: self.bin_average(b) for b in BINS},
            "overall": self.overall,
            "failed": self.failed,
            "failure_rate": self.failure_rate,
            "ties": self.ties,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> AccuracyTable:
        t = cls(ties=d.get("ties", 0))
        for c in d["cells"]:
            t.cells[(c["bin"], c["setting"])] = Cell(c["correct"], c["judged"], c["failed"])
        return t


def _cell_order() -> list[tuple]:
    return [(b, s) for b in BINS for s in SETTINGS]


def _align(verdicts: Sequence[JudgeVerdict], pairs: Sequence[ProgressPair]):
    if len(verdicts) != len(pairs):
        raise IdMismatch(f"{len(verdicts)} verdicts for {len(pairs)} pairs")
    if all(v.id == p.id for v, p in zip(verdicts, pairs)):
        return list(zip(verdicts, pairs))
    by_id = {v.id: v for v in verdicts}
    if len(by_id) != len(verdicts) or set(by_id) != {p.id for p in pairs}:
        raise IdMismatch("verdict ids do not match pair ids")
    return [(by_id[p.id], p) for p in pairs]


def score(verdicts: Sequence[JudgeVerdict], pairs: Sequence[ProgressPair]) -> AccuracyTable:
    table = AccuracyTable()
    for v, p in _align(verdicts, pairs):
        cell = table.cells.setdefault((p.bin, p.setting), Cell())
        if not v.ok or v.direction is None:
            cell.failed += 1
            continue
        cell.judged += 1
        cell.correct += int(v.direction == p.label)
        table.ties += int(v.tie)
    return table


# --- comparison ----------------------------------------------------------


def _columns() -> list[str]:
    cols = ["judge"]
    for b in BINS:
        cols += [f"{b}/{s}" for s in SETTINGS] + [f"{b}/AVG"]
    return cols + ["AVG", "failed", "incomplete"]


@dataclass
class ComparisonReport:
    rows: list[dict]
    columns: list[str]

    def to_csv(self, precision: int = 2) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            out = []
            for c in self.columns:
                v = row.get(c)
                if v is None:
                    out.append("")
                elif isinstance(v, bool):
                    out.append("*" if v else "")
                elif isinstance(v, float):
                    out.append(f"{v:.{precision}f}")
                else:
                    out.append(v)
            w.writerow(out)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"averaging": AVERAGING, "columns": self.columns, "rows": self.rows}, indent=2)

    def write(self, out_dir: str | Path, stem: str = "accuracy") -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / f"{stem}.csv", out_dir / f"{stem}.json"]
        paths[0].write_text(self.to_csv(), encoding="utf-8")
        paths[1].write_text(self.to_json() + "\n", encoding="utf-8")
        return paths


def compare(tables: Mapping[str, AccuracyTable]) -> ComparisonReport:
    """Rank judges by overall average (descending), ties broken by name.

    ``incomplete`` is set when a judge lacks a cell some other judge has; its
    averages then cover only its present cells.
    """
    if not tables:
        raise ValueError("compare needs at least one table")
    union = set()
    for t in tables.values():
        union.update(t.present())
    rows = []
    for name, t in tables.items():
        row: dict = {"judge": name}
        for b in BINS:
            for s in SETTINGS:
                row[f"{b}/{s}"] = t.accuracy(b, s) if (b, s) in t.present() else None
            row[f"{b}/AVG"] = t.bin_average(b)
        row["AVG"] = t.overall
        row["failed"] = t.failed
        row["incomplete"] = not union.issubset(t.present())
        rows.append(row)
    rows.sort(key=lambda r: (-(r["AVG"] if r["AVG"] is not None else -1.0), r["judge"]))
    return ComparisonReport(rows, _columns())
