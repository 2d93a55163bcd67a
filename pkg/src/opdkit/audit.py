"""Episode-to-policy auditing and report emission.

Conventions used throughout:

* percentages are exactly ``100 * x`` of the underlying [0, 1] quantity;
  rounding (2 decimals) happens only when writing CSV;
* standard deviations are population deviations (divide by n);
* a z-score over values that are all equal is 0;
* success flags come from the input, never from the potentials.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from opdkit.errors import EmptyInput, OpdError
from opdkit.metrics import OpdConfig, OpdRecord, opd_record
from opdkit.potential import PotentialTrace, RawTrace, ValidationPolicy

logger = logging.getLogger(__name__)

THRESHOLDS = (0.25, 0.5, 0.75, 1.0)
QUALITY_METRICS = ("MP", "PPL", "CRA", "STR")
FLIPPED = ("CRA", "STR")
SUCCESS_METRICS = ("PPL", "CRA", "STR")
MIN_FAILURES = 3
PRECISION = 2


def mc_label(q: float) -> str:
    return f"MC@{round(q * 100):d}"


def _mean(xs: Sequence[float]) -> float:
    s = 0.0
    for x in xs:
        s += x
    return s / len(xs)


def _pstd(xs: Sequence[float]) -> float:
    m = _mean(xs)
    return math.sqrt(_mean([(x - m) ** 2 for x in xs]))


def _key(policy_id) -> str:
    return "" if policy_id is None else str(policy_id)


# --- per-episode ---------------------------------------------------------


@dataclass
class AuditFailure:
    index: int
    episode_id: str | None
    error: str

    def to_dict(self) -> dict:
        return {"index": self.index, "episode_id": self.episode_id, "error": self.error}


@dataclass
class AuditResult:
    records: list[OpdRecord] = field(default_factory=list)
    failures: list[AuditFailure] = field(default_factory=list)


def audit_episodes(
    traces: Sequence[PotentialTrace | RawTrace],
    config: OpdConfig | None = None,
    policy: ValidationPolicy | str = ValidationPolicy.CLAMP,
    jobs: int = 1,
) -> AuditResult:
    """One :class:`OpdRecord` per trace, in input order; bad traces are reported, not fatal."""
    config = config or OpdConfig()

    def one(item):
        tr = item.validate(policy) if isinstance(item, RawTrace) else item
        return opd_record(tr, config)

    def safe(item):
        try:
            return one(item), None
        except (OpdError, ValueError) as exc:
            return None, f"{type(exc).__name__}: {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(safe, traces))
    else:
        outcomes = [safe(t) for t in traces]
    result = AuditResult()
    for i, (item, (rec, err)) in enumerate(zip(traces, outcomes)):
        if err is None:
            result.records.append(rec)
        else:
            result.failures.append(AuditFailure(i, getattr(item, "episode_id", None), err))
    return result


# --- aggregation ---------------------------------------------------------


def _groups(records: Iterable[OpdRecord]) -> dict:
    out: dict = {}
    for r in sorted(records, key=lambda r: (r.task_id, _key(r.policy_id), r.episode_id)):
        out.setdefault((r.task_id, _key(r.policy_id)), []).append(r)
    return out


def reachability(records: Sequence[OpdRecord], thresholds: Sequence[float] = THRESHOLDS) -> dict:
    """Percentage of episodes with MC >= q, per threshold q."""
    if not records:
        raise EmptyInput("reachability needs at least one record")
    n = len(records)
    out = {}
    for q in thresholds:
        hits = sum(1 for r in records if r.mc >= q - 1e-12)
        out[mc_label(q)] = 100.0 * (hits / n)
    return out


def audit_table(records: Sequence[OpdRecord], thresholds: Sequence[float] = THRESHOLDS) -> list[dict]:
    """Rows per (task, policy): MC@q, then mean MP/PPL/CRA/STR, all x100."""
    rows = []
    for (task, pol), recs in _groups(records).items():
        row = {"task": task, "policy": pol}
        row.update(reachability(recs, thresholds))
        for m in QUALITY_METRICS:
            vals = [r.metric(m) for r in recs if r.metric(m) is not None]
            row[m] = 100.0 * _mean(vals) if vals else None
        row["episodes"] = len(recs)
        flags = [r.success for r in recs if r.success is not None]
        row["success_rate"] = 100.0 * (sum(flags) / len(flags)) if flags else None
        rows.append(row)
    return rows


def audit_columns(thresholds: Sequence[float] = THRESHOLDS) -> list[str]:
    return ["task", "policy", *[mc_label(q) for q in thresholds], *QUALITY_METRICS, "episodes", "success_rate"]


def reachability_long(records: Sequence[OpdRecord], thresholds: Sequence[float] = THRESHOLDS) -> list[dict]:
    rows = []
    for (task, pol), recs in _groups(records).items():
        for q in thresholds:
            rows.append({"task": task, "policy": pol, "threshold": q,
                         "value": reachability(recs, [q])[mc_label(q)]})
    return rows


@dataclass
class SuccessConditioned:
    rows: list[dict]
    absent: list[dict]


def success_conditioned(records: Sequence[OpdRecord]) -> SuccessConditioned:
    """Mean and population std of PPL/CRA/STR over successful episodes (x100).

    Groups with no successful episode are listed in ``absent`` instead of
    being reported as zeros.
    """
    rows, absent = [], []
    for (task, pol), recs in _groups(records).items():
        wins = [r for r in recs if r.success is True]
        if not wins:
            absent.append({"task": task, "policy": pol})
            continue
        for m in SUCCESS_METRICS:
            vals = [r.metric(m) for r in wins if r.metric(m) is not None]
            if not vals:
                continue
            rows.append({
                "task": task, "policy": pol, "metric": m,
                "mean": 100.0 * _mean(vals), "std": 100.0 * _pstd(vals), "n": len(vals),
            })
    return SuccessConditioned(rows, absent)


def normalize_policy_means(means: Mapping[str, float], flip: bool = False) -> dict:
    """Z-scores of per-policy means (population std; all-equal values give 0).

    With ``flip`` the means are negated first, so lower raw values score higher.
    """
    names = list(means)
    vals = [-means[n] if flip else means[n] for n in names]
    # two-pass centering: the correction term removes the rounding error of
    # the first mean, which matters when the spread is tiny next to the values
    mu = _mean(vals)
    dev = [v - mu for v in vals]
    corr = _mean(dev)
    dev = [d - corr for d in dev]
    # equal values, or a spread that underflows, carry no signal
    big = max(abs(d) for d in dev)
    if max(vals) == min(vals) or big == 0:
        return {n: 0.0 for n in names}
    # scale before squaring so tiny spreads do not underflow
    dev = [d / big for d in dev]
    sd = math.sqrt(_mean([d * d for d in dev]))
    return {n: d / sd for n, d in zip(names, dev)}


@dataclass
class FingerprintRow:
    task: str
    policy: str
    metric: str
    z: float | None  # None -> N/A
    raw_mean: float | None
    failures: int

    def to_dict(self) -> dict:
        return {"task": self.task, "policy": self.policy, "metric": self.metric,
                "z": self.z, "raw_mean": self.raw_mean, "failures": self.failures}


def fingerprint(records: Sequence[OpdRecord], min_failures: int = MIN_FAILURES) -> list[FingerprintRow]:
    """Failure-only fingerprints: per task, z-normalize each policy's mean metric.

    Only episodes flagged ``success is False`` count. A policy with fewer
    than ``min_failures`` failures gets N/A; the rest are normalized among
    themselves, which needs at least two of them. CRA and STR are negated
    before normalizing so that larger is better everywhere.
    """
    by_task: dict = {}
    # every (task, policy) gets rows; those without enough failures are N/A
    for (task, pol), recs in _groups(records).items():
        by_task.setdefault(task, {})[pol] = [r for r in recs if r.success is False]
    rows = []
    for task in sorted(by_task):
        pols = by_task[task]
        for m in QUALITY_METRICS:
            means = {}
            for pol in sorted(pols):
                recs = pols[pol]
                vals = [r.metric(m) for r in recs if r.metric(m) is not None]
                if len(recs) >= min_failures and vals:
                    means[pol] = 100.0 * _mean(vals)
            z = normalize_policy_means(means, flip=m in FLIPPED) if len(means) >= 2 else {}
            for pol in sorted(pols):
                rows.append(FingerprintRow(task, pol, m, z.get(pol), means.get(pol), len(pols[pol])))
    return rows


# --- emission ------------------------------------------------------------


@dataclass
class AuditReport:
    table: list[dict]
    reachability: list[dict]
    success: SuccessConditioned
    fingerprint: list[FingerprintRow]
    failures: list[AuditFailure] = field(default_factory=list)
    thresholds: tuple = THRESHOLDS
    config: dict = field(default_factory=dict)
    min_failures: int = MIN_FAILURES

    @property
    def metadata(self) -> dict:
        return {
            "percent_scale": "100 * value, unrounded in JSON; CSV rounded to 2 decimals",
            "std": "population",
            "zero_variance_z": 0.0,
            "fingerprint_min_failures": self.min_failures,
            "fingerprint_flipped": list(FLIPPED),
            "success_source": "input flags",
        }

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "config": self.config,
            "thresholds": list(self.thresholds),
            "audit_table": self.table,
            "reachability": self.reachability,
            "success_conditioned": self.success.rows,
            "success_absent": self.success.absent,
            "fingerprint": [r.to_dict() for r in self.fingerprint],
            "failures": [f.to_dict() for f in self.failures],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> AuditReport:
        return cls(
            table=list(d["audit_table"]),
            reachability=list(d["reachability"]),
            success=SuccessConditioned(list(d["success_conditioned"]), list(d["success_absent"])),
            fingerprint=[FingerprintRow(**r) for r in d["fingerprint"]],
            failures=[AuditFailure(**f) for f in d["failures"]],
            thresholds=tuple(d["thresholds"]),
            config=dict(d["config"]),
            min_failures=d["metadata"]["fingerprint_min_failures"],
        )


def build_report(
    result: AuditResult, thresholds: Sequence[float] = THRESHOLDS, min_failures: int = MIN_FAILURES,
    config: OpdConfig | None = None,
) -> AuditReport:
    recs = result.records
    return AuditReport(
        table=audit_table(recs, thresholds),
        reachability=reachability_long(recs, thresholds),
        success=success_conditioned(recs),
        fingerprint=fingerprint(recs, min_failures),
        failures=list(result.failures),
        thresholds=tuple(thresholds),
        config=(config or OpdConfig()).snapshot(),
        min_failures=min_failures,
    )


def _fmt(v, precision: int = PRECISION):
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.{precision}f}"
    return v


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Mapping]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


REPORT_FILES = ("audit_table.csv", "reachability.csv", "success_conditioned.csv", "fingerprint.csv")


def emit_report(report: AuditReport, out_dir: str | Path, formats: Sequence[str] = ("csv", "json")) -> list[Path]:
    """Write the audit table and the long-format plot data.

    CSV files: ``audit_table.csv`` (one row per task and policy), and long-format
    ``reachability.csv``, ``success_conditioned.csv``, ``fingerprint.csv``.
    JSON: ``audit_report.json`` holding everything at full precision.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        if "csv" in formats:
            paths.append(write_csv(out / "audit_table.csv", audit_columns(report.thresholds), report.table))
            paths.append(write_csv(out / "reachability.csv", ["task", "policy", "threshold", "value"],
                                   report.reachability))
            paths.append(write_csv(out / "success_conditioned.csv",
                                   ["task", "policy", "metric", "mean", "std", "n"], report.success.rows))
            paths.append(write_csv(out / "fingerprint.csv",
                                   ["task", "policy", "metric", "z", "raw_mean", "failures"],
                                   [r.to_dict() for r in report.fingerprint]))
        if "json" in formats:
            p = out / "audit_report.json"
            p.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
            paths.append(p)
    except OSError as exc:
        raise OpdError(f"cannot write report to {out}: {exc}") from exc
    return paths


def read_report(path: str | Path) -> AuditReport:
    return AuditReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
