"""Progress-potential traces and the sequence primitives every metric uses."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from opdkit import kernels
from opdkit.errors import EmptyTrace, NonFinite, OutOfRange, TraceError

logger = logging.getLogger(__name__)

TRACE_FIELDS = ("episode_id", "task_id", "policy_id", "success", "potentials")


class ValidationPolicy(str, enum.Enum):
    STRICT = "strict"
    CLAMP = "clamp"


@dataclass(frozen=True, eq=False)
class PotentialTrace:
    """Potentials Phi_0..Phi_T of one episode, each in [0, 1].

    ``values`` is a read-only float64 array. ``clamped`` counts values that
    were clipped into range during validation.
    """

    values: np.ndarray
    episode_id: str = ""
    task_id: str = ""
    policy_id: str | None = None
    success: bool | None = None
    clamped: int = 0

    @property
    def T(self) -> int:
        return len(self.values) - 1

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, PotentialTrace):
            return NotImplemented
        return (
            np.array_equal(self.values, other.values)
            and (self.episode_id, self.task_id, self.policy_id, self.success, self.clamped)
            == (other.episode_id, other.task_id, other.policy_id, other.success, other.clamped)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TraceDerived:
    increments: np.ndarray
    net_progress: float
    total_variation: float
    running_max: np.ndarray


def validate_trace(
    raw: Sequence[float],
    policy: ValidationPolicy | str = ValidationPolicy.CLAMP,
    *,
    episode_id: str = "",
    task_id: str = "",
    policy_id: str | None = None,
    success: bool | None = None,
) -> PotentialTrace:
    """Check a raw judge trace and wrap it as a :class:`PotentialTrace`.

    Non-finite values are always rejected. Out-of-range values raise
    :class:`OutOfRange` under ``strict`` and are clipped (and counted) under
    ``clamp``. The input is never modified.
    """
    policy = ValidationPolicy(policy)
    try:
        arr = np.array(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise TraceError(f"potentials are not numeric: {exc}") from None
    if arr.ndim != 1:
        raise TraceError("potentials must be a flat sequence")
    if arr.size == 0:
        raise EmptyTrace()
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise NonFinite(int(bad[0]))
    outside = np.flatnonzero((arr < 0.0) | (arr > 1.0))
    clamped = 0
    if outside.size:
        if policy is ValidationPolicy.STRICT:
            i = int(outside[0])
            raise OutOfRange(i, float(arr[i]))
        clamped = int(outside.size)
        np.clip(arr, 0.0, 1.0, out=arr)
        logger.warning("episode %r: clamped %d potential(s) into [0, 1]", episode_id, clamped)
    arr.setflags(write=False)
    return PotentialTrace(arr, episode_id, task_id, policy_id, success, clamped)


def as_trace(trace) -> PotentialTrace:
    """Accept a PotentialTrace or a bare sequence (validated strictly)."""
    if isinstance(trace, PotentialTrace):
        return trace
    return validate_trace(trace, ValidationPolicy.STRICT)


def derive(trace) -> TraceDerived:
    trace = as_trace(trace)
    v = trace.values
    inc = np.diff(v)
    inc.setflags(write=False)
    rmax = kernels.running_max(v)
    rmax.setflags(write=False)
    return TraceDerived(
        increments=inc,
        net_progress=float(v[-1] - v[0]),
        total_variation=kernels.total_variation(v),
        running_max=rmax,
    )


# --- JSON Lines ingestion -------------------------------------------------


@dataclass
class RawTrace:
    """One parsed line of a trace file, not yet range-validated."""

    episode_id: str
    task_id: str
    potentials: list
    policy_id: str | None = None
    success: bool | None = None
    line: int = 0

    def validate(self, policy: ValidationPolicy | str = ValidationPolicy.CLAMP) -> PotentialTrace:
        return validate_trace(
            self.potentials,
            policy,
            episode_id=self.episode_id,
            task_id=self.task_id,
            policy_id=self.policy_id,
            success=self.success,
        )


@dataclass
class LineError:
    line: int
    message: str
    episode_id: str | None = None

    def to_dict(self) -> dict:
        return {"line": self.line, "episode_id": self.episode_id, "error": self.message}


@dataclass
class TraceFile:
    traces: list[RawTrace] = field(default_factory=list)
    errors: list[LineError] = field(default_factory=list)


def parse_trace_line(obj: dict, line: int = 0) -> RawTrace:
    if not isinstance(obj, dict):
        raise TraceError("trace line is not a JSON object")
    unknown = sorted(set(obj) - set(TRACE_FIELDS))
    if unknown:
        logger.warning("line %d: ignoring unknown field(s) %s", line, ", ".join(unknown))
    for key in ("episode_id", "task_id", "potentials"):
        if key not in obj:
            raise TraceError(f"missing field {key!r}")
    pots = obj["potentials"]
    if not isinstance(pots, list):
        raise TraceError("'potentials' must be a list")
    success = obj.get("success")
    if success is not None and not isinstance(success, bool):
        raise TraceError("'success' must be a boolean or null")
    policy_id = obj.get("policy_id")
    return RawTrace(
        episode_id=str(obj["episode_id"]),
        task_id=str(obj["task_id"]),
        potentials=[_number(x) for x in pots],
        policy_id=None if policy_id is None else str(policy_id),
        success=success,
        line=line,
    )


def _number(x) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        if x is None:
            return math.nan
        raise TraceError(f"non-numeric potential {x!r}")
    return float(x)


def read_traces(path: str | Path) -> TraceFile:
    """Read a JSON Lines trace file; malformed lines become :class:`LineError`."""
    out = TraceFile()
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            obj = None
            try:
                obj = json.loads(text)
                out.traces.append(parse_trace_line(obj, lineno))
            except (json.JSONDecodeError, TraceError) as exc:
                eid = obj.get("episode_id") if isinstance(obj, dict) else None
                out.errors.append(LineError(lineno, str(exc), eid))
    return out


def trace_to_json(trace: PotentialTrace) -> dict:
    return {
        "episode_id": trace.episode_id,
        "task_id": trace.task_id,
        "policy_id": trace.policy_id,
        "success": trace.success,
        "potentials": trace.values.tolist(),
    }


def write_traces(path: str | Path, traces: Iterable[PotentialTrace | dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            obj = trace_to_json(t) if isinstance(t, PotentialTrace) else t
            fh.write(json.dumps(obj) + "\n")
