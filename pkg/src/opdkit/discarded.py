"""Rejected progress metrics, kept as documented foils.

Each function follows its textbook definition so the failure modes that got
it rejected (ill conditioning, sensitivity to step count or episode padding,
blindness to persistence) can be reproduced in tests. None of them feed
auditing decisions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from opdkit import kernels
from opdkit.errors import (
    ConfigError,
    DegenerateTrace,
    EmptySequence,
    NoReferences,
    TooShort,
    WindowTooLarge,
)
from opdkit.potential import as_trace

__all__ = [
    "DiscardedConfig",
    "ppe",
    "pti",
    "ead",
    "pj",
    "cs",
    "rr",
    "dtw_distance",
    "grdtw",
    "discarded_row",
]


@dataclass(frozen=True)
class DiscardedConfig:
    ppe_epsilon: float = 1e-8
    ead_epsilon: float = 0.05
    cs_window: int = 1
    grdtw_normalizer: float | None = None  # None -> max(len(trace), longest reference)

    def __post_init__(self):
        if not (self.ppe_epsilon > 0 and self.ead_epsilon > 0 and self.cs_window >= 1):
            raise ConfigError("discarded-metric parameters must be positive")
        if self.grdtw_normalizer is not None and not self.grdtw_normalizer > 0:
            raise ConfigError("grdtw_normalizer must be positive")


def ppe(trace, epsilon: float = 1e-8) -> float:
    """Progress path efficiency, ``1 / (sum |dPhi| + epsilon)``."""
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    return 1.0 / (kernels.total_variation(as_trace(trace).values) + epsilon)


def pti(trace) -> float:
    v = as_trace(trace).values
    s = 0.0
    for x in v.tolist():
        s += x
    return s / len(v)


def ead(trace, epsilon: float = 0.05) -> float:
    """Share of steps whose increment exceeds ``epsilon`` (one-sided, strict)."""
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    tr = as_trace(trace)
    if tr.T < 1:
        raise DegenerateTrace("EAD needs at least one step")
    return kernels.count_rises(tr.values, epsilon) / tr.T


def pj(trace) -> float:
    """Mean |dPhi_{t+1} - dPhi_t| over t = 1..T-2 (increments indexed from 0)."""
    tr = as_trace(trace)
    T = tr.T
    if T < 3:
        raise TooShort(f"PJ needs T >= 3, got T = {T}")
    d = np.diff(tr.values).tolist()
    s = 0.0
    for t in range(1, T - 1):
        s += abs(d[t + 1] - d[t])
    return s / (T - 2)


def cs(trace, window: int = 1) -> float:
    """Population variance of the last ``window + 1`` potentials."""
    tr = as_trace(trace)
    if window < 1:
        raise ConfigError("window must be >= 1")
    if window > tr.T:
        raise WindowTooLarge(f"window {window} exceeds T = {tr.T}")
    return float(np.var(tr.values[tr.T - window:]))


def rr(trace) -> float:
    return kernels.regression_mass(as_trace(trace).values)


def dtw_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """DTW with match/insert/delete steps and absolute-difference cost."""
    if len(a) == 0 or len(b) == 0:
        raise EmptySequence("dtw_distance needs two non-empty sequences")
    return kernels.dtw_distance(a, b)


def default_normalizer(trace_values, references) -> float:
    return float(max(len(trace_values), max(len(r) for r in references)))


def grdtw(trace, references: Iterable, normalizer: float | None = None) -> float:
    v = as_trace(trace).values
    refs = [as_trace(r).values for r in references]
    if not refs:
        raise NoReferences("GRDTW needs at least one reference trace")
    Z = default_normalizer(v, refs) if normalizer is None else normalizer
    if not Z > 0:
        raise ConfigError("normalizer must be positive")
    return max(1.0 - kernels.dtw_distance(v, r) / Z for r in refs)


def discarded_row(trace, config: DiscardedConfig | None = None, references=None) -> dict:
    """All applicable discarded metrics for one trace; inapplicable ones are None."""
    config = config or DiscardedConfig()
    tr = as_trace(trace)
    row = {"PPE": ppe(tr, config.ppe_epsilon), "PTI": pti(tr), "RR": rr(tr)}
    row["EAD"] = ead(tr, config.ead_epsilon) if tr.T >= 1 else None
    row["PJ"] = pj(tr) if tr.T >= 3 else None
    row["CS"] = cs(tr, config.cs_window) if config.cs_window <= tr.T else None
    row["GRDTW"] = row["GRDTW_Z"] = None
    if references:
        refs = [as_trace(r).values for r in references]
        z = config.grdtw_normalizer or default_normalizer(tr.values, refs)
        row["GRDTW"], row["GRDTW_Z"] = grdtw(tr, refs, z), z
    return row
