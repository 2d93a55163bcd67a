"""Additivity (cocycle) checks for pairwise progress evaluators.

A pairwise evaluator ``E(i, j)`` is consistent when ``E(i, k) = E(i, j) +
E(j, k)`` for every triple, which is the same as being the difference of a
single potential. This module certifies or refutes that on finite state
sets, reconstructs potentials from an anchor, and measures how accumulated
progress drifts when a trajectory is refined.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from opdkit.errors import (
    AnchorNotInSet,
    ConfigError,
    EvaluatorFailure,
    InvalidPartition,
    NotARefinement,
    TooFewStates,
    TooShort,
)

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-9
EXHAUSTIVE_LIMIT = 64


class PairwiseEvaluator(Protocol):
    single_threaded: bool

    def score(self, i: Hashable, j: Hashable, context: Any = None) -> float: ...


@dataclass(frozen=True)
class PotentialDifferenceEvaluator:
    """``E(i, j) = Phi(j) - Phi(i)``: consistent by construction."""

    potentials: Mapping[Hashable, float]
    single_threaded: bool = False

    def score(self, i, j, context=None) -> float:
        return self.potentials[j] - self.potentials[i]


@dataclass(frozen=True)
class ClippedEvaluator:
    """``E(i, j) = min(Phi(j) - Phi(i), cap)``.

    Saturating a large jump breaks additivity on any triple whose total
    increment exceeds ``cap`` while both halves stay below it.
    """

    potentials: Mapping[Hashable, float]
    cap: float = 0.5
    single_threaded: bool = False

    def score(self, i, j, context=None) -> float:
        return min(self.potentials[j] - self.potentials[i], self.cap)


@dataclass(frozen=True)
class FunctionEvaluator:
    fn: Callable[[Hashable, Hashable, Any], float]
    single_threaded: bool = False

    def score(self, i, j, context=None) -> float:
        return self.fn(i, j, context)


def _score(E, i, j, context) -> float:
    try:
        return float(E.score(i, j, context))
    except Exception as exc:  # evaluator defects surface as one error type
        raise EvaluatorFailure(f"evaluator failed on ({i!r}, {j!r}): {exc}") from exc


@dataclass(frozen=True)
class StateSet:
    states: tuple
    equivalence_classes: tuple | None = None

    def __post_init__(self):
        states = tuple(self.states)
        object.__setattr__(self, "states", states)
        if len(set(states)) != len(states):
            raise ConfigError("state identifiers must be unique")
        if self.equivalence_classes is not None:
            classes = tuple(tuple(c) for c in self.equivalence_classes)
            object.__setattr__(self, "equivalence_classes", classes)
            _check_partition(classes, states)

    def __len__(self) -> int:
        return len(self.states)


def _check_partition(classes, universe) -> None:
    seen: set = set()
    for block in classes:
        if not block:
            raise InvalidPartition("empty equivalence class")
        for s in block:
            if s in seen:
                raise InvalidPartition(f"state {s!r} appears in more than one class")
            seen.add(s)
    missing = set(universe) - seen
    extra = seen - set(universe)
    if missing or extra:
        raise InvalidPartition(
            f"classes must cover exactly the state set (missing {sorted(map(str, missing))}, "
            f"unknown {sorted(map(str, extra))})"
        )


@dataclass(frozen=True)
class Sampling:
    kind: str = "auto"  # auto | exhaustive | random
    n: int = 100_000
    seed: int = 0

    @classmethod
    def exhaustive(cls) -> Sampling:
        return cls("exhaustive")

    @classmethod
    def random(cls, n: int, seed: int = 0) -> Sampling:
        return cls("random", n, seed)


@dataclass
class Violation:
    i: Hashable
    j: Hashable
    k: Hashable
    residual: float

    def to_dict(self) -> dict:
        return {"i": self.i, "j": self.j, "k": self.k, "residual": self.residual}


@dataclass
class ConsistencyReport:
    triples_checked: int
    max_abs_residual: float
    violations: list[Violation]
    tolerance: float
    violation_count: int = 0
    sampling: str = "exhaustive"
    coverage: float = 1.0
    extra: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "violated" if self.max_abs_residual > self.tolerance else "consistent-within-tol"

    @property
    def certificate(self) -> Violation | None:
        return self.violations[0] if self.violations else None

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "tolerance": self.tolerance,
            "triples_checked": self.triples_checked,
            "max_abs_residual": self.max_abs_residual,
            "violation_count": self.violation_count,
            "certificate": None if self.certificate is None else self.certificate.to_dict(),
            "violations": [v.to_dict() for v in self.violations],
            "sampling": self.sampling,
            "coverage": self.coverage,
            **self.extra,
        }


def additivity_residual(E, i, j, k, context=None) -> float:
    """``E(i, k) - E(i, j) - E(j, k)``; zero for consistent evaluators."""
    return _score(E, i, k, context) - _score(E, i, j, context) - _score(E, j, k, context)


def score_matrix(E, states: Sequence, context=None, jobs: int = 1) -> np.ndarray:
    """``M[a, b] = E(states[a], states[b])``, filled row by row in a fixed order."""
    n = len(states)

    def row(a):
        return [_score(E, states[a], states[b], context) for b in range(n)]

    if jobs > 1 and not getattr(E, "single_threaded", False):
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(row, range(n)))
    else:
        rows = [row(a) for a in range(n)]
    return np.array(rows, dtype=np.float64).reshape(n, n)


def check_cocycle(
    E,
    states: StateSet | Sequence,
    context=None,
    tolerance: float = DEFAULT_TOLERANCE,
    sampling: Sampling | str = "auto",
    jobs: int = 1,
    max_violations: int = 1000,
) -> ConsistencyReport:
    """Residuals over ordered triples; verdict is ``violated`` iff max |residual| > tolerance.

    Exhaustive checking is used up to :data:`EXHAUSTIVE_LIMIT` states;
    beyond that (or on request) a seeded random sample of triples is drawn.
    Violations are listed in lexicographic triple order (exhaustive) or draw
    order (random), capped at ``max_violations``.
    """
    ids = tuple(states.states if isinstance(states, StateSet) else states)
    n = len(ids)
    if n < 3:
        raise TooFewStates(f"need at least 3 states, got {n}")
    if tolerance < 0:
        raise ConfigError("tolerance must be >= 0")
    if isinstance(sampling, str):
        sampling = Sampling(sampling)
    kind = sampling.kind
    if kind == "auto":
        kind = "exhaustive" if n <= EXHAUSTIVE_LIMIT else "random"
    if kind == "exhaustive":
        if n > EXHAUSTIVE_LIMIT:
            raise ConfigError(f"exhaustive checking is capped at {EXHAUSTIVE_LIMIT} states; use random sampling")
        return _check_exhaustive(E, ids, context, tolerance, jobs, max_violations)
    if kind == "random":
        return _check_random(E, ids, context, tolerance, sampling.n, sampling.seed, max_violations)
    raise ConfigError(f"unknown sampling kind {sampling.kind!r}")


def _check_exhaustive(E, ids, context, tolerance, jobs, max_violations) -> ConsistencyReport:
    n = len(ids)
    M = score_matrix(E, ids, context, jobs)
    # R[i, j, k] = M[i, k] - M[i, j] - M[j, k]
    R = (M[:, None, :] - M[:, :, None]) - M[None, :, :]
    A = np.abs(R)
    flat = np.flatnonzero(A.ravel() > tolerance)
    violations = []
    for f in flat[:max_violations]:
        i, j, k = np.unravel_index(f, R.shape)
        violations.append(Violation(ids[i], ids[j], ids[k], float(R[i, j, k])))
    return ConsistencyReport(
        triples_checked=n ** 3,
        max_abs_residual=float(A.max()),
        violations=violations,
        tolerance=tolerance,
        violation_count=int(flat.size),
        sampling="exhaustive",
        coverage=1.0,
    )


def _check_random(E, ids, context, tolerance, n_samples, seed, max_violations) -> ConsistencyReport:
    n = len(ids)
    rng = np.random.default_rng(seed)
    triples = rng.integers(0, n, size=(n_samples, 3))
    cache: dict = {}

    def s(a, b):
        key = (a, b)
        if key not in cache:
            cache[key] = _score(E, ids[a], ids[b], context)
        return cache[key]

    worst = 0.0
    count = 0
    violations = []
    for a, b, c in triples.tolist():
        r = s(a, c) - s(a, b) - s(b, c)
        if abs(r) > worst:
            worst = abs(r)
        if abs(r) > tolerance:
            count += 1
            if len(violations) < max_violations:
                violations.append(Violation(ids[a], ids[b], ids[c], r))
    distinct = len({tuple(t) for t in triples.tolist()})
    return ConsistencyReport(
        triples_checked=int(n_samples),
        max_abs_residual=worst,
        violations=violations,
        tolerance=tolerance,
        violation_count=count,
        sampling=f"random(n={n_samples}, seed={seed})",
        coverage=distinct / n ** 3,
    )


def induce_potential(E, anchor, states: StateSet | Sequence, context=None) -> dict:
    """``Phi(s) = E(anchor, s)`` for every state; exact for consistent evaluators."""
    ids = tuple(states.states if isinstance(states, StateSet) else states)
    if anchor not in ids:
        raise AnchorNotInSet(f"anchor {anchor!r} is not in the state set")
    return {s: _score(E, anchor, s, context) for s in ids}


def reconstruction_mismatches(E, potential: Mapping, context=None, tolerance: float = DEFAULT_TOLERANCE) -> list:
    """Ordered pairs where ``Phi(j) - Phi(i)`` disagrees with ``E(i, j)``."""
    ids = list(potential)
    out = []
    for i in ids:
        for j in ids:
            gap = (potential[j] - potential[i]) - _score(E, i, j, context)
            if abs(gap) > tolerance:
                out.append((i, j, gap))
    return out


def accumulated_progress(E, trajectory: Sequence, context=None) -> float:
    """Sum of consecutive pairwise scores along ``trajectory``."""
    if len(trajectory) < 2:
        raise TooShort("trajectory needs at least two states")
    total = 0.0
    for a, b in zip(trajectory[:-1], trajectory[1:]):
        total += _score(E, a, b, context)
    return total


def is_refinement(trajectory: Sequence, refined: Sequence) -> bool:
    """Same endpoints, and the original states appear in order inside ``refined``."""
    if len(trajectory) < 2 or len(refined) < 2:
        return False
    if trajectory[0] != refined[0] or trajectory[-1] != refined[-1]:
        return False
    it = iter(refined)
    return all(any(s == r for r in it) for s in trajectory)


def refinement_drift(E, trajectory: Sequence, refined: Sequence, context=None) -> float:
    if not is_refinement(trajectory, refined):
        raise NotARefinement("refined trajectory must keep the endpoints and original order")
    return abs(accumulated_progress(E, trajectory, context) - accumulated_progress(E, refined, context))


@dataclass
class EquivalenceViolation:
    class_index: int
    state_a: Hashable
    state_b: Hashable
    gap: float

    def to_dict(self) -> dict:
        return {"class": self.class_index, "state_a": self.state_a, "state_b": self.state_b, "gap": self.gap}


def equivalence_invariance_check(
    score: Mapping, classes: Iterable[Iterable], tolerance: float = DEFAULT_TOLERANCE
) -> list[EquivalenceViolation]:
    """Within-class pairs whose scores differ by more than ``tolerance``."""
    blocks = [tuple(c) for c in classes]
    _check_partition(blocks, score.keys())
    out = []
    for ci, block in enumerate(blocks):
        for x in range(len(block)):
            for y in range(x + 1, len(block)):
                a, b = block[x], block[y]
                gap = abs(float(score[a]) - float(score[b]))
                if gap > tolerance:
                    out.append(EquivalenceViolation(ci, a, b, gap))
    return out
