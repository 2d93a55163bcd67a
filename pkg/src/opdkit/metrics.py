"""Outcome, process and diagnosis metrics over a progress-potential trace.

All metrics return values on the [0, 1] scale; the x100 presentation used in
reports belongs to :mod:`opdkit.audit`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from opdkit import kernels
from opdkit.errors import ConfigError, DegenerateTrace, InvalidTail
from opdkit.potential import PotentialTrace, as_trace

__all__ = [
    "normal_quantile",
    "calibrate_epsilon",
    "DEFAULT_NOISE_SIGMA",
    "DEFAULT_TAIL_PROB",
    "OpdConfig",
    "OpdRecord",
    "milestone_coverage",
    "max_progress",
    "ppl",
    "cra",
    "stagnation_ratio",
    "opd_record",
]

DEFAULT_NOISE_SIGMA = 0.01
DEFAULT_TAIL_PROB = 0.01


def normal_quantile(p: float) -> float:
    """Inverse standard-normal CDF (Wichura, AS241 / PPND16).

    Relative accuracy is about 1e-16 over (0, 1).
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p!r}")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
                    + 67265.770927008700853) * r + 45921.953931549871457) * r
                  + 13731.693765509461125) * r + 1971.5909503065514427) * r
                + 133.14166789178437745) * r + 3.387132872796366608)
        den = (((((((5226.495278852545925 * r + 28729.085735721942674) * r
                    + 39307.89580009271061) * r + 21213.794301586595867) * r
                  + 5394.1960214247511077) * r + 687.1870074920579083) * r
                + 42.313330701600911252) * r + 1.0)
        return q * num / den
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
                    + 0.24178072517745061177) * r + 1.27045825245236838258) * r
                  + 3.64784832476320460504) * r + 5.7694972214606914055) * r
                + 4.6303378461565452959) * r + 1.42343711074968357734)
        den = (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                    + 0.0151986665636164571966) * r + 0.14810397642748007459) * r
                  + 0.68976733498510000455) * r + 1.6763848301838038494) * r
                + 2.05319162663775882187) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 0.0012426609473880784386) * r + 0.026532189526576123093) * r
                  + 0.29656057182850489123) * r + 1.7848265399172913358) * r
                + 5.4637849111641143699) * r + 6.6579046435011037772)
        den = (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                    + 1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r
                  + 0.0148753612908506148525) * r + 0.13692988092273580531) * r
                + 0.59983220655588793769) * r + 1.0)
    val = num / den
    return -val if q < 0.0 else val


def calibrate_epsilon(sigma: float, tail_prob: float) -> float:
    """Stagnation threshold for judge noise ``sigma``.

    Under i.i.d. N(0, sigma^2) judge noise on a static scene, one-step
    increments are N(0, 2 sigma^2); the returned threshold is exceeded in
    absolute value with probability ``tail_prob``.
    """
    if not (isinstance(tail_prob, (int, float)) and 0.0 < tail_prob < 1.0):
        raise InvalidTail(f"tail probability must lie in (0, 1), got {tail_prob!r}")
    if not (sigma >= 0.0 and math.isfinite(sigma)):
        raise ConfigError(f"noise sigma must be finite and >= 0, got {sigma!r}")
    return math.sqrt(2.0) * sigma * normal_quantile(1.0 - tail_prob / 2.0)


@dataclass(frozen=True)
class OpdConfig:
    milestone_count: int = 4
    ppl_delta: float = 1e-8
    str_epsilon: float = field(
        default_factory=lambda: calibrate_epsilon(DEFAULT_NOISE_SIGMA, DEFAULT_TAIL_PROB)
    )

    def __post_init__(self):
        if isinstance(self.milestone_count, bool) or int(self.milestone_count) != self.milestone_count \
                or self.milestone_count < 1:
            raise ConfigError(f"milestone_count must be a positive integer, got {self.milestone_count!r}")
        if not self.ppl_delta > 0:
            raise ConfigError(f"ppl_delta must be > 0, got {self.ppl_delta!r}")
        if not self.str_epsilon > 0:
            raise ConfigError(f"str_epsilon must be > 0, got {self.str_epsilon!r}")

    def snapshot(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class OpdRecord:
    """The five metrics of one episode, plus the config they were computed under.

    ``str_`` is ``None`` for single-state traces, where the stagnation ratio
    is undefined.
    """

    mc: float
    mp: float
    ppl: float
    cra: float
    str_: float | None
    config: OpdConfig
    episode_id: str = ""
    task_id: str = ""
    policy_id: str | None = None
    success: bool | None = None

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "task_id": self.task_id,
            "policy_id": self.policy_id,
            "success": self.success,
            "MC": self.mc,
            "MP": self.mp,
            "PPL": self.ppl,
            "CRA": self.cra,
            "STR": self.str_,
            "config": self.config.snapshot(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> OpdRecord:
        return cls(
            mc=d["MC"], mp=d["MP"], ppl=d["PPL"], cra=d["CRA"], str_=d["STR"],
            config=OpdConfig(**d["config"]),
            episode_id=d.get("episode_id", ""), task_id=d.get("task_id", ""),
            policy_id=d.get("policy_id"), success=d.get("success"),
        )

    def metric(self, name: str) -> float | None:
        return {"MC": self.mc, "MP": self.mp, "PPL": self.ppl, "CRA": self.cra, "STR": self.str_}[name]


def milestone_coverage(trace, K: int = 4) -> float:
    """Highest milestone k/K reached by any state (boundaries count as reached)."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    peak = float(as_trace(trace).values.max())
    k = min(K, max(0, math.floor(peak * K)))
    # guard floor() against rounding of peak*K near a boundary
    while k < K and peak >= (k + 1) / K:
        k += 1
    while k > 0 and peak < k / K:
        k -= 1
    return k / K


def max_progress(trace) -> float:
    return float(as_trace(trace).values.max())


def ppl(trace, delta: float = 1e-8) -> float:
    if not delta > 0:
        raise ConfigError("delta must be > 0")
    v = as_trace(trace).values
    first, last = float(v[0]), float(v[-1])
    gain = last - first
    if gain <= 0.0:
        return 0.0
    return last * gain / (kernels.total_variation(v) + delta)


def cra(trace) -> float:
    v = as_trace(trace).values
    return kernels.regret_sum(v) / len(v)


def stagnation_ratio(trace, epsilon: float) -> float:
    """Fraction of steps with ``|d_t| < epsilon`` (strict)."""
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    tr = as_trace(trace)
    if tr.T < 1:
        raise DegenerateTrace("stagnation ratio needs at least one step (T >= 1)")
    return kernels.count_small_steps(tr.values, epsilon) / tr.T


def opd_record(trace, config: OpdConfig | None = None) -> OpdRecord:
    config = config or OpdConfig()
    tr: PotentialTrace = as_trace(trace)
    return OpdRecord(
        mc=milestone_coverage(tr, config.milestone_count),
        mp=max_progress(tr),
        ppl=ppl(tr, config.ppl_delta),
        cra=cra(tr),
        str_=stagnation_ratio(tr, config.str_epsilon) if tr.T >= 1 else None,
        config=config,
        episode_id=tr.episode_id,
        task_id=tr.task_id,
        policy_id=tr.policy_id,
        success=tr.success,
    )
