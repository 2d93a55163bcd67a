"""Construction of pairwise progress-judgment cases from annotated episodes.

Pipeline: keyframe annotations -> dense state sequence with linear
potentials -> every ordered state pair scored by a stage-aware hop ->
stratified selection by hop magnitude and frame distance with balanced
progress/regression labels.
"""

from __future__ import annotations

import bisect
import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from opdkit.errors import (
    AnnotationError,
    ConfigError,
    DegenerateDenominator,
    InvalidAlpha,
    NoMonotonicPhases,
    TooShortEpisode,
    ZeroHop,
)
from opdkit.seeding import component_seed

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SETTINGS = ("Real", "Sim", "UMI", "Human")
BINS = ("Small", "Medium", "Large")
DEFAULT_BIN_EDGES = (Fraction(1, 3), Fraction(2, 3))


@dataclass(frozen=True)
class EpisodeAnnotation:
    """Keyframes ``K_0 = 0 < ... < K_N = L - 1`` of one episode.

    ``phases[j]`` marks segment ``[K_j, K_{j+1}]`` as monotonic (eligible).
    ``frame_refs`` holds one reference (or a list of views) per frame; when
    omitted, references default to ``"<episode_id>/<frame>"``.
    """

    episode_id: str
    context: str
    length: int
    keyframes: tuple
    phases: tuple | None = None
    frame_refs: tuple | None = None
    setting: str = "Real"

    def __post_init__(self):
        kf = tuple(int(k) for k in self.keyframes)
        object.__setattr__(self, "keyframes", kf)
        if self.length < 1:
            raise AnnotationError(f"{self.episode_id}: length must be >= 1")
        if len(kf) < 2:
            raise AnnotationError(f"{self.episode_id}: need at least two keyframes (N >= 1)")
        if kf[0] != 0 or kf[-1] != self.length - 1:
            raise AnnotationError(f"{self.episode_id}: keyframes must start at 0 and end at L-1")
        if any(b <= a for a, b in zip(kf, kf[1:])):
            raise AnnotationError(f"{self.episode_id}: keyframes must be strictly increasing")
        phases = tuple(bool(p) for p in self.phases) if self.phases is not None else (True,) * (len(kf) - 1)
        if len(phases) != len(kf) - 1:
            raise AnnotationError(f"{self.episode_id}: expected {len(kf) - 1} phase flags, got {len(phases)}")
        object.__setattr__(self, "phases", phases)
        if self.frame_refs is not None:
            refs = tuple(tuple(r) if isinstance(r, (list, tuple)) else (str(r),) for r in self.frame_refs)
            if len(refs) != self.length:
                raise AnnotationError(f"{self.episode_id}: frame_refs must have one entry per frame")
            object.__setattr__(self, "frame_refs", refs)
        if self.setting not in SETTINGS:
            raise AnnotationError(f"{self.episode_id}: unknown setting {self.setting!r}")

    @property
    def num_segments(self) -> int:
        return len(self.keyframes) - 1

    def refs(self, frame: int) -> tuple:
        if self.frame_refs is not None:
            return self.frame_refs[frame]
        return (f"{self.episode_id}/{frame}",)

    @classmethod
    def from_dict(cls, d: Mapping) -> EpisodeAnnotation:
        try:
            return cls(
                episode_id=str(d["episode_id"]),
                context=str(d.get("context", "")),
                length=int(d["length"]),
                keyframes=tuple(d["keyframes"]),
                phases=None if d.get("phases") is None else tuple(d["phases"]),
                frame_refs=None if d.get("frame_refs") is None else tuple(d["frame_refs"]),
                setting=d.get("setting", "Real"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, AnnotationError):
                raise
            raise AnnotationError(f"malformed annotation: {exc!r}") from None

    def to_dict(self) -> dict:
        d = {
            "episode_id": self.episode_id,
            "context": self.context,
            "length": self.length,
            "keyframes": list(self.keyframes),
            "phases": list(self.phases),
            "setting": self.setting,
        }
        if self.frame_refs is not None:
            d["frame_refs"] = [list(r) for r in self.frame_refs]
        return d


@dataclass(frozen=True)
class DenseStateSequence:
    """States ``x_0..x_M`` with ``Phi(x_i) = i / M``."""

    episode_id: str
    context: str
    setting: str
    frames: tuple
    segments: tuple
    refs: tuple

    @property
    def M(self) -> int:
        return len(self.frames) - 1

    def potential(self, i: int) -> float:
        return i / self.M

    def exact_potential(self, i: int) -> Fraction:
        return Fraction(i, self.M)

    @property
    def potentials(self) -> np.ndarray:
        return np.array([i / self.M for i in range(self.M + 1)])


def states_per_segment(length: int, num_segments: int, chunk_size: int) -> int:
    """``floor(floor(L / C) / N)``."""
    if chunk_size < 1 or num_segments < 1:
        raise ConfigError("chunk size and segment count must be positive")
    return (length // chunk_size) // num_segments


def discretize(annotation: EpisodeAnnotation, chunk_size: int = 30, retained_only: bool = True) -> DenseStateSequence:
    """Dense states for the retained (monotonic) segments of one episode.

    Each retained segment contributes ``m`` states equally spaced by frame
    index, excluding its left keyframe and including its right one; the
    left keyframe of the first retained segment is ``x_0``.
    """
    ann = annotation
    m = states_per_segment(ann.length, ann.num_segments, chunk_size)
    if m == 0:
        raise TooShortEpisode(
            f"{ann.episode_id}: L={ann.length}, N={ann.num_segments}, C={chunk_size} gives m = 0"
        )
    retained = [j for j in range(ann.num_segments) if ann.phases[j] or not retained_only]
    if not retained:
        raise NoMonotonicPhases(f"{ann.episode_id}: no monotonic phase to sample from")
    kf = ann.keyframes
    frames = [kf[retained[0]]]
    segments = [retained[0]]
    for j in retained:
        span = kf[j + 1] - kf[j]
        if span < m:
            raise TooShortEpisode(f"{ann.episode_id}: segment {j} spans {span} frames, fewer than m = {m}")
        for r in range(1, m + 1):
            frames.append(kf[j] + (r * span) // m)
            segments.append(j)
    return DenseStateSequence(
        episode_id=ann.episode_id,
        context=ann.context,
        setting=ann.setting,
        frames=tuple(frames),
        segments=tuple(segments),
        refs=tuple(ann.refs(f) for f in frames),
    )


def hop_score(phi_p, phi_q, phi_0, phi_M):
    """Stage-aware normalized progress from pre-state ``p`` to post-state ``q``.

    Forward moves are divided by the potential still remaining after ``p``;
    backward moves by the potential accumulated before ``p``. Works on floats
    or :class:`~fractions.Fraction` alike.
    """
    if phi_q >= phi_p:
        den = phi_M - phi_p
        if den == 0:
            raise DegenerateDenominator("forward hop from the terminal potential")
    else:
        den = phi_p - phi_0
        if den == 0:
            raise DegenerateDenominator("backward hop from the initial potential")
    return (phi_q - phi_p) / den


def assign_bin(hop, edges: Sequence = DEFAULT_BIN_EDGES) -> str:
    """Small for ``|H| <= 1/3``, Medium for ``<= 2/3``, Large above (exact thirds)."""
    a = abs(hop)
    if a == 0:
        raise ZeroHop("hop score is zero; neutral pairs are never binned")
    if a > 1:
        raise ValueError(f"|hop| must be <= 1, got {hop!r}")
    lo, hi = edges
    if a <= lo:
        return "Small"
    if a <= hi:
        return "Medium"
    return "Large"


@dataclass(frozen=True)
class ProgressPair:
    id: str
    episode_id: str
    context: str
    setting: str
    before_index: int
    after_index: int
    num_states: int
    before_frame: int
    after_frame: int
    before_refs: tuple
    after_refs: tuple
    ref_start: tuple | None
    ref_end: tuple | None
    hop: float
    bin: str
    frame_distance: int
    stratum: int
    label: int
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("before_refs", "after_refs", "ref_start", "ref_end"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ProgressPair:
        kw = dict(d)
        if kw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported pair schema version {kw.get('schema_version')!r}")
        for key in ("before_refs", "after_refs", "ref_start", "ref_end"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling knobs.

    ``quota`` is either one integer applied to every (bin, stratum) cell or
    a mapping whose keys are a bin name (every stratum of that bin) or
    ``"<bin>:<stratum>"`` (one cell); cell keys win over bin keys and
    unlisted cells get 0. ``dt_boundaries`` are inclusive upper edges of the
    frame-distance strata; ``None`` means per-sequence terciles.
    """

    chunk_size: int = 30
    quota: int | Mapping = 50
    dt_boundaries: tuple | None = None
    seed: int = 0
    bin_edges: tuple = DEFAULT_BIN_EDGES
    balance: bool = True
    retained_only: bool = True

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be positive")
        if self.dt_boundaries is not None:
            b = tuple(int(x) for x in self.dt_boundaries)
            if any(y <= x for x, y in zip(b, b[1:])):
                raise ConfigError("dt_boundaries must be strictly increasing")
            object.__setattr__(self, "dt_boundaries", b)
        lo, hi = (Fraction(e) if not isinstance(e, Fraction) else e for e in self.bin_edges)
        if not 0 < lo < hi < 1:
            raise ConfigError("bin edges must satisfy 0 < lo < hi < 1")
        object.__setattr__(self, "bin_edges", (lo, hi))
        if isinstance(self.quota, Mapping):
            if any(int(v) < 0 for v in self.quota.values()):
                raise ConfigError("quotas must be >= 0")
        elif int(self.quota) < 0:
            raise ConfigError("quotas must be >= 0")

    @property
    def n_strata(self) -> int:
        return 3 if self.dt_boundaries is None else len(self.dt_boundaries) + 1

    def quota_for(self, bin_name: str, stratum: int) -> int:
        if not isinstance(self.quota, Mapping):
            return int(self.quota)
        key = f"{bin_name}:{stratum}"
        if key in self.quota:
            return int(self.quota[key])
        return int(self.quota.get(bin_name, 0))

    def to_dict(self) -> dict:
        return {
            "chunk_size": self.chunk_size,
            "quota": dict(self.quota) if isinstance(self.quota, Mapping) else int(self.quota),
            "dt_boundaries": None if self.dt_boundaries is None else list(self.dt_boundaries),
            "seed": self.seed,
            "bin_edges": [str(e) for e in self.bin_edges],
            "balance": self.balance,
            "retained_only": self.retained_only,
        }


@dataclass
class Shortfall:
    """A (bin, stratum) cell whose quota could not be met."""

    bin: str
    stratum: int
    requested: int
    available: int
    filled: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleReport:
    shortfalls: list[Shortfall] = field(default_factory=list)
    skipped_degenerate: int = 0
    cell_counts: dict = field(default_factory=dict)
    label_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "shortfalls": [s.to_dict() for s in self.shortfalls],
            "skipped_degenerate": self.skipped_degenerate,
            "cell_counts": self.cell_counts,
            "label_counts": self.label_counts,
        }


@dataclass(frozen=True)
class _Candidate:
    seq: int
    p: int
    q: int
    hop: Fraction
    bin: str
    dt: int
    stratum: int

    @property
    def label(self) -> int:
        return 1 if self.hop > 0 else -1


def tercile_boundaries(distances: Sequence[int]) -> tuple:
    d = sorted(distances)
    n = len(d)
    return (d[(n - 1) // 3], d[(2 * (n - 1)) // 3])


def _candidates(seq_index: int, seq: DenseStateSequence, config: SamplerConfig, report: SampleReport) -> list:
    M = seq.M
    raw = []
    for p in range(M + 1):
        for q in range(M + 1):
            if p == q:
                continue
            try:
                h = hop_score(Fraction(p, M), Fraction(q, M), Fraction(0), Fraction(1))
            except DegenerateDenominator:
                report.skipped_degenerate += 1
                logger.debug("skip degenerate hop %s %d->%d", seq.episode_id, p, q)
                continue
            if h == 0:
                continue
            raw.append((p, q, h, abs(seq.frames[q] - seq.frames[p])))
    if not raw:
        return []
    bounds = config.dt_boundaries
    if bounds is None:
        bounds = tercile_boundaries([r[3] for r in raw])
    return [
        _Candidate(seq_index, p, q, h, assign_bin(h, config.bin_edges), dt, bisect.bisect_left(bounds, dt))
        for p, q, h, dt in raw
    ]


def sample_pairs(
    sequences: Sequence[DenseStateSequence], config: SamplerConfig | None = None
) -> tuple[list[ProgressPair], SampleReport]:
    """Seeded stratified selection of labelled pairs.

    For every (bin, stratum) cell the candidates of each label are sorted
    canonically and shuffled with a generator seeded by ``(seed, bin,
    stratum, label)``. Labels are taken in equal numbers; when the quota is
    odd (or one label runs short) at most one extra pair is added, on the
    side that keeps the bin's running |#pos - #neg| <= 1.
    """
    config = config or SamplerConfig()
    if not sequences:
        raise ValueError("no sequences to sample from")
    report = SampleReport()
    seqs = sorted(sequences, key=lambda s: s.episode_id)
    if len({s.episode_id for s in seqs}) != len(seqs):
        raise ValueError("episode ids must be unique")
    cells: dict = {}
    for si, seq in enumerate(seqs):
        for c in _candidates(si, seq, config, report):
            cells.setdefault((c.bin, c.stratum), []).append(c)

    base = component_seed(config.seed, "sampler")
    chosen: list[_Candidate] = []
    for bi, b in enumerate(BINS):
        imbalance = 0
        for stratum in range(config.n_strata):
            q = config.quota_for(b, stratum)
            pool = sorted(cells.get((b, stratum), []), key=lambda c: (c.seq, c.p, c.q))
            if q == 0:
                continue
            if config.balance:
                picked, imbalance = _pick_balanced(pool, q, imbalance, base, bi, stratum)
            else:
                rng = np.random.default_rng([base, bi, stratum, 2])
                order = rng.permutation(len(pool))
                picked = [pool[i] for i in order[:q]]
            report.cell_counts[f"{b}:{stratum}"] = len(picked)
            if len(picked) < q:
                report.shortfalls.append(Shortfall(b, stratum, q, len(pool), len(picked)))
                logger.warning("quota unfillable for %s stratum %d: %d of %d (available %d)",
                               b, stratum, len(picked), q, len(pool))
            chosen.extend(picked)

    chosen.sort(key=lambda c: (BINS.index(c.bin), c.stratum, c.seq, c.p, c.q))
    pairs = []
    for n, c in enumerate(chosen, start=1):
        seq = seqs[c.seq]
        pairs.append(ProgressPair(
            id=f"pair-{n:06d}",
            episode_id=seq.episode_id,
            context=seq.context,
            setting=seq.setting,
            before_index=c.p,
            after_index=c.q,
            num_states=seq.M,
            before_frame=seq.frames[c.p],
            after_frame=seq.frames[c.q],
            before_refs=seq.refs[c.p],
            after_refs=seq.refs[c.q],
            ref_start=seq.refs[0],
            ref_end=seq.refs[seq.M],
            hop=float(c.hop),
            bin=c.bin,
            frame_distance=c.dt,
            stratum=c.stratum,
            label=c.label,
        ))
    for b in BINS:
        pos = sum(1 for p in pairs if p.bin == b and p.label == 1)
        neg = sum(1 for p in pairs if p.bin == b and p.label == -1)
        report.label_counts[b] = {"pos": pos, "neg": neg}
    return pairs, report


def _pick_balanced(pool, quota, imbalance, base, bin_index, stratum):
    pos = [c for c in pool if c.label == 1]
    neg = [c for c in pool if c.label == -1]
    pos = [pos[i] for i in np.random.default_rng([base, bin_index, stratum, 1]).permutation(len(pos))]
    neg = [neg[i] for i in np.random.default_rng([base, bin_index, stratum, 0]).permutation(len(neg))]
    k = min(quota // 2, len(pos), len(neg))
    n_pos = n_neg = k
    if quota - 2 * k > 0:
        # one extra pair, on the side that keeps the bin within +-1
        if imbalance <= 0 and len(pos) > k:
            n_pos += 1
        elif imbalance >= 0 and len(neg) > k:
            n_neg += 1
    return pos[:n_pos] + neg[:n_neg], imbalance + n_pos - n_neg


def build_pairs(
    annotations: Iterable[EpisodeAnnotation], config: SamplerConfig | None = None
) -> tuple[list[ProgressPair], SampleReport, list[dict]]:
    """Discretize every annotation and sample pairs; per-episode failures are collected."""
    config = config or SamplerConfig()
    seqs, failures = [], []
    for ann in annotations:
        try:
            seqs.append(discretize(ann, config.chunk_size, config.retained_only))
        except (TooShortEpisode, NoMonotonicPhases) as exc:
            failures.append({"episode_id": ann.episode_id, "error": type(exc).__name__, "message": str(exc)})
    if not seqs:
        return [], SampleReport(), failures
    pairs, report = sample_pairs(seqs, config)
    return pairs, report, failures


# --- I/O -----------------------------------------------------------------


def read_annotations(path: str | Path) -> tuple[list[EpisodeAnnotation], list[dict]]:
    anns, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                anns.append(EpisodeAnnotation.from_dict(json.loads(text)))
            except (json.JSONDecodeError, AnnotationError) as exc:
                errors.append({"line": lineno, "error": str(exc)})
    return anns, errors


def write_pairs(path: str | Path, pairs: Iterable[ProgressPair]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def read_pairs(path: str | Path) -> list[ProgressPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for text in fh:
            if text.strip():
                out.append(ProgressPair.from_dict(json.loads(text)))
    return out


# --- observation noise ---------------------------------------------------


def perturb_observation(image: np.ndarray, noise_level: float, seed: int) -> np.ndarray:
    """``(1 - a) * I + a * eps`` with ``eps ~ N(0, 1)`` per element; not clipped.

    ``noise_level == 0`` returns an exact copy of the input.
    """
    if not (isinstance(noise_level, (int, float)) and 0.0 <= noise_level <= 1.0):
        raise InvalidAlpha(f"noise level must lie in [0, 1], got {noise_level!r}")
    image = np.asarray(image)
    if image.size and (np.nanmin(image) < 0.0 or np.nanmax(image) > 1.0 or not np.isfinite(image).all()):
        raise ValueError("image values must be finite and lie in [0, 1]")
    if noise_level == 0:
        return image.copy()
    eps = np.random.default_rng(seed).standard_normal(image.shape)
    return (1.0 - noise_level) * image.astype(np.float64) + noise_level * eps


def frame_seed(seed: int, frame_ref: str) -> int:
    return component_seed(seed, f"perturb:{frame_ref}")


def perturbation_manifest(pairs: Iterable[ProgressPair], noise_level: float, seed: int) -> list[dict]:
    """One entry per distinct frame reference used by ``pairs``, with its noise seed."""
    refs: set = set()
    for p in pairs:
        for group in (p.before_refs, p.after_refs, p.ref_start, p.ref_end):
            if group:
                refs.update(group)
    return [{"frame_ref": r, "noise_level": noise_level, "seed": frame_seed(seed, r)} for r in sorted(refs)]


def load_image(path: str | Path) -> np.ndarray:
    return np.load(path, allow_pickle=False)


def save_image(path: str | Path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        np.save(fh, np.asarray(image), allow_pickle=False)
