"""Judge adapters: potentials and pairwise directions from pluggable judges.

Four kinds of judge are supported:

``builtin``     in-process oracles (index, inverted, noisy, random, clipped)
``file_oracle`` precomputed potentials, JSON Lines of
                ``{"episode_id", "frame_index", "potential"}``
``subprocess``  a child process speaking newline-delimited JSON on
                stdin/stdout; it must print ``{"ready": true}`` first
``http``        ``POST <url>/judge`` with the same JSON body

Wire request (one JSON object, one line)::

    {"id": str, "mode": "potential", "context": str, "observation": [ref, ...],
     "ref_start": [ref, ...] | null, "ref_end": [ref, ...] | null}
    {"id": str, "mode": "pairwise", "context": str, "before": [...], "after": [...],
     "ref_start": ..., "ref_end": ...}

Wire response: ``{"id": str, "potential": float}`` or ``{"id": str, "direction": 1 | -1}``.
"""

from __future__ import annotations

import json
import logging
import math
import shlex
import socket
import subprocess
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from opdkit.errors import (
    BatchFailed,
    ConfigError,
    JudgeError,
    JudgeTimeout,
    OutOfRange,
    ProtocolError,
)
from opdkit.potential import ValidationPolicy
from opdkit.sampler import ProgressPair
from opdkit.seeding import component_seed, hash_bit

logger = logging.getLogger(__name__)

KINDS = ("builtin", "file_oracle", "subprocess", "http")
MODES = ("potential", "pairwise")
DEFAULT_TIMEOUT = 30.0


@dataclass(frozen=True)
class Observation:
    """What a judge sees of one state.

    Only ``refs`` goes over the wire. ``episode_id``/``frame_index`` key the
    file oracle; ``state_index``/``num_states`` feed the in-process oracles.
    """

    refs: tuple = ()
    episode_id: str | None = None
    frame_index: int | None = None
    state_index: int | None = None
    num_states: int | None = None


@dataclass(frozen=True)
class JudgeRequest:
    id: str
    mode: str
    context: str
    observation: Observation | None = None
    before: Observation | None = None
    after: Observation | None = None
    ref_start: tuple | None = None
    ref_end: tuple | None = None

    def wire(self) -> dict:
        d = {"id": self.id, "mode": self.mode, "context": self.context}
        if self.mode == "potential":
            d["observation"] = list(self.observation.refs)
        else:
            d["before"] = list(self.before.refs)
            d["after"] = list(self.after.refs)
        d["ref_start"] = None if self.ref_start is None else list(self.ref_start)
        d["ref_end"] = None if self.ref_end is None else list(self.ref_end)
        return d


@dataclass(frozen=True)
class JudgeDescriptor:
    kind: str
    mode: str = "potential"
    target: str = ""
    params: tuple = ()
    max_in_flight: int = 1
    timeout: float = DEFAULT_TIMEOUT
    single_threaded: bool = False
    validation: str = "clamp"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown judge kind {self.kind!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown judge mode {self.mode!r}")
        if int(self.max_in_flight) < 1:
            raise ConfigError("max_in_flight must be a positive integer")
        if not self.timeout > 0:
            raise ConfigError("timeout must be positive")
        ValidationPolicy(self.validation)

    @property
    def name(self) -> str:
        base = f"{self.kind}:{self.target}"
        if self.params:
            base += ":" + ",".join(f"{k}={v}" for k, v in self.params)
        return base


def parse_judge_spec(spec: str, **overrides) -> JudgeDescriptor:
    """``builtin:NAME[:k=v,...]``, ``subprocess:CMD``, ``http:URL`` or ``file:PATH``."""
    kind, sep, rest = spec.partition(":")
    if not sep or not rest:
        raise ConfigError(f"judge spec {spec!r} must look like KIND:TARGET")
    if kind == "builtin":
        name, _, params = rest.partition(":")
        pairs = []
        for item in filter(None, params.split(",")):
            k, eq, v = item.partition("=")
            if not eq:
                raise ConfigError(f"bad builtin parameter {item!r}")
            pairs.append((k.strip(), v.strip()))
        if name not in BUILTINS:
            raise ConfigError(f"unknown builtin judge {name!r}; choose from {sorted(BUILTINS)}")
        overrides.setdefault("mode", BUILTINS[name].mode)
        return JudgeDescriptor("builtin", target=name, params=tuple(pairs), **overrides)
    if kind in ("file", "file_oracle"):
        overrides["mode"] = "potential"
        return JudgeDescriptor("file_oracle", target=rest, **overrides)
    if kind in ("subprocess", "http"):
        return JudgeDescriptor(kind, target=rest, **overrides)
    raise ConfigError(f"unknown judge kind {kind!r}")


# --- builtin judges ------------------------------------------------------


def _index_potential(obs: Observation) -> float:
    if obs.state_index is None or not obs.num_states:
        raise ProtocolError("builtin oracle needs state_index and num_states")
    return obs.state_index / obs.num_states


class IndexOracle:
    """Potential ``i / M`` of dense state ``i``."""

    mode = "potential"

    def potential(self, req: JudgeRequest) -> float:
        return _index_potential(req.observation)


class InvertedOracle:
    mode = "potential"

    def potential(self, req: JudgeRequest) -> float:
        return 1.0 - _index_potential(req.observation)


class NoisyOracle:
    """Index potential plus i.i.d. N(0, sigma^2) noise.

    Per-request noise is keyed by ``(seed, request id)`` so results do not
    depend on call order. Values are not clipped here; range handling is
    the adapter's validation policy.
    """

    mode = "potential"

    def __init__(self, sigma: float = 0.01, seed: int = 0):
        if sigma < 0:
            raise ConfigError("sigma must be >= 0")
        self.sigma = float(sigma)
        self.seed = int(seed)

    def potential(self, req: JudgeRequest) -> float:
        rng = np.random.default_rng(component_seed(self.seed, f"noisy:{req.id}"))
        return _index_potential(req.observation) + self.sigma * float(rng.standard_normal())

    def score_trace(self, true_values: Sequence[float], key: str = "") -> np.ndarray:
        """Noisy readings of a whole trace, drawn from one seeded stream."""
        rng = np.random.default_rng(component_seed(self.seed, f"noisy-trace:{key}"))
        v = np.asarray(true_values, dtype=np.float64)
        return v + self.sigma * rng.standard_normal(v.shape)


class RandomJudge:
    """Fair coin per request id: reproducible, order-independent."""

    mode = "pairwise"

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def direction(self, req: JudgeRequest) -> int:
        return 1 if hash_bit(self.seed, req.id) else -1


class ClippedPairwise:
    """Pairwise score ``min(Phi(after) - Phi(before), cap)`` on index potentials.

    Saturation breaks additivity; see :mod:`opdkit.consistency`.
    """

    mode = "pairwise"

    def __init__(self, cap: float = 0.5):
        self.cap = float(cap)

    def score(self, before: Observation, after: Observation) -> float:
        return min(_index_potential(after) - _index_potential(before), self.cap)

    def direction(self, req: JudgeRequest) -> int:
        return 1 if self.score(req.before, req.after) > 0 else -1

    def evaluator(self, potentials):
        from opdkit.consistency import ClippedEvaluator

        return ClippedEvaluator(potentials, self.cap)


@dataclass(frozen=True)
class _Builtin:
    factory: type
    mode: str
    params: dict = field(default_factory=dict)


BUILTINS = {
    "index_oracle": _Builtin(IndexOracle, "potential"),
    "inverted_oracle": _Builtin(InvertedOracle, "potential"),
    "noisy_oracle": _Builtin(NoisyOracle, "potential", {"sigma": float, "seed": int}),
    "random_judge": _Builtin(RandomJudge, "pairwise", {"seed": int}),
    "clipped_pairwise": _Builtin(ClippedPairwise, "pairwise", {"cap": float}),
}


def builtin_judges() -> dict:
    """Catalog of builtin judges: name -> (mode, parameter names)."""
    return {name: {"mode": b.mode, "params": sorted(b.params)} for name, b in BUILTINS.items()}


def make_builtin(name: str, **params):
    if name not in BUILTINS:
        raise ConfigError(f"unknown builtin judge {name!r}")
    b = BUILTINS[name]
    unknown = set(params) - set(b.params)
    if unknown:
        raise ConfigError(f"{name} does not take {sorted(unknown)}")
    return b.factory(**{k: b.params[k](v) for k, v in params.items()})


# --- file oracle ---------------------------------------------------------


class FileOracle:
    mode = "potential"

    def __init__(self, path: str | Path):
        self.table: dict = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, text in enumerate(fh, start=1):
                if not text.strip():
                    continue
                try:
                    obj = json.loads(text)
                    key = (str(obj["episode_id"]), int(obj["frame_index"]))
                    self.table[key] = float(obj["potential"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ConfigError(f"{path}:{lineno}: bad oracle line ({exc})") from None

    def potential(self, req: JudgeRequest) -> float:
        obs = req.observation
        try:
            return self.table[(str(obs.episode_id), int(obs.frame_index))]
        except (KeyError, TypeError):
            raise ProtocolError(f"no oracle potential for ({obs.episode_id!r}, {obs.frame_index!r})") from None


# --- remote transports ---------------------------------------------------


class _Pending:
    __slots__ = ("event", "response", "error")

    def __init__(self):
        self.event = threading.Event()
        self.response = None
        self.error = None


class SubprocessTransport:
    """Newline-delimited JSON over a child's stdin/stdout.

    Several requests may be outstanding at once; responses are matched to
    requests by ``id``. A request that times out is abandoned and a late
    response for it is dropped.
    """

    def __init__(self, command: str | Sequence[str], timeout: float = DEFAULT_TIMEOUT):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc = None
        self._lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._pending: dict[str, _Pending] = {}
        self._dead: str | None = None

    def _start(self):
        with self._lock:
            if self._proc is not None:
                if self._dead:
                    raise ProtocolError(self._dead)
                return
            try:
                self._proc = subprocess.Popen(
                    self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                    text=True, encoding="utf-8", bufsize=1,
                )
            except OSError as exc:
                self._proc = False
                self._dead = f"cannot start judge {self.argv!r}: {exc}"
                raise ProtocolError(self._dead) from None
            ready = _Pending()
            self._pending["__ready__"] = ready
            threading.Thread(target=self._read_loop, daemon=True).start()
            if not ready.event.wait(self.timeout):
                self._dead = "judge did not signal readiness"
                self.close()
                raise JudgeTimeout(self._dead)
            if ready.error:
                self._dead = ready.error
                raise ProtocolError(ready.error)

    def _read_loop(self):
        proc = self._proc
        for line in proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError:
                logger.warning("judge emitted non-JSON line: %.80s", line)
                continue
            if not isinstance(msg, dict):
                continue
            if "__ready__" in self._pending and "id" not in msg:
                slot = self._pending.pop("__ready__")
                if msg.get("ready") is not True:
                    slot.error = f"expected readiness message, got {msg!r}"
                slot.event.set()
                continue
            slot = self._pending.pop(str(msg.get("id")), None)
            if slot is None:
                logger.debug("dropping response for unknown id %r", msg.get("id"))
                continue
            slot.response = msg
            slot.event.set()
        self._dead = "judge process exited"
        for slot in list(self._pending.values()):
            slot.error = self._dead
            slot.event.set()
        self._pending.clear()

    def request(self, payload: dict) -> dict:
        self._start()
        rid = payload["id"]
        slot = _Pending()
        self._pending[rid] = slot
        try:
            with self._write_lock:
                self._proc.stdin.write(json.dumps(payload) + "\n")
                self._proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError):
            self._pending.pop(rid, None)
            raise ProtocolError("judge process is not accepting input") from None
        if not slot.event.wait(self.timeout):
            self._pending.pop(rid, None)
            raise JudgeTimeout(f"no response for {rid!r} within {self.timeout}s")
        if slot.error:
            raise ProtocolError(slot.error)
        return slot.response

    def close(self):
        proc = self._proc
        if proc:
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()


class HttpTransport:
    def __init__(self, url: str, timeout: float = DEFAULT_TIMEOUT):
        url = url.rstrip("/")
        self.url = url if url.endswith("/judge") else url + "/judge"
        self.timeout = timeout

    def request(self, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            raise ProtocolError(f"judge returned HTTP {exc.code}") from None
        except (socket.timeout, TimeoutError):
            raise JudgeTimeout(f"no response from {self.url} within {self.timeout}s") from None
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                raise JudgeTimeout(f"no response from {self.url} within {self.timeout}s") from None
            raise ProtocolError(f"judge unreachable: {exc.reason}") from None
        except json.JSONDecodeError:
            raise ProtocolError("judge returned non-JSON body") from None

    def close(self):
        pass


class RemoteJudge:
    """Adapts a transport to the potential/direction judge interface."""

    def __init__(self, transport, mode: str):
        self.transport = transport
        self.mode = mode

    def _call(self, req: JudgeRequest) -> dict:
        resp = self.transport.request(req.wire())
        if not isinstance(resp, dict) or str(resp.get("id")) != req.id:
            raise ProtocolError(f"response id does not match request {req.id!r}")
        payload = {"potential", "direction"} & set(resp)
        want = "potential" if self.mode == "potential" else "direction"
        if payload != {want}:
            raise ProtocolError(f"expected exactly one {want!r} field, got {sorted(payload)}")
        return resp

    def potential(self, req: JudgeRequest) -> float:
        value = self._call(req)["potential"]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ProtocolError(f"potential is not a number: {value!r}")
        return float(value)

    def direction(self, req: JudgeRequest) -> int:
        value = self._call(req)["direction"]
        if value not in (1, -1) or isinstance(value, bool):
            raise ProtocolError(f"direction must be +1 or -1, got {value!r}")
        return int(value)

    def close(self):
        self.transport.close()


# --- adapter -------------------------------------------------------------


@dataclass
class JudgeVerdict:
    id: str
    direction: int | None = None
    before_potential: float | None = None
    after_potential: float | None = None
    tie: bool = False
    error: str | None = None
    error_kind: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "direction": self.direction,
            "before_potential": self.before_potential,
            "after_potential": self.after_potential,
            "tie": self.tie,
            "error": self.error,
            "error_kind": self.error_kind,
        }

    @classmethod
    def from_dict(cls, d: dict) -> JudgeVerdict:
        return cls(**d)


def _pair_observations(pair: ProgressPair) -> tuple[Observation, Observation]:
    before = Observation(pair.before_refs, pair.episode_id, pair.before_frame, pair.before_index, pair.num_states)
    after = Observation(pair.after_refs, pair.episode_id, pair.after_frame, pair.after_index, pair.num_states)
    return before, after


class JudgeClient:
    """Validated potentials and directions from any judge backend.

    Potential-mode judges answer pairwise queries by comparing the two
    potentials; an exact tie maps to -1 and is counted in :attr:`ties`.
    """

    def __init__(self, backend, descriptor: JudgeDescriptor | None = None):
        self.backend = backend
        self.descriptor = descriptor or JudgeDescriptor("builtin", mode=backend.mode)
        self.mode = backend.mode
        self.policy = ValidationPolicy(self.descriptor.validation)
        self.ties = 0
        self.clamped = 0
        self._count_lock = threading.Lock()

    @classmethod
    def from_descriptor(cls, d: JudgeDescriptor) -> JudgeClient:
        if d.kind == "builtin":
            backend = make_builtin(d.target, **dict(d.params))
        elif d.kind == "file_oracle":
            backend = FileOracle(d.target)
        elif d.kind == "subprocess":
            backend = RemoteJudge(SubprocessTransport(d.target, d.timeout), d.mode)
        else:
            backend = RemoteJudge(HttpTransport(d.target, d.timeout), d.mode)
        if backend.mode != d.mode:
            raise ConfigError(f"judge {d.target!r} is a {backend.mode}-mode judge, not {d.mode}")
        return cls(backend, d)

    @classmethod
    def from_spec(cls, spec: str, **overrides) -> JudgeClient:
        return cls.from_descriptor(parse_judge_spec(spec, **overrides))

    def close(self):
        close = getattr(self.backend, "close", None)
        if close:
            close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _validate(self, value: float, rid: str) -> float:
        if not math.isfinite(value):
            raise ProtocolError(f"non-finite potential for {rid!r}")
        if 0.0 <= value <= 1.0:
            return value
        if self.policy is ValidationPolicy.STRICT:
            raise OutOfRange(0, value)
        with self._count_lock:
            self.clamped += 1
        return min(1.0, max(0.0, value))

    def potential_of(self, context: str, observation: Observation, anchors=(None, None), request_id: str = "q") -> float:
        if self.mode != "potential":
            raise ConfigError("potential_of needs a potential-mode judge")
        req = JudgeRequest(request_id, "potential", context, observation=observation,
                           ref_start=anchors[0], ref_end=anchors[1])
        return self._validate(float(self.backend.potential(req)), request_id)

    def judge_pair(self, pair: ProgressPair) -> JudgeVerdict:
        before, after = _pair_observations(pair)
        anchors = (pair.ref_start, pair.ref_end)
        if self.mode == "pairwise":
            req = JudgeRequest(pair.id, "pairwise", pair.context, before=before, after=after,
                               ref_start=pair.ref_start, ref_end=pair.ref_end)
            return JudgeVerdict(pair.id, direction=int(self.backend.direction(req)))
        pb = self.potential_of(pair.context, before, anchors, f"{pair.id}:before")
        pa = self.potential_of(pair.context, after, anchors, f"{pair.id}:after")
        tie = pa == pb
        if tie:
            with self._count_lock:
                self.ties += 1
        return JudgeVerdict(pair.id, direction=1 if pa > pb else -1, before_potential=pb,
                            after_potential=pa, tie=tie)

    def pairwise_of(self, pair: ProgressPair) -> int:
        return self.judge_pair(pair).direction

    def batch_judge(self, pairs: Sequence[ProgressPair], max_in_flight: int | None = None) -> list[JudgeVerdict]:
        """Judge every pair; output order equals input order.

        Per-item failures become verdicts with ``error`` set. Raises
        :class:`BatchFailed` (carrying the verdicts) only if every item fails.
        """
        if not pairs:
            raise ValueError("batch_judge needs at least one pair")
        workers = max_in_flight or self.descriptor.max_in_flight
        if self.descriptor.single_threaded:
            workers = 1

        def one(pair):
            try:
                return self.judge_pair(pair)
            except (JudgeError, OutOfRange, ConfigError) as exc:
                return JudgeVerdict(pair.id, error=str(exc), error_kind=type(exc).__name__)
            except Exception as exc:  # isolate judge-side defects per item
                logger.exception("judge failed on %s", pair.id)
                return JudgeVerdict(pair.id, error=str(exc), error_kind=type(exc).__name__)

        if workers <= 1:
            verdicts = [one(p) for p in pairs]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                verdicts = list(pool.map(one, pairs))
        if all(not v.ok for v in verdicts):
            raise BatchFailed(verdicts)
        return verdicts


def potential_of(judge: JudgeClient, context: str, observation: Observation, anchors=(None, None)) -> float:
    return judge.potential_of(context, observation, anchors)


def pairwise_of(judge: JudgeClient, pair: ProgressPair) -> int:
    return judge.pairwise_of(pair)


def batch_judge(judge: JudgeClient, pairs: Sequence[ProgressPair], max_in_flight: int | None = None):
    return judge.batch_judge(pairs, max_in_flight)


def write_verdicts(path: str | Path, verdicts: Sequence[JudgeVerdict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for v in verdicts:
            fh.write(json.dumps(v.to_dict(), sort_keys=True) + "\n")
