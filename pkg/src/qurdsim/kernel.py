"""Deterministic virtual-time event kernel.

One kernel owns one simulation run: a heap-ordered event queue, the shared
trace, and per-actor seeded random streams.  Everything in a run is
single-threaded; replica parallelism happens strictly at the whole-run level.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field

from .timebase import Time, fmt, parse

MULTICAST = "*"

# Wire vocabulary.  `ok`/`ko` are the two shapes of the ack1 reply to a
# request; ack2 answers launch; ack3 is the unsolicited completion notice.
ACTION_REQUEST = "request"
ACTION_OK = "ok"
ACTION_KO = "ko"
ACTION_LAUNCH = "launch"
ACTION_ACK2 = "ack2"
ACTION_ACK3 = "ack3"
ACTION_CANCEL = "cancel"
ACTION_RELEASE = "release"
ACTION_ADVERTISE = "advertise"
ACTION_WITHDRAW = "withdraw"
ACTION_DISCOVER = "discover"

_UNICAST_ACTIONS = {
    ACTION_REQUEST,
    ACTION_OK,
    ACTION_KO,
    ACTION_LAUNCH,
    ACTION_ACK2,
    ACTION_ACK3,
    ACTION_CANCEL,
    ACTION_RELEASE,
    ACTION_DISCOVER,
}
_MULTICAST_ACTIONS = {ACTION_ADVERTISE, ACTION_WITHDRAW}


class SchedulingInPast(Exception):
    """Raised when an event is scheduled before the current virtual time."""


@dataclass(slots=True, frozen=True)
class Message:
    """A protocol message.  Advertise/withdraw may be multicast, the rest
    are strictly unicast replies/commands between one client and one machine."""

    action: str
    src: str
    dst: str
    job: str = ""
    machine: str = ""
    exec_time: Time = 0
    exec_jitter: object = 0  # Fraction; kept loose to avoid churn in repr
    epoch: int = 0

    def __post_init__(self):
        if self.action in _UNICAST_ACTIONS and self.dst == MULTICAST:
            raise ValueError(f"{self.action} must be unicast")
        if self.action not in _UNICAST_ACTIONS | _MULTICAST_ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")


# Event kinds
EV_DELIVER = "deliver"
EV_CLOCK = "clock"
EV_FAILURE_DETECTED = "failure-detected"
EV_SUBMIT = "submit"
EV_RETRY = "retry"


@dataclass(slots=True)
class SimEvent:
    """One scheduled occurrence.  (fire_at, seq) is a strict total order."""

    fire_at: Time
    seq: int
    kind: str
    target: str
    msg: Message | None = None
    tag: str = ""
    machine: str = ""
    cancelled: bool = False

    def sort_key(self):
        return (self.fire_at, self.seq)


@dataclass(slots=True)
class TraceRecord:
    """One trace line: a state change, a message hop, or a bus happening."""

    at: Time
    actor: str
    kind: str
    a: str  # from-state / action / machine-id, depending on kind
    b: str  # to-state / peer actor
    detail: str

    def to_line(self) -> str:
        f = lambda s: s if s else "-"
        return "\t".join(
            (fmt(self.at), self.actor, self.kind, f(self.a), f(self.b), f(self.detail))
        )

    @classmethod
    def from_line(cls, line: str) -> "TraceRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 6:
            raise ValueError(f"malformed trace line: {line!r}")
        at, actor, kind, a, b, detail = parts
        g = lambda s: "" if s == "-" else s
        return cls(parse(at), actor, kind, g(a), g(b), g(detail))


class Trace:
    """Append-only record log, serialized one record per line (TSV)."""

    def __init__(self, records: list[TraceRecord] | None = None):
        self.records: list[TraceRecord] = records if records is not None else []

    def append(self, rec: TraceRecord):
        self.records.append(rec)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def to_text(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.records)

    @classmethod
    def from_text(cls, text: str) -> "Trace":
        records = [TraceRecord.from_line(ln) for ln in text.splitlines() if ln.strip()]
        return cls(records)


def substream_seed(seed: int, *parts) -> int:
    """Stable 64-bit sub-seed for (seed, parts).

    sha256 rather than hash() so streams survive interpreter restarts and
    PYTHONHASHSEED; adding an actor never perturbs any other actor's stream.
    """
    text = "/".join([str(seed)] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


class Rng:
    """Per-actor random stream, deterministic in (seed, stream_id)."""

    def __init__(self, seed: int, stream_id: str):
        self.seed = seed
        self.stream_id = stream_id
        self._r = random.Random(substream_seed(seed, stream_id))

    def bernoulli(self, p) -> bool:
        """True with probability p; consumes exactly one draw."""
        if not (0 <= p <= 1):
            raise ValueError(f"probability {p} outside [0, 1]")
        return self._r.random() < p

    def uniform_int(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return self._r.randrange(lo, hi + 1)

    def death_instant(self, lo: int, hi: int) -> int:
        """Death-time draw, separated so oracle mode can discretize it."""
        return self.uniform_int(lo, hi)


class MonteCarloRandomness:
    """Default randomness source: one independent substream per actor."""

    def __init__(self, seed: int):
        self.seed = seed

    def stream_for(self, actor_id: str) -> Rng:
        return Rng(self.seed, actor_id)


class Simulator:
    """Single-run event engine.

    Actors register under an id; events carry a target id and are handed to
    that actor's ``handle(sim, event)``.  Ties at equal fire_at dispatch in
    scheduling order.
    """

    def __init__(self, horizon: Time, randomness: MonteCarloRandomness):
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        self.horizon = horizon
        self.now: Time = 0
        self.trace = Trace()
        self.randomness = randomness
        self.actors: dict[str, object] = {}
        self._queue: list[tuple[Time, int, SimEvent]] = []
        self._seq = 0
        self.unicast_latency: Time = 0  # set by the scenario builder
        self.running_hook = None  # called as hook(machine_id, job) on launch

    # -- wiring -----------------------------------------------------------

    def add_actor(self, actor_id: str, actor) -> None:
        if actor_id in self.actors:
            raise ValueError(f"duplicate actor id {actor_id!r}")
        self.actors[actor_id] = actor

    def stream_for(self, actor_id: str) -> Rng:
        return self.randomness.stream_for(actor_id)

    # -- scheduling -------------------------------------------------------

    def schedule(self, ev: SimEvent) -> SimEvent:
        """Enqueue; the returned event doubles as a cancellation handle."""
        if ev.fire_at < self.now:
            raise SchedulingInPast(
                f"event at {fmt(ev.fire_at)} scheduled at {fmt(self.now)}"
            )
        ev.seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, (ev.fire_at, ev.seq, ev))
        return ev

    def schedule_at(self, at: Time, kind: str, target: str, **kw) -> SimEvent:
        return self.schedule(SimEvent(fire_at=at, seq=0, kind=kind, target=target, **kw))

    def cancel(self, ev: SimEvent | None) -> None:
        if ev is not None:
            ev.cancelled = True

    def send(self, msg: Message) -> None:
        """Record the send and schedule delivery after the unicast latency."""
        self.record(msg.src, "send", msg.action, msg.dst, _msg_detail(msg))
        self.schedule_at(self.now + self.unicast_latency, EV_DELIVER, msg.dst, msg=msg)

    # -- tracing ----------------------------------------------------------

    def record(self, actor: str, kind: str, a: str, b: str, detail: str = "") -> None:
        self.trace.append(TraceRecord(self.now, actor, kind, a, b, detail))

    def record_state(self, actor: str, frm: str, to: str, detail: str = "") -> None:
        self.record(actor, "state", frm, to, detail)

    # -- main loop --------------------------------------------------------

    def run(self) -> Trace:
        """Dispatch events in (fire_at, seq) order up to the horizon."""
        while self._queue:
            fire_at, _, ev = self._queue[0]
            if fire_at > self.horizon:
                break
            heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            self.now = fire_at
            actor = self.actors.get(ev.target)
            if actor is None:
                raise KeyError(f"event targets unknown actor {ev.target!r}")
            actor.handle(self, ev)
        self.now = self.horizon
        return self.trace


def _msg_detail(msg: Message) -> str:
    parts = []
    if msg.job:
        parts.append(f"job={msg.job}")
    if msg.machine:
        parts.append(f"machine={msg.machine}")
    if msg.action == ACTION_LAUNCH:
        parts.append(f"exec={fmt(msg.exec_time)}")
    if msg.epoch:
        parts.append(f"epoch={msg.epoch}")
    return " ".join(parts)
