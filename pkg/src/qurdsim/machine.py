"""Per-machine timed automaton.

A machine cycles available -> reserved -> running -> finished -> available.
At launch it draws its fate: with the configured death probability it enters
``fragile`` and dies at an instant drawn uniformly inside the execution
interval; otherwise it enters ``sustain`` and finishes after exactly the
execution time.  ``dead`` is absorbing.  Requests are answered OK only from
``available``; every other live state answers KO; dead machines stay silent.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .bus import ZeroconfBus
from .kernel import (
    ACTION_ACK2,
    ACTION_ACK3,
    ACTION_CANCEL,
    ACTION_KO,
    ACTION_LAUNCH,
    ACTION_OK,
    ACTION_RELEASE,
    ACTION_REQUEST,
    EV_CLOCK,
    EV_DELIVER,
    EV_FAILURE_DETECTED,
    Message,
    SimEvent,
    Simulator,
)
from .timebase import Time, fmt

AVAILABLE = "available"
UNAVAILABLE = "unavailable"
RESERVED = "reserved"
SUSTAIN = "sustain"
FRAGILE = "fragile"
FINISHED = "finished"
DEAD = "dead"

RUNNING_STATES = (SUSTAIN, FRAGILE)

# Idle-failure behavior: "local" is a recoverable operator action; the two
# failure modes either park the machine in unavailable for good or let it die
# silently while still visible on the bus.
IDLE_LOCAL = "local"
IDLE_UNAVAILABLE = "unavailable"
IDLE_SILENT = "silent"
IDLE_FAILURE_MODES = (IDLE_LOCAL, IDLE_UNAVAILABLE, IDLE_SILENT)

# Legal transition closure, including injected-failure edges.
MACHINE_EDGES = frozenset(
    {
        ("start", AVAILABLE),
        (AVAILABLE, RESERVED),
        (AVAILABLE, UNAVAILABLE),
        (AVAILABLE, DEAD),
        (UNAVAILABLE, AVAILABLE),
        (UNAVAILABLE, DEAD),
        (RESERVED, AVAILABLE),
        (RESERVED, SUSTAIN),
        (RESERVED, FRAGILE),
        (RESERVED, DEAD),
        (SUSTAIN, FINISHED),
        (SUSTAIN, DEAD),
        (FRAGILE, DEAD),
        (FINISHED, AVAILABLE),
        (FINISHED, UNAVAILABLE),
    }
)

# The machine automaton proper (compact figure plus the volatility detail);
# the coverage property requires every one of these to appear in a batch.
MACHINE_CORE_EDGES = frozenset(
    {
        (AVAILABLE, RESERVED),
        (AVAILABLE, UNAVAILABLE),
        (UNAVAILABLE, AVAILABLE),
        (RESERVED, AVAILABLE),
        (RESERVED, SUSTAIN),
        (RESERVED, FRAGILE),
        (SUSTAIN, FINISHED),
        (FRAGILE, DEAD),
        (FINISHED, AVAILABLE),
    }
)


@dataclass(slots=True)
class MachineParams:
    death_prob: Fraction = Fraction(0)  # per-execution death probability
    exec_time: Time = 0  # default process execution time T
    unavailable_rate: Fraction = Fraction(0)  # per entry into available
    unavailable_duration: Time = 0  # recovery delay in the local mode
    detection_delay: Time = 0  # failure-detector notification latency
    idle_failure_mode: str = IDLE_LOCAL


class Machine:
    def __init__(
        self,
        machine_id: str,
        params: MachineParams,
        sim: Simulator,
        bus: ZeroconfBus,
        budget_mode: bool = False,
    ):
        self.id = machine_id
        self.params = params
        self.sim = sim
        self.bus = bus
        self.budget_mode = budget_mode  # deaths are injected, not drawn
        self.rng = sim.stream_for(machine_id)
        self.state = "start"
        self.job = ""
        self.exec_timer: SimEvent | None = None
        self.recover_timer: SimEvent | None = None
        sim.add_actor(machine_id, self)

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        self._enter_available("boot")

    def _transition(self, to: str, detail: str = "") -> None:
        self.sim.record_state(self.id, self.state, to, detail)
        self.state = to

    def _enter_available(self, detail: str) -> None:
        self._transition(AVAILABLE, detail)
        self.job = ""
        self.bus.advertise(self.id)
        rate = self.params.unavailable_rate
        if rate > 0 and self.rng.bernoulli(rate):
            self._go_unavailable()

    def _go_unavailable(self) -> None:
        mode = self.params.idle_failure_mode
        self.bus.withdraw(self.id)
        if mode == IDLE_SILENT:
            # Failed while idle: possibly still visible on the bus, never
            # answers another request.
            self._transition(DEAD, "idle-failure mode=silent")
            return
        self._transition(UNAVAILABLE, f"idle mode={mode}")
        if mode == IDLE_LOCAL:
            self.recover_timer = self.sim.schedule_at(
                self.sim.now + self.params.unavailable_duration,
                EV_CLOCK,
                self.id,
                tag="recover",
            )

    # -- event dispatch ------------------------------------------------------

    def handle(self, sim: Simulator, ev: SimEvent) -> None:
        if ev.kind == EV_DELIVER:
            self._on_message(ev.msg)
        elif ev.kind == EV_CLOCK:
            self._on_clock(ev.tag)
        else:
            raise AssertionError(f"machine cannot handle event kind {ev.kind}")

    def _on_message(self, msg: Message) -> None:
        if self.state == DEAD:
            # Dead (or silently failed) machines never answer.
            self.sim.record(self.id, "note", msg.action, msg.src, "ignored: dead")
            return
        self.sim.record(self.id, "recv", msg.action, msg.src, f"job={msg.job}")
        if msg.action == ACTION_REQUEST:
            self._on_request(msg)
        elif msg.action == ACTION_LAUNCH:
            self._on_launch(msg)
        elif msg.action == ACTION_CANCEL:
            self._on_cancel(msg)
        elif msg.action == ACTION_RELEASE:
            self._on_release(msg)
        else:
            self.sim.record(self.id, "note", msg.action, msg.src, "unexpected action")

    def _reply(self, action: str, to: str, job: str) -> None:
        self.sim.send(Message(action=action, src=self.id, dst=to, job=job, machine=self.id))

    def _on_request(self, msg: Message) -> None:
        if self.state == AVAILABLE:
            self.bus.withdraw(self.id)
            self._transition(RESERVED, f"job={msg.job}")
            self.job = msg.job
            self._reply(ACTION_OK, msg.src, msg.job)
        else:
            self._reply(ACTION_KO, msg.src, msg.job)

    def _on_cancel(self, msg: Message) -> None:
        if self.state == RESERVED and self.job == msg.job:
            self._enter_available("cancel")
        else:
            self.sim.record(self.id, "note", ACTION_CANCEL, msg.src, "stale cancel ignored")

    def _on_launch(self, msg: Message) -> None:
        if self.state != RESERVED or self.job != msg.job:
            self.sim.record(self.id, "note", ACTION_LAUNCH, msg.src, "stale launch ignored")
            return
        # Start-up is acknowledged before the fate of the execution resolves.
        self._reply(ACTION_ACK2, msg.src, msg.job)
        duration = self._exec_duration(msg)
        dies = False if self.budget_mode else self.rng.bernoulli(self.params.death_prob)
        p = self.params.death_prob
        if dies:
            lo = self.sim.now + 1
            hi = max(lo, self.sim.now + duration - 1)
            death_at = self.rng.death_instant(lo, hi)
            self._transition(FRAGILE, f"prob=die p={p}")
            self.exec_timer = self.sim.schedule_at(
                death_at, EV_CLOCK, self.id, tag="death"
            )
        else:
            self._transition(SUSTAIN, f"prob=live p={1 - p}")
            self.exec_timer = self.sim.schedule_at(
                self.sim.now + duration, EV_CLOCK, self.id, tag="exec-done"
            )
        if self.sim.running_hook is not None:
            self.sim.running_hook(self.id, self.job)

    def _exec_duration(self, msg: Message) -> Time:
        base = msg.exec_time if msg.exec_time > 0 else self.params.exec_time
        jitter = Fraction(msg.exec_jitter)
        if jitter == 0:
            return base
        lo = max(1, int(base * (1 - jitter)))
        hi = max(lo, int(base * (1 + jitter)))
        return self.rng.uniform_int(lo, hi)

    def _on_release(self, msg: Message) -> None:
        if self.state == FINISHED and self.job == msg.job:
            self._enter_available("release")
        else:
            self.sim.record(self.id, "note", ACTION_RELEASE, msg.src, "stale release ignored")

    def _on_clock(self, tag: str) -> None:
        if tag == "exec-done" and self.state == SUSTAIN:
            self._transition(FINISHED, "guard=exec-done")
            self._reply(ACTION_ACK3, self.job, self.job)
        elif tag == "death" and self.state == FRAGILE:
            self._die_running("drawn death")
        elif tag == "recover" and self.state == UNAVAILABLE:
            self._enter_available("recover")
        elif tag == "injected-death":
            self.fail_now("injected")
        # Anything else is a stale timer superseded by other progress.

    # -- failures -----------------------------------------------------------

    def _die_running(self, detail: str) -> None:
        owner = self.job
        self._transition(DEAD, detail)
        self.sim.schedule_at(
            self.sim.now + self.params.detection_delay,
            EV_FAILURE_DETECTED,
            owner,
            machine=self.id,
        )

    def fail_now(self, detail: str) -> None:
        """Per-state failure semantics for injected (or budgeted) deaths."""
        self.sim.cancel(self.exec_timer)
        self.sim.cancel(self.recover_timer)
        if self.state in RUNNING_STATES:
            self._die_running(detail)
        elif self.state == RESERVED:
            # Never confirms start-up; the client's launch timeout covers it.
            self._transition(DEAD, detail)
        elif self.state == FINISHED:
            # The local process already completed, so the job is unaffected.
            self._transition(UNAVAILABLE, detail)
        elif self.state == AVAILABLE:
            self.bus.withdraw(self.id)
            if self.params.idle_failure_mode == IDLE_UNAVAILABLE:
                self._transition(UNAVAILABLE, detail)
            else:
                self._transition(DEAD, detail)
        elif self.state == UNAVAILABLE:
            self._transition(DEAD, detail)
        # Already dead: nothing to do.
