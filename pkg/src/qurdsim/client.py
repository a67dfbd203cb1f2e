"""Reservation-system automaton for one client (one job).

The client discovers machines on the bus and contacts them one by one
(the outstanding-request cap defaults to 1, matching sequential contact),
counting OK answers until it holds ``nb_nodes`` machines.  It then launches
the job everywhere, counts start-up acknowledgements, waits for completion
notices, and releases everything.

An attempt that cannot be filled resolves per the configured semantics:
``wait`` holds its partial reservation until a timeout, ``fail`` releases as
soon as the discovery snapshot is exhausted; both then free everything and
retry after a (jittered) delay.  A machine dying mid-run sends the client
through the failure state, where it reserves and launches a replacement that
re-executes the process from the beginning.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
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
    EV_RETRY,
    EV_SUBMIT,
    Message,
    SimEvent,
    Simulator,
)
from .timebase import Time

BEGIN = "begin"
RESERVE = "reserve"
LAUNCH = "launch"
WAIT = "wait"
FAILURE = "failure"
DONE = "done"
ABORTED = "aborted"

SEMANTICS_WAIT = "wait"
SEMANTICS_FAIL = "fail"

# Legal transition closure.  Aborted only exists when a retry budget is set.
CLIENT_EDGES = frozenset(
    {
        ("start", BEGIN),
        (BEGIN, RESERVE),
        (RESERVE, LAUNCH),
        (RESERVE, BEGIN),
        (RESERVE, ABORTED),
        (LAUNCH, WAIT),
        (LAUNCH, FAILURE),
        (WAIT, FAILURE),
        (WAIT, DONE),
        (FAILURE, WAIT),
    }
)

# The reservation automaton proper; the coverage property requires these.
CLIENT_CORE_EDGES = frozenset(
    {
        (BEGIN, RESERVE),
        (RESERVE, LAUNCH),
        (RESERVE, BEGIN),
        (LAUNCH, WAIT),
        (WAIT, FAILURE),
        (WAIT, DONE),
        (FAILURE, WAIT),
    }
)


@dataclass(slots=True)
class ClientSpec:
    client_id: str
    nb_nodes: int
    semantics: str = SEMANTICS_FAIL
    timeout: Time = 0  # wait semantics: max residence in reserve
    retry_delay: Time = 0  # base delay before a fresh attempt
    retry_jitter: Fraction = Fraction(1, 2)  # +-50% uniform jitter by default
    submit_at: Time = 0
    max_retries: int | None = None  # None = unbounded
    reply_timeout: Time = 0  # silence on a request counts as KO after this
    launch_timeout: Time = 0  # missing ack2 after this means the machine died
    attempt_window: Time = 0  # fail semantics: stall window ending an attempt
    exec_time: Time = 0  # job execution time; 0 = machine default
    exec_jitter: Fraction = Fraction(0)
    max_outstanding: int = 1
    no_release: bool = False  # diagnostic mode: never time out, never free


class Client:
    def __init__(self, spec: ClientSpec, sim: Simulator, bus: ZeroconfBus):
        self.spec = spec
        self.id = spec.client_id
        self.sim = sim
        self.bus = bus
        self.rng = sim.stream_for(spec.client_id)
        self.state = "start"
        self.reserved: dict[str, None] = {}  # insertion-ordered held machines
        self.acked2: set[str] = set()
        self.acked3: set[str] = set()
        self.contacted: dict[str, int] = {}  # machine -> advertisement epoch
        self.queue: deque[tuple[str, int]] = deque()
        self.pending: dict[str, SimEvent] = {}  # in-flight request timers
        self.repl_timers: dict[str, SimEvent] = {}
        self.window_timer: SimEvent | None = None
        self.timeout_timer: SimEvent | None = None
        self.launch_timer: SimEvent | None = None
        self.retries_used = 0
        self.attempt = 0
        self.done_at: Time | None = None
        sim.add_actor(self.id, self)

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        self._transition(BEGIN, "")
        self.sim.schedule_at(self.spec.submit_at, EV_SUBMIT, self.id)

    def _transition(self, to: str, detail: str) -> None:
        self.sim.record_state(self.id, self.state, to, detail)
        self.state = to

    # -- event dispatch --------------------------------------------------------

    def handle(self, sim: Simulator, ev: SimEvent) -> None:
        if ev.kind == EV_DELIVER:
            self._on_message(ev.msg)
        elif ev.kind == EV_CLOCK:
            self._on_clock(ev.tag)
        elif ev.kind == EV_FAILURE_DETECTED:
            self._on_failure_detected(ev.machine)
        elif ev.kind in (EV_SUBMIT, EV_RETRY):
            if self.state == BEGIN:
                self._start_attempt()
        else:
            raise AssertionError(f"client cannot handle event kind {ev.kind}")

    def _on_message(self, msg: Message) -> None:
        self.sim.record(self.id, "recv", msg.action, msg.src, f"job={msg.job}")
        if msg.action == ACTION_OK:
            self._on_ok(msg.machine)
        elif msg.action == ACTION_KO:
            self._on_ko(msg.machine)
        elif msg.action == ACTION_ACK2:
            self._on_ack2(msg.machine)
        elif msg.action == ACTION_ACK3:
            self._on_ack3(msg.machine)
        else:
            self.sim.record(self.id, "note", msg.action, msg.src, "unexpected action")

    def _on_clock(self, tag: str) -> None:
        if tag == "wait-timeout":
            if self.state == RESERVE:
                self._attempt_failed("timeout")
        elif tag == "attempt-window":
            if self.state == RESERVE and not self.pending and len(self.reserved) < self.spec.nb_nodes:
                self._attempt_failed("window")
        elif tag == "launch-timeout":
            self._on_launch_timeout()
        elif tag.startswith("reply-timeout:"):
            self._on_reply_timeout(tag.split(":", 1)[1])
        elif tag.startswith("repl-launch:"):
            self._on_repl_launch_timeout(tag.split(":", 1)[1])

    # -- discovery and contacting ------------------------------------------------

    def on_discover(self, sim: Simulator, machine_id: str, epoch: int) -> None:
        if self.state not in (RESERVE, FAILURE):
            return
        self.queue.append((machine_id, epoch))
        self._pump()

    def _pump(self) -> None:
        spec = self.spec
        while (
            self.queue
            and len(self.pending) < spec.max_outstanding
            and len(self.reserved) + len(self.pending) < spec.nb_nodes
        ):
            mid, epoch = self.queue.popleft()
            if mid in self.reserved or mid in self.pending:
                continue
            if self.contacted.get(mid) == epoch:
                continue  # already tried this advertisement
            self.contacted[mid] = epoch
            self.sim.send(
                Message(action=ACTION_REQUEST, src=self.id, dst=mid, job=self.id)
            )
            self.pending[mid] = self.sim.schedule_at(
                self.sim.now + spec.reply_timeout,
                EV_CLOCK,
                self.id,
                tag=f"reply-timeout:{mid}",
            )
        self._update_window()

    def _update_window(self) -> None:
        """Fail semantics: an attempt ends after a stall window with no
        progress; re-armed after every event while stalled."""
        self.sim.cancel(self.window_timer)
        self.window_timer = None
        if (
            self.state == RESERVE
            and self.spec.semantics == SEMANTICS_FAIL
            and not self.spec.no_release
            and not self.pending
            and not self.queue
            and len(self.reserved) < self.spec.nb_nodes
        ):
            self.window_timer = self.sim.schedule_at(
                self.sim.now + self.spec.attempt_window,
                EV_CLOCK,
                self.id,
                tag="attempt-window",
            )

    # -- attempt control ---------------------------------------------------------

    def _start_attempt(self) -> None:
        self.attempt += 1
        self.reserved.clear()
        self.acked2.clear()
        self.acked3.clear()
        self.contacted.clear()
        self.queue.clear()
        self.pending.clear()
        self._transition(RESERVE, f"attempt={self.attempt}")
        self.bus.subscribe(self.id)
        if (
            self.spec.semantics == SEMANTICS_WAIT
            and not self.spec.no_release
        ):
            self.timeout_timer = self.sim.schedule_at(
                self.sim.now + self.spec.timeout, EV_CLOCK, self.id, tag="wait-timeout"
            )
        self._update_window()

    def _attempt_failed(self, reason: str) -> None:
        self._cancel_acquisition_timers()
        self.bus.unsubscribe(self.id)
        for mid in self.reserved:
            self.sim.send(
                Message(action=ACTION_CANCEL, src=self.id, dst=mid, job=self.id)
            )
        freed = len(self.reserved)
        self.reserved.clear()
        self.queue.clear()
        self.pending.clear()
        if self.spec.max_retries is not None and self.retries_used >= self.spec.max_retries:
            self._transition(ABORTED, f"freeMachines={freed} reason={reason} retries exhausted")
            return
        self.retries_used += 1
        self._transition(BEGIN, f"freeMachines={freed} reason={reason}")
        self.sim.schedule_at(
            self.sim.now + self._retry_delay(), EV_RETRY, self.id
        )

    def _retry_delay(self) -> Time:
        base = self.spec.retry_delay
        jitter = self.spec.retry_jitter
        if jitter == 0:
            return base
        lo = max(1, int(base * (1 - jitter)))
        hi = max(lo, int(base * (1 + jitter)))
        return self.rng.uniform_int(lo, hi)

    def _cancel_acquisition_timers(self) -> None:
        self.sim.cancel(self.window_timer)
        self.window_timer = None
        self.sim.cancel(self.timeout_timer)
        self.timeout_timer = None
        for timer in self.pending.values():
            self.sim.cancel(timer)

    # -- replies ---------------------------------------------------------------

    def _on_ok(self, mid: str) -> None:
        if self.state in (RESERVE, FAILURE) and mid in self.pending:
            self.sim.cancel(self.pending.pop(mid))
            self.reserved[mid] = None
            if self.state == RESERVE:
                if len(self.reserved) == self.spec.nb_nodes:
                    self._to_launch()
                else:
                    self._pump()
            else:
                self._launch_replacement(mid)
                self._pump()
        else:
            # Late or stray OK: free the machine immediately so no
            # reservation ever leaks.
            self.sim.record(self.id, "note", ACTION_OK, mid, "late ok, cancelling")
            self.sim.send(
                Message(action=ACTION_CANCEL, src=self.id, dst=mid, job=self.id)
            )

    def _on_ko(self, mid: str) -> None:
        if mid in self.pending:
            self.sim.cancel(self.pending.pop(mid))
            self._pump()

    def _on_reply_timeout(self, mid: str) -> None:
        # Silence counts as KO: the machine failed while idle but was still
        # visible, so it will never answer.
        if mid in self.pending:
            del self.pending[mid]
            self._pump()

    # -- launch / wait / done -----------------------------------------------------

    def _launch_msg(self, mid: str) -> Message:
        return Message(
            action=ACTION_LAUNCH,
            src=self.id,
            dst=mid,
            job=self.id,
            exec_time=self.spec.exec_time,
            exec_jitter=self.spec.exec_jitter,
        )

    def _to_launch(self) -> None:
        self._cancel_acquisition_timers()
        self.bus.unsubscribe(self.id)
        self.queue.clear()
        self.pending.clear()
        self._transition(LAUNCH, f"ok={len(self.reserved)} done-sync")
        for mid in self.reserved:
            self.sim.send(self._launch_msg(mid))
        self.launch_timer = self.sim.schedule_at(
            self.sim.now + self.spec.launch_timeout, EV_CLOCK, self.id, tag="launch-timeout"
        )

    def _launch_replacement(self, mid: str) -> None:
        self.sim.send(self._launch_msg(mid))
        self.repl_timers[mid] = self.sim.schedule_at(
            self.sim.now + self.spec.launch_timeout,
            EV_CLOCK,
            self.id,
            tag=f"repl-launch:{mid}",
        )

    def _on_ack2(self, mid: str) -> None:
        if mid not in self.reserved:
            self.sim.record(self.id, "note", ACTION_ACK2, mid, "not held, ignored")
            return
        self.acked2.add(mid)
        timer = self.repl_timers.pop(mid, None)
        self.sim.cancel(timer)
        if self.state in (LAUNCH, FAILURE):
            self._maybe_enter_wait()

    def _maybe_enter_wait(self) -> None:
        if len(self.reserved) != self.spec.nb_nodes:
            return
        if not all(m in self.acked2 for m in self.reserved):
            return
        self.sim.cancel(self.launch_timer)
        self.launch_timer = None
        if self.state == FAILURE:
            self.bus.unsubscribe(self.id)
            self.queue.clear()
        self._transition(WAIT, f"ack2={len(self.acked2)}")
        self._check_done()

    def _on_ack3(self, mid: str) -> None:
        if mid not in self.reserved:
            self.sim.record(self.id, "note", ACTION_ACK3, mid, "not held, ignored")
            return
        self.acked3.add(mid)
        self._check_done()

    def _check_done(self) -> None:
        if self.state != WAIT:
            return
        if len(self.reserved) != self.spec.nb_nodes:
            return
        if not all(m in self.acked3 for m in self.reserved):
            return
        for mid in self.reserved:
            self.sim.send(
                Message(action=ACTION_RELEASE, src=self.id, dst=mid, job=self.id)
            )
        self.done_at = self.sim.now
        self._transition(DONE, f"ack3={len(self.acked3)}")

    # -- failures ---------------------------------------------------------------

    def _on_failure_detected(self, mid: str) -> None:
        if mid not in self.reserved or self.state in (DONE, ABORTED):
            self.sim.record(self.id, "note", "failure-detected", mid, "not held, ignored")
            return
        del self.reserved[mid]
        self.acked2.discard(mid)
        self.acked3.discard(mid)
        self.sim.cancel(self.repl_timers.pop(mid, None))
        if self.state in (LAUNCH, WAIT):
            self._enter_failure(f"machine={mid}")
        elif self.state == FAILURE:
            self._pump()

    def _enter_failure(self, detail: str) -> None:
        if self.state == LAUNCH:
            self.sim.cancel(self.launch_timer)
            self.launch_timer = None
            # Originals that have not acknowledged start-up yet get their own
            # per-machine deadline while the replacement hunt runs.
            for mid in self.reserved:
                if mid not in self.acked2 and mid not in self.repl_timers:
                    self.repl_timers[mid] = self.sim.schedule_at(
                        self.sim.now + self.spec.launch_timeout,
                        EV_CLOCK,
                        self.id,
                        tag=f"repl-launch:{mid}",
                    )
        self._transition(FAILURE, detail)
        self.bus.subscribe(self.id)
        self._pump()

    def _on_launch_timeout(self) -> None:
        if self.state != LAUNCH:
            return
        silent = [m for m in self.reserved if m not in self.acked2]
        for mid in silent:
            del self.reserved[mid]
        self._enter_failure("silent=" + ",".join(silent))

    def _on_repl_launch_timeout(self, mid: str) -> None:
        if self.state != FAILURE or mid not in self.reserved or mid in self.acked2:
            return
        self.repl_timers.pop(mid, None)
        del self.reserved[mid]
        self._pump()
