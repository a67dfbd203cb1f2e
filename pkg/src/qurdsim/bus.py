"""Simulated Zeroconf discovery bus.

Machines advertise and withdraw; subscribed clients receive one discovery
notification per visible machine.  A withdrawn machine stays visible for
``staleness_window`` micro-units, so clients can discover (and uselessly
contact) a machine that is no longer free — the real protocol's staleness
hazard.
"""

from __future__ import annotations

from dataclasses import dataclass

from .kernel import EV_CLOCK, EV_DELIVER, ACTION_DISCOVER, Message, SimEvent, Simulator
from .timebase import Time

BUS_ID = "bus"


@dataclass(slots=True)
class BusEntry:
    advertised_at: Time
    epoch: int
    stale_until: Time | None = None  # None = live; otherwise visible while now < stale_until


class ZeroconfBus:
    """Kernel-owned bus state; registered as the actor ``bus``.

    Visibility rule: an entry is visible at time t if it is live, or if it
    was withdrawn and t < stale_until.  Snapshots are evaluated at delivery
    time (subscribe time + latency), not at subscribe time.
    """

    def __init__(self, sim: Simulator, latency: Time, staleness_window: Time):
        self.sim = sim
        self.latency = latency
        self.staleness_window = staleness_window
        self.entries: dict[str, BusEntry] = {}
        self.subscribers: dict[str, None] = {}  # insertion-ordered set
        sim.add_actor(BUS_ID, self)

    # -- machine side -------------------------------------------------------

    def advertise(self, machine_id: str) -> None:
        now = self.sim.now
        entry = self.entries.get(machine_id)
        if entry is not None and entry.stale_until is None:
            self.sim.record(BUS_ID, "note", machine_id, "", "duplicate advertise ignored")
            return
        epoch = entry.epoch + 1 if entry is not None else 1
        self.entries[machine_id] = BusEntry(advertised_at=now, epoch=epoch)
        self.sim.record(BUS_ID, "advertise", machine_id, "", f"epoch={epoch}")
        for client_id in self.subscribers:
            self._schedule_discover(client_id, machine_id, epoch, now + self.latency)

    def withdraw(self, machine_id: str) -> None:
        now = self.sim.now
        entry = self.entries.get(machine_id)
        if entry is None or entry.stale_until is not None:
            self.sim.record(BUS_ID, "note", machine_id, "", "withdraw of unadvertised machine")
            return
        entry.stale_until = now + self.staleness_window
        self.sim.record(
            BUS_ID, "withdraw", machine_id, "", f"epoch={entry.epoch}"
        )

    # -- client side ----------------------------------------------------------

    def subscribe(self, client_id: str) -> None:
        """Start listening: a snapshot of the visible set is delivered after
        the propagation latency, then live advertisements stream in."""
        self.subscribers[client_id] = None
        self.sim.schedule_at(
            self.sim.now + self.latency, EV_CLOCK, BUS_ID, tag=f"snapshot:{client_id}"
        )

    def unsubscribe(self, client_id: str) -> None:
        self.subscribers.pop(client_id, None)

    # -- internals -------------------------------------------------------------

    def _visible(self, at: Time) -> list[tuple[str, BusEntry]]:
        """Visible entries in advertisement order, ties broken by machine id."""
        out = [
            (mid, e)
            for mid, e in self.entries.items()
            if e.stale_until is None or at < e.stale_until
        ]
        out.sort(key=lambda pair: (pair[1].advertised_at, pair[0]))
        return out

    def _schedule_discover(self, client_id: str, machine_id: str, epoch: int, at: Time):
        msg = Message(
            action=ACTION_DISCOVER, src=BUS_ID, dst=client_id,
            machine=machine_id, epoch=epoch,
        )
        self.sim.schedule_at(at, EV_DELIVER, BUS_ID, msg=msg)

    def handle(self, sim: Simulator, ev: SimEvent) -> None:
        if ev.kind == EV_CLOCK and ev.tag.startswith("snapshot:"):
            client_id = ev.tag.split(":", 1)[1]
            if client_id not in self.subscribers:
                return
            for mid, entry in self._visible(sim.now):
                self._schedule_discover(client_id, mid, entry.epoch, sim.now)
        elif ev.kind == EV_DELIVER and ev.msg is not None:
            # Discovery notification reaching one client.
            msg = ev.msg
            client = sim.actors.get(msg.dst)
            if msg.dst not in self.subscribers or client is None:
                return
            entry = self.entries.get(msg.machine)
            stale = entry is None or entry.stale_until is not None or entry.epoch != msg.epoch
            detail = f"epoch={msg.epoch}" + (" stale" if stale else "")
            sim.record(BUS_ID, "discover", msg.machine, msg.dst, detail)
            client.on_discover(sim, msg.machine, msg.epoch)
        else:
            raise AssertionError(f"bus cannot handle event {ev.kind}/{ev.tag}")
