"""Scenario documents and simulation wiring.

A scenario is a flat UTF-8 ``key = value`` document with ``#`` comments and
dotted keys.  Machines are named m1..mN, clients c<k> after their key index,
and a client's job shares its id.  Loading validates every value and keeps
the explicit keys in canonical form, so a loaded scenario round-trips to an
identical normalized document.

Key reference (defaults in parentheses):

    n_machines                 (1)      machines in the system
    horizon                    (200)    virtual-time bound, time units
    seed                       (0)      base RNG seed
    semantics_mode             (normal) or no-release: never time out or free
    failure_budget             (unset)  worst-case mode: kill floor(b*N)
                                        machines right after launch instead
                                        of drawing per-execution deaths
    machine.lambda             (0)      per-execution death probability
    machine.exec_time          (10)     default process execution time T
    machine.unavailable_rate   (0)      chance of leaving available, per entry
    machine.unavailable_duration (5)    recovery delay in local mode
    machine.detection_delay    (1)      failure-detector latency
    machine.idle_failure_mode  (local)  local | unavailable | silent
    bus.latency                (1)      propagation delay, advertise/discover
    bus.staleness_window       (0)      withdrawn entries stay visible this long
    client.<k>.nb_nodes        (1)      machines required (NB)
    client.<k>.semantics       (fail)   wait | fail
    client.<k>.timeout         (30)     wait semantics: max time in reserve
    client.<k>.retry_delay     (5)      base delay before a fresh attempt
    client.<k>.retry_jitter    (1/2)    +-fraction of uniform jitter on retry
    client.<k>.submit_at       (0)      submission instant
    client.<k>.max_retries     (unbounded) or integer >= 0
    client.<k>.reply_timeout   (4 x latency) silence-means-KO threshold
    client.<k>.launch_timeout  (6 x latency) missing-ack2 threshold
    client.<k>.attempt_window  (2 x latency) fail-semantics stall window
    client.<k>.exec_time       (machine.exec_time) job execution time
    client.<k>.exec_jitter     (0)      +-fraction on per-machine exec time
    client.<k>.max_outstanding (1)      in-flight request cap
    inject.die.<machine-id>    (unset)  force that machine to fail at a time
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction

from .bus import ZeroconfBus
from .client import Client, ClientSpec, SEMANTICS_FAIL, SEMANTICS_WAIT
from .kernel import EV_CLOCK, MonteCarloRandomness, Simulator, Trace
from .machine import IDLE_FAILURE_MODES, Machine, MachineParams
from .timebase import MICRO, Time, fmt, units


class ScenarioError(ValueError):
    """Validation failure; names the offending key and constraint."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


MODE_NORMAL = "normal"
MODE_NO_RELEASE = "no-release"

_CLIENT_KEY = re.compile(r"^client\.(\d+)\.([a-z_]+)$")
_INJECT_KEY = re.compile(r"^inject\.die\.(m\d+)$")

_GLOBAL_KEYS = {"n_machines", "horizon", "seed", "semantics_mode", "failure_budget"}
_MACHINE_KEYS = {
    "machine.lambda",
    "machine.exec_time",
    "machine.unavailable_rate",
    "machine.unavailable_duration",
    "machine.detection_delay",
    "machine.idle_failure_mode",
}
_BUS_KEYS = {"bus.latency", "bus.staleness_window"}
_CLIENT_FIELDS = {
    "nb_nodes",
    "semantics",
    "timeout",
    "retry_delay",
    "retry_jitter",
    "submit_at",
    "max_retries",
    "reply_timeout",
    "launch_timeout",
    "attempt_window",
    "exec_time",
    "exec_jitter",
    "max_outstanding",
}


@dataclass(slots=True)
class Scenario:
    n_machines: int
    horizon: Time
    seed: int
    semantics_mode: str
    failure_budget: Fraction | None
    machine: MachineParams
    bus_latency: Time
    staleness_window: Time
    clients: list[ClientSpec]
    injections: list[tuple[str, Time]]
    kv: dict[str, str] = field(default_factory=dict)  # canonical explicit keys

    @property
    def machine_ids(self) -> list[str]:
        return [f"m{i + 1}" for i in range(self.n_machines)]

    @property
    def client_ids(self) -> list[str]:
        return [c.client_id for c in self.clients]

    def to_text(self) -> str:
        return "".join(f"{k} = {self.kv[k]}\n" for k in sorted(self.kv))

    def with_params(self, overrides: dict[str, str]) -> "Scenario":
        kv = dict(self.kv)
        for key, value in overrides.items():
            kv[key] = str(value)
        return load_kv(kv)


# -- value parsers -----------------------------------------------------------


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ScenarioError(key, f"expected an integer, got {raw!r}") from None


def _parse_time(key: str, raw: str) -> Time:
    try:
        return units(raw)
    except (ValueError, ZeroDivisionError):
        raise ScenarioError(key, f"expected a time in units, got {raw!r}") from None


def _parse_fraction(key: str, raw: str, lo=Fraction(0), hi=Fraction(1)) -> Fraction:
    try:
        value = Fraction(raw)
    except (ValueError, ZeroDivisionError):
        raise ScenarioError(key, f"expected a probability, got {raw!r}") from None
    if not (lo <= value <= hi):
        raise ScenarioError(key, f"must be within [{lo}, {hi}], got {raw}")
    return value


def _positive_time(key: str, value: Time) -> Time:
    if value <= 0:
        raise ScenarioError(key, "must be a positive duration")
    return value


def _nonneg_time(key: str, value: Time) -> Time:
    if value < 0:
        raise ScenarioError(key, "must be a non-negative duration")
    return value


# -- document parsing ----------------------------------------------------------


def parse_document(text: str) -> dict[str, str]:
    """Raw key/value pairs in document order; duplicate keys rejected."""
    kv: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ScenarioError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, _, raw = body.partition("=")
        key = key.strip()
        raw = raw.strip()
        if not key or not raw:
            raise ScenarioError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        if key in kv:
            raise ScenarioError(key, "duplicate key")
        kv[key] = raw
    return kv


def load_scenario(text: str) -> Scenario:
    return load_kv(parse_document(text))


def load_kv(kv: dict[str, str]) -> Scenario:
    canonical: dict[str, str] = {}

    def take(key: str) -> str | None:
        return kv.get(key)

    # Partition keys; anything unrecognized is an error.
    client_fields: dict[int, dict[str, str]] = {}
    injections_raw: dict[str, str] = {}
    for key in kv:
        if key in _GLOBAL_KEYS or key in _MACHINE_KEYS or key in _BUS_KEYS:
            continue
        m = _CLIENT_KEY.match(key)
        if m:
            idx, fld = int(m.group(1)), m.group(2)
            if fld not in _CLIENT_FIELDS:
                raise ScenarioError(key, "unknown client field")
            if idx < 1:
                raise ScenarioError(key, "client index must be >= 1")
            client_fields.setdefault(idx, {})[fld] = kv[key]
            continue
        m = _INJECT_KEY.match(key)
        if m:
            injections_raw[m.group(1)] = kv[key]
            continue
        raise ScenarioError(key, "unknown key")

    # Globals.
    n_machines = _parse_int("n_machines", take("n_machines") or "1")
    if n_machines < 1:
        raise ScenarioError("n_machines", "must be >= 1")
    canonical["n_machines"] = str(n_machines)

    horizon = _positive_time("horizon", _parse_time("horizon", take("horizon") or "200"))
    canonical["horizon"] = fmt(horizon)

    seed = _parse_int("seed", take("seed") or "0")
    canonical["seed"] = str(seed)

    mode = take("semantics_mode") or MODE_NORMAL
    if mode not in (MODE_NORMAL, MODE_NO_RELEASE):
        raise ScenarioError("semantics_mode", f"must be normal or no-release, got {mode!r}")
    canonical["semantics_mode"] = mode

    budget_raw = take("failure_budget")
    failure_budget = None
    if budget_raw is not None:
        failure_budget = _parse_fraction("failure_budget", budget_raw)
        canonical["failure_budget"] = str(failure_budget)

    # Machine parameters.
    death_prob = _parse_fraction("machine.lambda", take("machine.lambda") or "0")
    exec_time = _positive_time(
        "machine.exec_time", _parse_time("machine.exec_time", take("machine.exec_time") or "10")
    )
    unavailable_rate = _parse_fraction(
        "machine.unavailable_rate", take("machine.unavailable_rate") or "0"
    )
    unavailable_duration = _positive_time(
        "machine.unavailable_duration",
        _parse_time("machine.unavailable_duration", take("machine.unavailable_duration") or "5"),
    )
    detection_delay = _nonneg_time(
        "machine.detection_delay",
        _parse_time("machine.detection_delay", take("machine.detection_delay") or "1"),
    )
    idle_mode = take("machine.idle_failure_mode") or "local"
    if idle_mode not in IDLE_FAILURE_MODES:
        raise ScenarioError(
            "machine.idle_failure_mode",
            f"must be one of {', '.join(IDLE_FAILURE_MODES)}, got {idle_mode!r}",
        )
    machine = MachineParams(
        death_prob=death_prob,
        exec_time=exec_time,
        unavailable_rate=unavailable_rate,
        unavailable_duration=unavailable_duration,
        detection_delay=detection_delay,
        idle_failure_mode=idle_mode,
    )
    canonical["machine.lambda"] = str(death_prob)
    canonical["machine.exec_time"] = fmt(exec_time)
    canonical["machine.unavailable_rate"] = str(unavailable_rate)
    canonical["machine.unavailable_duration"] = fmt(unavailable_duration)
    canonical["machine.detection_delay"] = fmt(detection_delay)
    canonical["machine.idle_failure_mode"] = idle_mode

    # Bus parameters.
    latency = _nonneg_time("bus.latency", _parse_time("bus.latency", take("bus.latency") or "1"))
    staleness = _nonneg_time(
        "bus.staleness_window",
        _parse_time("bus.staleness_window", take("bus.staleness_window") or "0"),
    )
    canonical["bus.latency"] = fmt(latency)
    canonical["bus.staleness_window"] = fmt(staleness)

    # Clients.
    clients: list[ClientSpec] = []
    for idx in sorted(client_fields):
        fields_ = client_fields[idx]
        prefix = f"client.{idx}"
        cid = f"c{idx}"

        def cf(name: str, default: str | None = None) -> str | None:
            return fields_.get(name, default)

        nb_nodes = _parse_int(f"{prefix}.nb_nodes", cf("nb_nodes", "1"))
        if nb_nodes < 1:
            raise ScenarioError(f"{prefix}.nb_nodes", "must be >= 1")
        semantics = cf("semantics", SEMANTICS_FAIL)
        if semantics not in (SEMANTICS_WAIT, SEMANTICS_FAIL):
            raise ScenarioError(f"{prefix}.semantics", f"must be wait or fail, got {semantics!r}")
        timeout = _positive_time(
            f"{prefix}.timeout", _parse_time(f"{prefix}.timeout", cf("timeout", "30"))
        )
        retry_delay = _positive_time(
            f"{prefix}.retry_delay", _parse_time(f"{prefix}.retry_delay", cf("retry_delay", "5"))
        )
        retry_jitter = _parse_fraction(f"{prefix}.retry_jitter", cf("retry_jitter", "1/2"))
        submit_at = _nonneg_time(
            f"{prefix}.submit_at", _parse_time(f"{prefix}.submit_at", cf("submit_at", "0"))
        )
        retries_raw = cf("max_retries", "unbounded")
        if retries_raw == "unbounded":
            max_retries = None
        else:
            max_retries = _parse_int(f"{prefix}.max_retries", retries_raw)
            if max_retries < 0:
                raise ScenarioError(f"{prefix}.max_retries", "must be >= 0 or unbounded")

        def timing_default(multiple: int) -> str:
            return fmt(multiple * latency) if latency > 0 else "1"

        reply_timeout = _positive_time(
            f"{prefix}.reply_timeout",
            _parse_time(f"{prefix}.reply_timeout", cf("reply_timeout", timing_default(4))),
        )
        if reply_timeout <= 2 * latency:
            raise ScenarioError(
                f"{prefix}.reply_timeout", "must exceed one round trip (2 x bus.latency)"
            )
        launch_timeout = _positive_time(
            f"{prefix}.launch_timeout",
            _parse_time(f"{prefix}.launch_timeout", cf("launch_timeout", timing_default(6))),
        )
        if launch_timeout <= 2 * latency:
            raise ScenarioError(
                f"{prefix}.launch_timeout", "must exceed one round trip (2 x bus.latency)"
            )
        attempt_window = _positive_time(
            f"{prefix}.attempt_window",
            _parse_time(f"{prefix}.attempt_window", cf("attempt_window", timing_default(2))),
        )
        exec_raw = cf("exec_time")
        client_exec = (
            _positive_time(f"{prefix}.exec_time", _parse_time(f"{prefix}.exec_time", exec_raw))
            if exec_raw is not None
            else 0
        )
        exec_jitter = _parse_fraction(f"{prefix}.exec_jitter", cf("exec_jitter", "0"))
        max_outstanding = _parse_int(f"{prefix}.max_outstanding", cf("max_outstanding", "1"))
        if max_outstanding < 1:
            raise ScenarioError(f"{prefix}.max_outstanding", "must be >= 1")

        clients.append(
            ClientSpec(
                client_id=cid,
                nb_nodes=nb_nodes,
                semantics=semantics,
                timeout=timeout,
                retry_delay=retry_delay,
                retry_jitter=retry_jitter,
                submit_at=submit_at,
                max_retries=max_retries,
                reply_timeout=reply_timeout,
                launch_timeout=launch_timeout,
                attempt_window=attempt_window,
                exec_time=client_exec,
                exec_jitter=exec_jitter,
                max_outstanding=max_outstanding,
                no_release=(mode == MODE_NO_RELEASE),
            )
        )
        # Canonical client keys: only the explicitly given fields.
        renders = {
            "nb_nodes": str(nb_nodes),
            "semantics": semantics,
            "timeout": fmt(timeout),
            "retry_delay": fmt(retry_delay),
            "retry_jitter": str(retry_jitter),
            "submit_at": fmt(submit_at),
            "max_retries": "unbounded" if max_retries is None else str(max_retries),
            "reply_timeout": fmt(reply_timeout),
            "launch_timeout": fmt(launch_timeout),
            "attempt_window": fmt(attempt_window),
            "exec_time": fmt(client_exec) if client_exec else None,
            "exec_jitter": str(exec_jitter),
            "max_outstanding": str(max_outstanding),
        }
        for name in fields_:
            rendered = renders[name]
            if rendered is not None:
                canonical[f"{prefix}.{name}"] = rendered

    # Injected failures.
    injections: list[tuple[str, Time]] = []
    valid_ids = {f"m{i + 1}" for i in range(n_machines)}
    for mid in sorted(injections_raw):
        key = f"inject.die.{mid}"
        if mid not in valid_ids:
            raise ScenarioError(key, f"no such machine (1..{n_machines})")
        at = _nonneg_time(key, _parse_time(key, injections_raw[mid]))
        injections.append((mid, at))
        canonical[key] = fmt(at)

    return Scenario(
        n_machines=n_machines,
        horizon=horizon,
        seed=seed,
        semantics_mode=mode,
        failure_budget=failure_budget,
        machine=machine,
        bus_latency=latency,
        staleness_window=staleness,
        clients=clients,
        injections=injections,
        kv=canonical,
    )


# -- simulation wiring ----------------------------------------------------------


class BudgetKiller:
    """Worst-case failure mode: kills the budgeted number of machines right
    after launch, spreading the first kills across distinct jobs."""

    def __init__(self, sim: Simulator, kill_count: int, all_jobs: set[str]):
        self.sim = sim
        self.remaining = kill_count
        self.all_jobs = all_jobs
        self.jobs_hit: set[str] = set()

    def __call__(self, machine_id: str, job: str) -> None:
        if self.remaining <= 0:
            return
        if job in self.jobs_hit and not self.all_jobs <= self.jobs_hit:
            return
        self.jobs_hit.add(job)
        self.remaining -= 1
        self.sim.schedule_at(self.sim.now, EV_CLOCK, machine_id, tag="injected-death")


def build_simulation(
    scenario: Scenario,
    seed: int | None = None,
    randomness: MonteCarloRandomness | None = None,
) -> Simulator:
    """Wire bus, machines and clients into a ready-to-run kernel."""
    eff_seed = scenario.seed if seed is None else seed
    if randomness is None:
        randomness = MonteCarloRandomness(eff_seed)
    sim = Simulator(scenario.horizon, randomness)
    sim.unicast_latency = scenario.bus_latency
    bus = ZeroconfBus(sim, scenario.bus_latency, scenario.staleness_window)
    budget_mode = scenario.failure_budget is not None
    machines = [
        Machine(mid, scenario.machine, sim, bus, budget_mode=budget_mode)
        for mid in scenario.machine_ids
    ]
    clients = [Client(spec, sim, bus) for spec in scenario.clients]
    if budget_mode:
        kills = math.floor(scenario.failure_budget * scenario.n_machines)
        sim.running_hook = BudgetKiller(sim, kills, set(scenario.client_ids))
    for machine in machines:
        machine.start()
    for client in clients:
        client.start()
    for mid, at in scenario.injections:
        sim.schedule_at(at, EV_CLOCK, mid, tag="injected-death")
    return sim


def run_simulation(
    scenario: Scenario,
    seed: int | None = None,
    randomness: MonteCarloRandomness | None = None,
) -> Trace:
    return build_simulation(scenario, seed=seed, randomness=randomness).run()
