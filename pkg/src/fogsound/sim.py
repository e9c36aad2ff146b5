"""Deterministic discrete-event simulation of an N-node star topology.

Every node loops over rounds of *record -> device stages -> handoff ->
transmit -> wait for reply*. A single server admits nodes one at a time in
round-robin address order and holds the grant for a whole exchange
(transfer, service, reply). The simulated clock runs in integer
microseconds; simultaneous events are ordered by (time, node address,
sequence number).
"""
from __future__ import annotations

import csv
import heapq
import io
import ipaddress
import random
from dataclasses import dataclass, field, replace
from typing import Callable

from . import power as pw
from .errors import InvalidConfig
from .placement import PRESETS, Stage, Tier, preset, uplink_payload, validate
from .wire import HEADER_BYTES, REPLY_BYTES, Kind

US = 1_000_000

# Link defaults: ~20 Mbit/s effective Wi-Fi goodput and a 2 ms one-way delay.
BANDWIDTH_BPS = 2_500_000.0
BASE_DELAY_MS = 2.0
FOG_HOP_MS = 0.0


@dataclass(frozen=True)
class ServerService:
    """Server seconds spent per request kind, storage included."""

    # Audio service sized by scripts/calibrate.py: config2 stays below 70 %
    # server utilisation at 8 nodes and just saturates at 12.
    classify_from_audio_s: float = 1.3339
    classify_from_features_s: float = 0.15
    store_s: float = 0.001

    def for_kind(self, kind: Kind) -> float:
        if kind is Kind.RAW_AUDIO:
            return self.classify_from_audio_s + self.store_s
        if kind is Kind.FEATURES:
            return self.classify_from_features_s + self.store_s
        return self.store_s


@dataclass(frozen=True)
class SimConfig:
    n_nodes: int = 1
    placement: str = "proposed"
    rounds: int = 1
    seed: int = 0
    bandwidth_Bps: float = BANDWIDTH_BPS
    base_delay_ms: float = BASE_DELAY_MS
    fog_hop_ms: float = FOG_HOP_MS
    jitter_ms: float = 0.0
    clip_seconds: float = 4.0
    stage_durations: pw.StageDurations = pw.StageDurations()
    server_service: ServerService = ServerService()
    params: pw.PowerParams | None = None
    stagger: bool = True

    def check(self):
        if self.n_nodes < 1 or self.rounds < 1:
            raise InvalidConfig("n_nodes and rounds must be >= 1")
        if self.placement not in PRESETS:
            raise InvalidConfig(f"unknown placement {self.placement!r}")
        if self.bandwidth_Bps <= 0:
            raise InvalidConfig("bandwidth must be positive")
        if min(self.base_delay_ms, self.fog_hop_ms, self.jitter_ms, self.clip_seconds) < 0:
            raise InvalidConfig("times must be non-negative")

    @property
    def power_params(self) -> pw.PowerParams:
        return self.params or pw.calibrate_defaults()


def node_address(i: int) -> str:
    return str(ipaddress.IPv4Address("10.0.0.1") + i)


def message_kind(placement: str) -> Kind:
    cfg = preset(placement)
    if cfg[Stage.CLASSIFY] == Tier.DEVICE:
        return Kind.RESULT
    if cfg[Stage.EXTRACT] == Tier.DEVICE:
        return Kind.FEATURES
    return Kind.RAW_AUDIO


def _us(seconds: float) -> int:
    return int(round(seconds * US))


class _Link:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)

    def serialisation_us(self, nbytes: int) -> int:
        return _us(nbytes / self.cfg.bandwidth_Bps)

    def delivery_us(self, nbytes: int) -> int:
        jitter = self.rng.uniform(0.0, self.cfg.jitter_ms) if self.cfg.jitter_ms else 0.0
        ms = self.cfg.base_delay_ms + self.cfg.fog_hop_ms + jitter
        return _us(ms / 1000.0) + self.serialisation_us(nbytes)


@dataclass
class RoundRecord:
    node: int
    iteration: int
    start_us: int
    ready_us: int
    grant_us: int
    received_us: int
    end_us: int
    wire_bytes: int
    payload_bytes: int
    tx_us: int
    avg_power_mw: float = 0.0
    energy_mj: float = 0.0

    @property
    def latency_ms(self) -> float:
        return (self.received_us - self.ready_us) / 1000.0

    @property
    def duration_s(self) -> float:
        return (self.end_us - self.start_us) / US


@dataclass
class MetricsRow:
    experiment: str
    config: str
    n_nodes: int
    iteration: int
    avg_latency_ms: float
    avg_power_mw: float
    energy_mj: float
    duration_s: float


CSV_COLUMNS = ("experiment", "config", "n_nodes", "iteration", "avg_latency_ms",
               "avg_power_mw", "energy_mj", "duration_s")


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)
    grant_counts: dict[str, int] = field(default_factory=dict)
    rounds: list[RoundRecord] = field(default_factory=list)
    bytes_received: int = 0
    trace: list[tuple[int, str, int]] = field(default_factory=list)

    def mean(self, attr: str) -> float:
        return sum(getattr(r, attr) for r in self.rows) / len(self.rows)

    @property
    def avg_latency_ms(self) -> float:
        return self.mean("avg_latency_ms")

    @property
    def avg_power_mw(self) -> float:
        return self.mean("avg_power_mw")

    @property
    def energy_mj(self) -> float:
        return sum(r.energy_mj for r in self.rows)

    @property
    def round_duration_s(self) -> float:
        return self.mean("duration_s")

    def extend(self, other: "MetricsReport") -> "MetricsReport":
        self.rows += other.rows
        return self


def write_csv(rows, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.experiment, r.config, r.n_nodes, r.iteration, f"{r.avg_latency_ms:.6f}",
                    f"{r.avg_power_mw:.6f}", f"{r.energy_mj:.6f}", f"{r.duration_s:.6f}"])


def csv_text(rows) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


def read_csv(fh) -> list[MetricsRow]:
    out = []
    for rec in csv.DictReader(fh):
        out.append(MetricsRow(rec["experiment"], rec["config"], int(rec["n_nodes"]),
                              int(rec["iteration"]), float(rec["avg_latency_ms"]),
                              float(rec["avg_power_mw"]), float(rec["energy_mj"]),
                              float(rec["duration_s"])))
    return out


# ------------------------------------------------------------------ analytics

def local_seconds(cfg: SimConfig) -> float:
    """Device time from round start until the node asks for the grant."""
    d = cfg.stage_durations
    pc = preset(cfg.placement)
    t = d.record_s + d.handoff_s
    if pc[Stage.EXTRACT] == Tier.DEVICE:
        t += d.extract_s
    if pc[Stage.CLASSIFY] == Tier.DEVICE:
        t += d.classify_s
    return t


def wire_bytes(cfg: SimConfig) -> int:
    return HEADER_BYTES + uplink_payload(preset(cfg.placement), cfg.clip_seconds)


def exchange_seconds(cfg: SimConfig) -> float:
    """Server occupancy per admitted message: transfer, service and reply."""
    link = (cfg.base_delay_ms + cfg.fog_hop_ms) / 1000.0
    return (link + wire_bytes(cfg) / cfg.bandwidth_Bps
            + cfg.server_service.for_kind(message_kind(cfg.placement))
            + link + REPLY_BYTES / cfg.bandwidth_Bps)


def nominal_round_seconds(cfg: SimConfig) -> float:
    """Uncontended single-node round duration."""
    return local_seconds(cfg) + exchange_seconds(cfg)


def utilization(cfg: SimConfig) -> float:
    """Offered server load n * exchange / round period; >= 1 means saturation."""
    return cfg.n_nodes * exchange_seconds(cfg) / nominal_round_seconds(cfg)


# ----------------------------------------------------------------- event loop

_ROUND_START, _READY, _RECEIVED, _REPLIED = range(4)
_EVENT_NAMES = ("round_start", "ready", "received", "replied")


def run(cfg: SimConfig, experiment: str = "sim", trace: bool = False) -> MetricsReport:
    """Simulate ``cfg.rounds`` rounds on every node; a pure function of ``cfg``."""
    cfg.check()
    pc = preset(cfg.placement)
    if validate(pc):
        raise InvalidConfig("; ".join(validate(pc)))
    params = cfg.power_params
    link = _Link(cfg)
    kind = message_kind(cfg.placement)
    n = cfg.n_nodes
    local_us = _us(local_seconds(cfg))
    nbytes = wire_bytes(cfg)
    payload = nbytes - HEADER_BYTES
    service_us = _us(cfg.server_service.for_kind(kind))
    period_us = _us(nominal_round_seconds(cfg))

    events: list[tuple[int, int, int, int]] = []
    seq = 0

    def schedule(t, what, node):
        nonlocal seq
        heapq.heappush(events, (t, node, seq, what))
        seq += 1

    report = MetricsReport()
    addresses = [node_address(i) for i in range(n)]
    report.grant_counts = {a: 0 for a in addresses}
    rounds_done = [0] * n
    current: list[RoundRecord | None] = [None] * n
    pending: dict[int, int] = {}
    turn = 0
    busy = False
    last_t = 0

    def try_grant(now):
        nonlocal turn, busy
        if busy:
            return
        for _ in range(n):
            if rounds_done[turn] < cfg.rounds:
                break
            turn = (turn + 1) % n
        if rounds_done[turn] >= cfg.rounds or turn not in pending:
            return
        pending.pop(turn)
        busy = True
        rec = current[turn]
        rec.grant_us = now
        rec.tx_us = link.serialisation_us(nbytes)
        report.grant_counts[addresses[turn]] += 1
        schedule(now + link.delivery_us(nbytes), _RECEIVED, turn)

    for i in range(n):
        start = (i * period_us) // n if cfg.stagger else 0
        schedule(start, _ROUND_START, i)

    while events:
        t, node, _, what = heapq.heappop(events)
        assert t >= last_t, "event causality violated"
        last_t = t
        if trace:
            report.trace.append((t, _EVENT_NAMES[what], node))
        if what == _ROUND_START:
            current[node] = RoundRecord(node, rounds_done[node], t, 0, 0, 0, 0, nbytes, payload, 0)
            schedule(t + local_us, _READY, node)
        elif what == _READY:
            current[node].ready_us = t
            pending[node] = t
            try_grant(t)
        elif what == _RECEIVED:
            current[node].received_us = t
            report.bytes_received += nbytes
            schedule(t + service_us + link.delivery_us(REPLY_BYTES), _REPLIED, node)
        elif what == _REPLIED:
            rec = current[node]
            rec.end_us = t
            reply_wait = (t - rec.grant_us - rec.tx_us) / US
            tl = pw.timeline_for_round(pc, cfg.stage_durations, rec.tx_us / US,
                                       reply_wait_s=reply_wait,
                                       grant_wait_s=(rec.grant_us - rec.ready_us) / US)
            e = pw.energy(tl, params)
            rec.avg_power_mw, rec.energy_mj = e.avg_power_mw, e.energy_mj
            report.rounds.append(rec)
            rounds_done[node] += 1
            busy = False
            turn = (node + 1) % n
            if rounds_done[node] < cfg.rounds:
                schedule(t, _ROUND_START, node)
            try_grant(t)

    for k in range(cfg.rounds):
        recs = [r for r in report.rounds if r.iteration == k]
        report.rows.append(MetricsRow(
            experiment, cfg.placement, n, k,
            sum(r.latency_ms for r in recs) / len(recs),
            sum(r.avg_power_mw for r in recs) / len(recs),
            sum(r.energy_mj for r in recs) / len(recs),
            sum(r.duration_s for r in recs) / len(recs),
        ))
    return report


# ---------------------------------------------------------------- experiments

CONFIG_ORDER = ("config1", "config2", "proposed")


def experiment_power(iterations: int = 20, base: SimConfig = SimConfig()) -> dict[str, MetricsReport]:
    """Single-node rounds for each preset."""
    return {name: run(replace(base, n_nodes=1, placement=name, rounds=iterations), "power")
            for name in CONFIG_ORDER}


@dataclass
class RecorderDelta:
    delta_mw: float
    with_send: MetricsReport
    without_send: MetricsReport


def experiment_recorder_delta(iterations: int = 20, base: SimConfig = SimConfig(),
                              payload_bytes: int | None = None) -> RecorderDelta:
    """Recorder-only rounds with and without pushing the raw clip to the server."""
    params = base.power_params
    if payload_bytes is None:
        payload_bytes = uplink_payload(preset("config2"), base.clip_seconds)
    tx = (HEADER_BYTES + payload_bytes) / base.bandwidth_Bps
    reports = {}
    for send in (True, False):
        rep = MetricsReport()
        e = pw.energy(pw.recorder_timeline(base.stage_durations, tx, send), params)
        name = "recorder_send" if send else "recorder_nosend"
        for k in range(iterations):
            rep.rows.append(MetricsRow("recorder", name, 1, k, 0.0, e.avg_power_mw,
                                       e.energy_mj, e.duration_s))
        reports[send] = rep
    delta = reports[True].avg_power_mw - reports[False].avg_power_mw
    return RecorderDelta(delta, reports[True], reports[False])


def experiment_latency(node_counts=(4, 8, 12), iterations: int = 10,
                       base: SimConfig = SimConfig()) -> dict[tuple[str, int], MetricsReport]:
    out = {}
    for name in CONFIG_ORDER:
        for n in node_counts:
            cfg = replace(base, n_nodes=n, placement=name, rounds=iterations,
                          seed=base.seed * 1000 + n)
            out[(name, n)] = run(cfg, "latency")
    return out


EXPERIMENTS: dict[str, Callable] = {
    "power": experiment_power,
    "recorder": experiment_recorder_delta,
    "latency": experiment_latency,
}


def experiment_rows(kind: str, base: SimConfig = SimConfig(), **kw) -> list[MetricsRow]:
    if kind == "power":
        reps = experiment_power(kw.get("iterations", 20), base)
        return [r for name in CONFIG_ORDER for r in reps[name].rows]
    if kind == "recorder":
        res = experiment_recorder_delta(kw.get("iterations", 20), base)
        return res.with_send.rows + res.without_send.rows
    if kind == "latency":
        reps = experiment_latency(tuple(kw.get("node_counts", (4, 8, 12))),
                                  kw.get("iterations", 10), base)
        return [r for rep in reps.values() for r in rep.rows]
    raise InvalidConfig(f"unknown experiment {kind!r}")
