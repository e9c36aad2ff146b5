"""Node/server wire protocol, round-robin admission and the two transports.

Frame layout (big-endian)::

    [1 B kind][4 B node_id][4 B payload length][payload]

Server replies are a fixed 5 bytes: ``[1 B status][4 B class_id]``.
"""
from __future__ import annotations

import csv
import enum
import ipaddress
import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import (
    BindFailure,
    ConnectFailure,
    LengthMismatch,
    Timeout,
    Truncated,
    UnknownKind,
)
from .features import FEATURE_BYTES

log = logging.getLogger(__name__)

HEADER = struct.Struct(">BII")
HEADER_BYTES = HEADER.size  # 9
REPLY = struct.Struct(">BI")
REPLY_BYTES = REPLY.size  # 5
MAX_PAYLOAD = 16 * 1024 * 1024
DEFAULT_PORT = 7470


class Kind(enum.IntEnum):
    RAW_AUDIO = 0x01
    FEATURES = 0x02
    RESULT = 0x03


class Status(enum.IntEnum):
    OK = 0x00
    ERR = 0x01


_FIXED_PAYLOAD = {Kind.FEATURES: FEATURE_BYTES, Kind.RESULT: 4}


def _check_payload(kind: Kind, n: int):
    if n == 0:
        raise LengthMismatch("empty payload")
    if n > MAX_PAYLOAD:
        raise LengthMismatch(f"payload of {n} bytes exceeds the {MAX_PAYLOAD} byte cap")
    want = _FIXED_PAYLOAD.get(kind)
    if want is not None and n != want:
        raise LengthMismatch(f"{kind.name} payload must be {want} bytes, got {n}")


def _kind(value: int) -> Kind:
    try:
        return Kind(value)
    except ValueError:
        raise UnknownKind(f"unknown message kind 0x{value:02x}") from None


@dataclass(frozen=True)
class WireMessage:
    kind: Kind
    node_id: int
    payload: bytes

    def __post_init__(self):
        object.__setattr__(self, "kind", _kind(int(self.kind)))
        if not 0 <= self.node_id <= 0xFFFFFFFF:
            raise ValueError("node_id must fit in 32 bits")
        _check_payload(self.kind, len(self.payload))

    @property
    def wire_size(self) -> int:
        return HEADER_BYTES + len(self.payload)


def encode(msg: WireMessage) -> bytes:
    return HEADER.pack(msg.kind, msg.node_id, len(msg.payload)) + bytes(msg.payload)


def decode_header(data: bytes) -> tuple[Kind, int, int]:
    if len(data) < HEADER_BYTES:
        raise Truncated(f"need {HEADER_BYTES} header bytes, got {len(data)}")
    raw_kind, node_id, length = HEADER.unpack_from(data)
    kind = _kind(raw_kind)
    _check_payload(kind, length)
    return kind, node_id, length


def decode(data: bytes) -> WireMessage:
    kind, node_id, length = decode_header(data)
    body = data[HEADER_BYTES:]
    if len(body) < length:
        raise Truncated(f"payload has {len(body)} of {length} bytes")
    if len(body) > length:
        raise LengthMismatch(f"{len(body) - length} trailing bytes after payload")
    return WireMessage(kind, node_id, bytes(body))


@dataclass(frozen=True)
class ServerReply:
    status: Status
    class_id: int = 0

    def encode(self) -> bytes:
        return REPLY.pack(self.status, self.class_id)

    @classmethod
    def decode(cls, data: bytes) -> "ServerReply":
        if len(data) != REPLY_BYTES:
            raise Truncated(f"reply must be {REPLY_BYTES} bytes, got {len(data)}")
        status, class_id = REPLY.unpack(data)
        return cls(Status(status), class_id)


def result_payload(class_id: int) -> bytes:
    return struct.pack("<i", class_id)


def parse_result(payload: bytes) -> int:
    return struct.unpack("<i", payload)[0]


# ------------------------------------------------------------------- registry

@dataclass(frozen=True)
class NodeRegistry:
    """Nodes ordered by IP address; this order is the admission order."""

    entries: tuple[tuple[int, str], ...]

    def __init__(self, entries: Iterable[tuple[int, str]]):
        entries = sorted(((int(n), str(a)) for n, a in entries),
                         key=lambda e: ipaddress.ip_address(e[1]))
        ids = [n for n, _ in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("node ids must be unique")
        object.__setattr__(self, "entries", tuple(entries))

    @classmethod
    def load(cls, path) -> "NodeRegistry":
        """CSV with columns node_id,address."""
        with open(path, newline="") as fh:
            return cls((int(r["node_id"]), r["address"]) for r in csv.DictReader(fh))

    @property
    def node_ids(self) -> list[int]:
        return [n for n, _ in self.entries]

    def __len__(self):
        return len(self.entries)


class RoundRobinScheduler:
    """Cycles through the registry in address order, one grant at a time."""

    def __init__(self, registry: NodeRegistry):
        if not len(registry):
            raise ValueError("registry is empty")
        self.order = registry.node_ids
        self.position = 0

    @property
    def current(self) -> int:
        return self.order[self.position]

    def advance(self) -> int:
        self.position = (self.position + 1) % len(self.order)
        return self.current

    def grants(self, count: int) -> list[int]:
        out = []
        for _ in range(count):
            out.append(self.current)
            self.advance()
        return out


class AdmissionGate:
    """Thread-safe round-robin gate for the socket server.

    A node blocks in :meth:`acquire` until it holds the grant. If the
    granted node has nothing pending for ``skip_after`` seconds while others
    wait, its turn is passed on so one silent node cannot stall the star.
    """

    def __init__(self, registry: NodeRegistry, skip_after: float = 2.0):
        self.scheduler = RoundRobinScheduler(registry)
        self.skip_after = skip_after
        self.cond = threading.Condition()
        self.waiting: set[int] = set()
        self.held = False
        self.turn_started = time.monotonic()
        self.granted: list[int] = []

    def _advance(self):
        self.scheduler.advance()
        self.turn_started = time.monotonic()
        self.cond.notify_all()

    def acquire(self, node_id: int, timeout: float = 60.0):
        deadline = time.monotonic() + timeout
        with self.cond:
            if node_id not in self.scheduler.order:
                raise PermissionError(f"node {node_id} is not registered")
            self.waiting.add(node_id)
            try:
                while self.held or self.scheduler.current != node_id:
                    now = time.monotonic()
                    if now >= deadline:
                        raise Timeout(f"node {node_id} never received the grant")
                    if (not self.held and self.scheduler.current not in self.waiting
                            and now - self.turn_started >= self.skip_after):
                        self._advance()
                        continue
                    self.cond.wait(min(0.05, deadline - now))
                self.held = True
                self.granted.append(node_id)
            finally:
                self.waiting.discard(node_id)

    def release(self):
        with self.cond:
            self.held = False
            self._advance()


# ------------------------------------------------------------------- handlers

@dataclass
class Receipt:
    node_id: int
    kind: Kind
    wire_bytes: int
    latency_ms: float
    reply: ServerReply


class ResultStore:
    """Append-only result log (CSV: timestamp,node_id,class_id)."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[tuple[float, int, int]] = []
        self.lock = threading.Lock()
        if self.path and not self.path.exists():
            self.path.write_text("timestamp,node_id,class_id\n")

    def append(self, node_id: int, class_id: int, timestamp: float | None = None):
        row = (time.time() if timestamp is None else timestamp, node_id, class_id)
        with self.lock:
            self.rows.append(row)
            if self.path:
                with open(self.path, "a") as fh:
                    fh.write(f"{row[0]:.6f},{node_id},{class_id}\n")


class PipelineHandler:
    """Server-side stages: extract+classify raw audio, classify features, store results."""

    def __init__(self, model, store: ResultStore | None = None):
        self.model = model
        self.store = store if store is not None else ResultStore()

    def classify_message(self, msg: WireMessage) -> int:
        from . import audio, classifier, features

        if msg.kind is Kind.RAW_AUDIO:
            fv = features.extract_features(audio.wav_from_bytes(msg.payload))
            return classifier.classify(self.model, fv)
        if msg.kind is Kind.FEATURES:
            return classifier.classify(self.model, features.deserialize_features(msg.payload))
        return parse_result(msg.payload)

    def __call__(self, msg: WireMessage) -> ServerReply:
        class_id = self.classify_message(msg)
        if not 0 <= class_id <= 9:
            raise ValueError(f"class id {class_id} out of range")
        self.store.append(msg.node_id, class_id)
        return ServerReply(Status.OK, class_id)


Handler = Callable[[WireMessage], ServerReply]


def _safe_handle(handler: Handler, msg: WireMessage) -> ServerReply:
    try:
        return handler(msg)
    except Exception:
        log.exception("handler failed for node %d", msg.node_id)
        return ServerReply(Status.ERR, 0)


# ----------------------------------------------------------------- transports

@dataclass(frozen=True)
class SimTransport:
    bandwidth_Bps: float = 2_500_000.0
    base_delay_ms: float = 2.0
    seed: int = 0
    jitter_ms: float = 0.0

    def __post_init__(self):
        if self.bandwidth_Bps <= 0:
            raise ValueError("bandwidth must be positive")

    def delivery_ms(self, nbytes: int, rng=None) -> float:
        jitter = rng.uniform(0.0, self.jitter_ms) if (rng and self.jitter_ms) else 0.0
        return self.base_delay_ms + jitter + 1000.0 * nbytes / self.bandwidth_Bps


@dataclass(frozen=True)
class LoopbackTransport:
    port: int = DEFAULT_PORT
    host: str = "127.0.0.1"


def sim_transport(bandwidth_Bps: float, base_delay_ms: float, seed: int = 0,
                  jitter_ms: float = 0.0) -> SimTransport:
    return SimTransport(bandwidth_Bps, base_delay_ms, seed, jitter_ms)


def loopback_transport(port: int = DEFAULT_PORT, host: str = "127.0.0.1") -> LoopbackTransport:
    return LoopbackTransport(port, host)


class SimServer:
    """In-process server driven by simulated time.

    Messages are submitted with the time the node is ready to send; :meth:`run`
    admits them in strict round-robin order and returns the receipts.
    """

    def __init__(self, registry: NodeRegistry, handler: Handler, transport: SimTransport,
                 service_ms: Callable[[WireMessage], float] = lambda m: 0.0):
        import random

        self.registry = registry
        self.handler = handler
        self.transport = transport
        self.service_ms = service_ms
        self.rng = random.Random(transport.seed)
        self.queues: dict[int, list[tuple[float, bytes]]] = {n: [] for n in registry.node_ids}
        self.receipts: list[Receipt] = []
        self.clock_ms = 0.0
        self.scheduler = RoundRobinScheduler(registry)
        self.bytes_received = 0

    def submit(self, data: bytes, ready_ms: float = 0.0):
        _, node_id, _ = decode_header(data)
        if node_id not in self.queues:
            raise PermissionError(f"node {node_id} is not registered")
        self.queues[node_id].append((ready_ms, bytes(data)))

    def run(self) -> list[Receipt]:
        while any(self.queues.values()):
            node = self.scheduler.current
            self.scheduler.advance()
            if not self.queues[node]:
                continue
            ready, data = self.queues[node].pop(0)
            msg = decode(data)
            grant = max(self.clock_ms, ready)
            received = grant + self.transport.delivery_ms(len(data), self.rng)
            reply = _safe_handle(self.handler, msg)
            self.bytes_received += len(data)
            self.receipts.append(Receipt(msg.node_id, msg.kind, len(data), received - ready, reply))
            self.clock_ms = (received + self.service_ms(msg)
                             + self.transport.delivery_ms(REPLY_BYTES, self.rng))
        return self.receipts

    def stop(self):
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(65536, n - len(buf)))
        if not chunk:
            raise Truncated(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


class _ConnectionHandler(socketserver.BaseRequestHandler):
    def handle(self):
        srv: LoopbackServer = self.server.owner
        sock = self.request
        while True:
            try:
                header = _recv_exact(sock, HEADER_BYTES)
            except (Truncated, OSError):
                return
            first = time.perf_counter()
            try:
                _, node_id, length = decode_header(header)
            except (UnknownKind, LengthMismatch) as exc:
                log.warning("rejecting frame: %s", exc)
                sock.sendall(ServerReply(Status.ERR, 0).encode())
                return
            try:
                srv.gate.acquire(node_id)
            except (PermissionError, Timeout) as exc:
                log.warning("%s", exc)
                sock.sendall(ServerReply(Status.ERR, 0).encode())
                return
            try:
                payload = _recv_exact(sock, length)
                last = time.perf_counter()
                msg = decode(header + payload)
                reply = _safe_handle(srv.handler, msg)
                srv.record(Receipt(node_id, msg.kind, HEADER_BYTES + length,
                                   (last - first) * 1000.0, reply))
                sock.sendall(reply.encode())
            except (Truncated, OSError):
                return
            finally:
                srv.gate.release()


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class LoopbackServer:
    """TCP server on localhost that admits nodes through an :class:`AdmissionGate`."""

    def __init__(self, registry: NodeRegistry, handler: Handler, transport: LoopbackTransport,
                 skip_after: float = 2.0):
        self.registry = registry
        self.handler = handler
        self.gate = AdmissionGate(registry, skip_after)
        self.receipts: list[Receipt] = []
        self.lock = threading.Lock()
        try:
            self.server = _TCPServer((transport.host, transport.port), _ConnectionHandler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {transport.host}:{transport.port}: {exc}") from exc
        self.server.owner = self
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self.server.server_address[:2]

    @property
    def bytes_received(self) -> int:
        with self.lock:
            return sum(r.wire_bytes for r in self.receipts)

    def record(self, receipt: Receipt):
        with self.lock:
            self.receipts.append(receipt)

    def stop(self):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(registry: NodeRegistry, handler: Handler, transport, **kw):
    if not len(registry):
        raise ValueError("registry is empty")
    if isinstance(transport, SimTransport):
        return SimServer(registry, handler, transport, **kw)
    if isinstance(transport, LoopbackTransport):
        return LoopbackServer(registry, handler, transport, **kw)
    raise TypeError(f"unsupported transport {transport!r}")


class NodeClient:
    """Blocking client: one connection, one request/reply exchange at a time."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ConnectFailure(f"cannot reach {host}:{port}: {exc}") from exc
        self.bytes_sent = 0

    def send(self, msg: WireMessage) -> ServerReply:
        data = encode(msg)
        try:
            self.sock.sendall(data)
            self.bytes_sent += len(data)
            return ServerReply.decode(_recv_exact(self.sock, REPLY_BYTES))
        except socket.timeout as exc:
            raise Timeout("no reply from server") from exc

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def measure_latency(server, msg: WireMessage, ready_ms: float | None = None) -> float:
    """Server-side first-byte-to-last-byte time of one message, in milliseconds."""
    if isinstance(server, SimServer):
        server.submit(encode(msg), server.clock_ms if ready_ms is None else ready_ms)
        server.run()
        return server.receipts[-1].latency_ms
    if isinstance(server, LoopbackServer):
        host, port = server.address
        before = len(server.receipts)
        with NodeClient(host, port) as client:
            client.send(msg)
        deadline = time.monotonic() + 5
        while len(server.receipts) <= before:
            if time.monotonic() > deadline:
                raise Timeout("server recorded no receipt")
            time.sleep(0.001)
        return server.receipts[-1].latency_ms
    raise TypeError(f"unsupported server {server!r}")


# ---------------------------------------------------------------------- nodes

def node_message(placement, node_id: int, clip, model=None) -> WireMessage:
    """Run the device-placed stages on ``clip`` and build the uplink message."""
    from . import audio, classifier, features
    from .placement import Stage, Tier

    if placement[Stage.CLASSIFY] == Tier.DEVICE:
        fv = features.extract_features(clip)
        return WireMessage(Kind.RESULT, node_id, result_payload(classifier.classify(model, fv)))
    if placement[Stage.EXTRACT] == Tier.DEVICE:
        fv = features.extract_features(clip)
        return WireMessage(Kind.FEATURES, node_id, features.serialize_features(fv))
    return WireMessage(Kind.RAW_AUDIO, node_id, audio.wav_bytes(clip))


def run_nodes_loopback(server: LoopbackServer, per_node: dict[int, Sequence[WireMessage]]):
    """Drive several nodes concurrently against ``server``; returns replies per node."""
    host, port = server.address
    replies: dict[int, list[ServerReply]] = {n: [] for n in per_node}
    errors: list[BaseException] = []

    def worker(node_id, msgs):
        try:
            with NodeClient(host, port) as c:
                for m in msgs:
                    replies[node_id].append(c.send(m))
        except BaseException as exc:  # surfaced to the caller below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=item) for item in per_node.items()]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return replies
