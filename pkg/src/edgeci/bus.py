"""Message-bus abstraction.

Two interchangeable session types honor one contract: `MqttBusSession`
speaks MQTT 3.1.1 over TCP to an external broker (client implemented on
stdlib sockets; QoS 0/1, no wildcards — topics here are always exact
names), and `InMemoryBus` is a synchronous loopback for tests.

Connection failures are states, not exceptions: an unreachable broker
leaves the session in Backoff with exponential retry, and publishes made
while offline are buffered (bounded, drop-oldest) until reconnect.
"""
from __future__ import annotations

import logging
import random
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable

from .config import TopicSet  # noqa: F401  (re-exported: part of the bus surface)
from .errors import ConfigError, PayloadTooLarge

log = logging.getLogger(__name__)

MAX_PAYLOAD_BYTES = 256 * 1024
OFFLINE_BUFFER_CAPACITY = 1000

BACKOFF_BASE_S = 0.5
BACKOFF_CAP_S = 30.0
BACKOFF_JITTER = 0.1


class Qos(Enum):
    AT_MOST_ONCE = 0
    AT_LEAST_ONCE = 1


class Status(str, Enum):
    DISCONNECTED = "disconnected"
    CONNECTING = "connecting"
    CONNECTED = "connected"
    BACKOFF = "backoff"


@dataclass(frozen=True)
class Envelope:
    topic: str
    payload: bytes
    enqueue_time: float
    qos: Qos = Qos.AT_LEAST_ONCE


@dataclass
class ConnectionState:
    status: Status = Status.DISCONNECTED
    last_error: str | None = None
    retry_count: int = 0


def backoff_delay(retry_count: int, rng: random.Random | None = None) -> float:
    """Delay before retry number `retry_count` (1-based): 0.5 s doubling,
    capped at 30 s, jittered ±10%."""
    base = min(BACKOFF_BASE_S * 2 ** (retry_count - 1), BACKOFF_CAP_S)
    if rng is None:
        return base
    return base * (1 + BACKOFF_JITTER * (2 * rng.random() - 1))


Handler = Callable[[Envelope], None]


@dataclass
class SubscriptionHandle:
    topic: str
    handler: Handler
    active: bool = True


class BusSession:
    """Common publish/subscribe surface; see subclasses for transport."""

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._subs: list[SubscriptionHandle] = []
        self._state = ConnectionState()
        self._state_listeners: list[Callable[[ConnectionState], None]] = []

    @property
    def state(self) -> ConnectionState:
        with self._lock:
            return ConnectionState(
                self._state.status, self._state.last_error, self._state.retry_count
            )

    def on_state_change(self, listener: Callable[[ConnectionState], None]) -> None:
        with self._lock:
            self._state_listeners.append(listener)

    def _set_state(self, status: Status, error: str | None = None) -> None:
        with self._lock:
            self._state.status = status
            self._state.last_error = error
            if status is Status.CONNECTED:
                self._state.retry_count = 0
            snapshot = self.state
            listeners = list(self._state_listeners)
        for listener in listeners:
            try:
                listener(snapshot)
            except Exception:
                log.exception("state listener failed")

    def subscribe(self, topic: str, handler: Handler) -> SubscriptionHandle:
        if not topic:
            raise ConfigError("topic must be non-empty")
        handle = SubscriptionHandle(topic, handler)
        with self._lock:
            self._subs.append(handle)
        self._after_subscribe(topic)
        return handle

    def unsubscribe(self, handle: SubscriptionHandle) -> None:
        with self._lock:
            handle.active = False
            if handle in self._subs:
                self._subs.remove(handle)

    def publish(self, topic: str, payload: bytes, qos: Qos = Qos.AT_LEAST_ONCE) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    # internal hooks ---------------------------------------------------

    def _after_subscribe(self, topic: str) -> None:
        pass

    def _check_payload(self, topic: str, payload: bytes) -> None:
        if not topic:
            raise ConfigError("topic must be non-empty")
        if len(payload) > MAX_PAYLOAD_BYTES:
            raise PayloadTooLarge(f"payload {len(payload)} bytes exceeds {MAX_PAYLOAD_BYTES}")

    def _dispatch(self, envelope: Envelope) -> None:
        with self._lock:
            targets = [h for h in self._subs if h.active and h.topic == envelope.topic]
        for handle in targets:
            try:
                handle.handler(envelope)
            except Exception:
                log.exception("handler failed for topic %s", envelope.topic)


class InMemoryBus(BusSession):
    """Loopback bus: always Connected, synchronous in-order delivery."""

    def __init__(self) -> None:
        super().__init__()
        self._state.status = Status.CONNECTED
        self._publish_lock = threading.RLock()

    def publish(self, topic: str, payload: bytes, qos: Qos = Qos.AT_LEAST_ONCE) -> None:
        self._check_payload(topic, payload)
        # serializes concurrent publishers so per-topic order is total
        with self._publish_lock:
            self._dispatch(Envelope(topic, bytes(payload), time.monotonic(), qos))


def make_inmemory_bus() -> InMemoryBus:
    return InMemoryBus()


# --------------------------------------------------------------------------
# MQTT 3.1.1 client on stdlib sockets
# --------------------------------------------------------------------------

_CONNECT, _CONNACK, _PUBLISH, _PUBACK = 1, 2, 3, 4
_SUBSCRIBE, _SUBACK, _UNSUBSCRIBE, _UNSUBACK = 8, 9, 10, 11
_PINGREQ, _PINGRESP, _DISCONNECT = 12, 13, 14


def _encode_remaining_length(n: int) -> bytes:
    out = bytearray()
    while True:
        digit = n % 128
        n //= 128
        out.append(digit | (0x80 if n else 0))
        if not n:
            return bytes(out)


def _encode_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("!H", len(raw)) + raw


def encode_connect(client_id: str, keepalive_s: int = 60) -> bytes:
    var = _encode_string("MQTT") + bytes([4, 0x02]) + struct.pack("!H", keepalive_s)
    payload = _encode_string(client_id)
    body = var + payload
    return bytes([_CONNECT << 4]) + _encode_remaining_length(len(body)) + body


def encode_publish(topic: str, payload: bytes, qos: int, packet_id: int, dup: bool = False) -> bytes:
    flags = (qos << 1) | (0x08 if dup else 0)
    body = _encode_string(topic)
    if qos > 0:
        body += struct.pack("!H", packet_id)
    body += payload
    return bytes([(_PUBLISH << 4) | flags]) + _encode_remaining_length(len(body)) + body


def encode_puback(packet_id: int) -> bytes:
    return bytes([_PUBACK << 4, 2]) + struct.pack("!H", packet_id)


def encode_subscribe(packet_id: int, topic: str, qos: int) -> bytes:
    body = struct.pack("!H", packet_id) + _encode_string(topic) + bytes([qos])
    return bytes([(_SUBSCRIBE << 4) | 0x02]) + _encode_remaining_length(len(body)) + body


def encode_pingreq() -> bytes:
    return bytes([_PINGREQ << 4, 0])


def encode_disconnect() -> bytes:
    return bytes([_DISCONNECT << 4, 0])


class _PacketReader:
    """Reads complete MQTT control packets off a blocking socket."""

    def __init__(self, sock: socket.socket) -> None:
        self._sock = sock

    def _read_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self._sock.recv(n - len(buf))
            if not chunk:
                raise ConnectionError("socket closed")
            buf += chunk
        return buf

    def read_packet(self) -> tuple[int, int, bytes]:
        """Returns (packet type, flags, body)."""
        head = self._read_exact(1)[0]
        length = 0
        shift = 0
        while True:
            digit = self._read_exact(1)[0]
            length |= (digit & 0x7F) << shift
            if not digit & 0x80:
                break
            shift += 7
            if shift > 21:
                raise ConnectionError("malformed remaining length")
        body = self._read_exact(length) if length else b""
        return head >> 4, head & 0x0F, body


def parse_publish(flags: int, body: bytes) -> tuple[str, bytes, int, int]:
    """Returns (topic, payload, qos, packet_id); packet_id 0 for QoS 0."""
    qos = (flags >> 1) & 0x03
    topic_len = struct.unpack("!H", body[:2])[0]
    topic = body[2 : 2 + topic_len].decode("utf-8")
    pos = 2 + topic_len
    packet_id = 0
    if qos > 0:
        packet_id = struct.unpack("!H", body[pos : pos + 2])[0]
        pos += 2
    return topic, body[pos:], qos, packet_id


class MqttBusSession(BusSession):
    """MQTT 3.1.1 session with automatic reconnect.

    A background thread owns the socket: it connects, replays
    subscriptions, flushes the offline buffer, then serves the read loop.
    Handlers run on that thread, one at a time. `publish` never blocks on
    handler execution and never raises for connectivity problems.
    """

    def __init__(self, host: str, port: int, client_id: str,
                 keepalive_s: int = 60, rng: random.Random | None = None) -> None:
        if not host or not host.strip():
            raise ConfigError("broker host must be non-empty")
        if not client_id:
            raise ConfigError("client_id must be non-empty")
        if not 1 <= port <= 65535:
            raise ConfigError(f"port {port} outside [1, 65535]")
        super().__init__()
        self._host = host
        self._port = port
        self._client_id = client_id
        self._keepalive_s = keepalive_s
        self._rng = rng or random.Random()
        self._sock: socket.socket | None = None
        self._sock_lock = threading.Lock()
        self._buffer: deque[tuple[str, bytes, Qos]] = deque(maxlen=OFFLINE_BUFFER_CAPACITY)
        self._inflight: dict[int, tuple[str, bytes]] = {}
        self._next_packet_id = 1
        self._closing = threading.Event()
        self._wakeup = threading.Event()
        self._thread = threading.Thread(target=self._run, name="mqtt-session", daemon=True)
        self._thread.start()

    # -- public surface ------------------------------------------------

    def publish(self, topic: str, payload: bytes, qos: Qos = Qos.AT_LEAST_ONCE) -> None:
        self._check_payload(topic, payload)
        payload = bytes(payload)
        with self._lock:
            connected = self._state.status is Status.CONNECTED
        if connected:
            try:
                self._send_publish(topic, payload, qos)
                return
            except OSError:
                pass  # fall through to buffering; reader thread handles the drop
        self._buffer.append((topic, payload, qos))

    def close(self) -> None:
        self._closing.set()
        self._wakeup.set()
        with self._sock_lock:
            if self._sock is not None:
                try:
                    self._sock.sendall(encode_disconnect())
                except OSError:
                    pass
                self._sock.close()
        self._thread.join(timeout=5)

    # -- connection loop ----------------------------------------------

    def _run(self) -> None:
        while not self._closing.is_set():
            self._set_state(Status.CONNECTING)
            try:
                sock = socket.create_connection((self._host, self._port), timeout=5)
            except OSError as exc:
                self._enter_backoff(str(exc))
                continue
            try:
                sock.settimeout(10)
                sock.sendall(encode_connect(self._client_id, self._keepalive_s))
                reader = _PacketReader(sock)
                ptype, _, body = reader.read_packet()
                if ptype != _CONNACK or len(body) < 2 or body[1] != 0:
                    raise ConnectionError(f"CONNACK refused: {body!r}")
            except (OSError, ConnectionError) as exc:
                sock.close()
                self._enter_backoff(str(exc))
                continue

            with self._sock_lock:
                self._sock = sock
            self._set_state(Status.CONNECTED)
            try:
                self._resubscribe_all(sock)
                self._retransmit_inflight(sock)
                self._flush_buffer()
                self._read_loop(reader)
            except (OSError, ConnectionError) as exc:
                if self._closing.is_set():
                    break
                with self._sock_lock:
                    self._sock = None
                sock.close()
                self._enter_backoff(str(exc))
        with self._sock_lock:
            if self._sock is not None:
                self._sock.close()
                self._sock = None
        self._set_state(Status.DISCONNECTED)

    def _enter_backoff(self, error: str) -> None:
        with self._lock:
            self._state.retry_count += 1
            retry = self._state.retry_count
        self._set_state(Status.BACKOFF, error)
        self._wakeup.clear()
        self._wakeup.wait(timeout=backoff_delay(retry, self._rng))

    def _read_loop(self, reader: _PacketReader) -> None:
        sock = reader._sock
        deadline = time.monotonic() + self._keepalive_s / 2
        sock.settimeout(1.0)
        while not self._closing.is_set():
            try:
                ptype, flags, body = reader.read_packet()
            except socket.timeout:
                if time.monotonic() > deadline:
                    sock.sendall(encode_pingreq())
                    deadline = time.monotonic() + self._keepalive_s / 2
                continue
            if ptype == _PUBLISH:
                topic, payload, qos, packet_id = parse_publish(flags, body)
                if qos > 0:
                    sock.sendall(encode_puback(packet_id))
                self._dispatch(Envelope(topic, payload, time.monotonic(),
                                        Qos(min(qos, 1))))
            elif ptype == _PUBACK:
                packet_id = struct.unpack("!H", body[:2])[0]
                self._inflight.pop(packet_id, None)
            # SUBACK / PINGRESP need no action

    # -- helpers -------------------------------------------------------

    def _alloc_packet_id(self) -> int:
        with self._lock:
            pid = self._next_packet_id
            self._next_packet_id = pid % 65535 + 1
            return pid

    def _send_publish(self, topic: str, payload: bytes, qos: Qos) -> None:
        pid = 0
        if qos is Qos.AT_LEAST_ONCE:
            pid = self._alloc_packet_id()
            self._inflight[pid] = (topic, payload)
        with self._sock_lock:
            if self._sock is None:
                raise OSError("not connected")
            self._sock.sendall(encode_publish(topic, payload, qos.value, pid))

    def _resubscribe_all(self, sock: socket.socket) -> None:
        with self._lock:
            topics = sorted({h.topic for h in self._subs if h.active})
        for topic in topics:
            sock.sendall(encode_subscribe(self._alloc_packet_id(), topic, 1))

    def _retransmit_inflight(self, sock: socket.socket) -> None:
        for pid, (topic, payload) in sorted(self._inflight.items()):
            sock.sendall(encode_publish(topic, payload, 1, pid, dup=True))

    def _flush_buffer(self) -> None:
        while self._buffer:
            topic, payload, qos = self._buffer.popleft()
            self._send_publish(topic, payload, qos)

    def _after_subscribe(self, topic: str) -> None:
        with self._sock_lock:
            sock = self._sock
        if sock is not None:
            try:
                sock.sendall(encode_subscribe(self._alloc_packet_id(), topic, 1))
            except OSError:
                pass  # reconnect path resubscribes


def connect(host: str, port: int, client_id: str) -> MqttBusSession:
    """Open an MQTT session; returns immediately, connection runs in background."""
    return MqttBusSession(host, port, client_id)
