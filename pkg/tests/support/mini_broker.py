"""A tiny MQTT 3.1.1 broker, just enough to exercise the client:
CONNECT/CONNACK, SUBSCRIBE/SUBACK (exact topic filters), PUBLISH QoS 0/1
with PUBACK, PINGREQ/PINGRESP, DISCONNECT. Test infrastructure only —
the shipped artifact expects an external broker.
"""
from __future__ import annotations

import socket
import struct
import threading

_CONNECT, _CONNACK, _PUBLISH, _PUBACK = 1, 2, 3, 4
_SUBSCRIBE, _SUBACK, _UNSUBSCRIBE, _UNSUBACK = 8, 9, 10, 11
_PINGREQ, _PINGRESP, _DISCONNECT = 12, 13, 14


def _remaining_length(n: int) -> bytes:
    out = bytearray()
    while True:
        digit = n % 128
        n //= 128
        out.append(digit | (0x80 if n else 0))
        if not n:
            return bytes(out)


# independent wire reader so the broker does not share the client's codec
def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("closed")
        buf += chunk
    return buf


def _read_packet(sock: socket.socket) -> tuple[int, int, bytes]:
    head = _read_exact(sock, 1)[0]
    length = 0
    shift = 0
    while True:
        digit = _read_exact(sock, 1)[0]
        length |= (digit & 0x7F) << shift
        if not digit & 0x80:
            break
        shift += 7
    body = _read_exact(sock, length) if length else b""
    return head >> 4, head & 0x0F, body


class _Client:
    def __init__(self, broker: "MiniBroker", sock: socket.socket) -> None:
        self.broker = broker
        self.sock = sock
        self.lock = threading.Lock()
        self.subscriptions: set[str] = set()
        self.thread = threading.Thread(target=self.run, daemon=True)
        self.thread.start()

    def send(self, raw: bytes) -> None:
        with self.lock:
            self.sock.sendall(raw)

    def run(self) -> None:
        try:
            while True:
                ptype, flags, body = _read_packet(self.sock)
                if ptype == _CONNECT:
                    self.send(bytes([_CONNACK << 4, 2, 0, 0]))
                elif ptype == _SUBSCRIBE:
                    packet_id = struct.unpack("!H", body[:2])[0]
                    pos = 2
                    grants = bytearray()
                    while pos < len(body):
                        tlen = struct.unpack("!H", body[pos:pos + 2])[0]
                        topic = body[pos + 2:pos + 2 + tlen].decode()
                        pos += 2 + tlen + 1  # +1 requested qos
                        self.subscriptions.add(topic)
                        grants.append(1)
                    ack = struct.pack("!H", packet_id) + bytes(grants)
                    self.send(bytes([_SUBACK << 4]) + _remaining_length(len(ack)) + ack)
                elif ptype == _PUBLISH:
                    qos = (flags >> 1) & 0x03
                    tlen = struct.unpack("!H", body[:2])[0]
                    topic = body[2:2 + tlen].decode()
                    pos = 2 + tlen
                    if qos > 0:
                        packet_id = struct.unpack("!H", body[pos:pos + 2])[0]
                        pos += 2
                        self.send(bytes([_PUBACK << 4, 2]) + struct.pack("!H", packet_id))
                    self.broker.route(topic, body[pos:], qos)
                elif ptype == _PUBACK:
                    pass
                elif ptype == _PINGREQ:
                    self.send(bytes([_PINGRESP << 4, 0]))
                elif ptype == _DISCONNECT:
                    break
        except (ConnectionError, OSError):
            pass
        finally:
            self.broker.remove(self)
            self.sock.close()

    def deliver(self, topic: str, payload: bytes, qos: int) -> None:
        encoded_topic = topic.encode()
        body = struct.pack("!H", len(encoded_topic)) + encoded_topic
        flags = 0
        if qos > 0:
            flags = 1 << 1
            body += struct.pack("!H", self.broker.next_packet_id())
        body += payload
        head = bytes([(_PUBLISH << 4) | flags]) + _remaining_length(len(body))
        try:
            self.send(head + body)
        except OSError:
            pass


class MiniBroker:
    def __init__(self) -> None:
        self._server = socket.create_server(("127.0.0.1", 0))
        self.port = self._server.getsockname()[1]
        self._clients: list[_Client] = []
        self._lock = threading.Lock()
        self._packet_id = 0
        self._accepting = True
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()

    def _accept_loop(self) -> None:
        while self._accepting:
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            with self._lock:
                self._clients.append(_Client(self, sock))

    def next_packet_id(self) -> int:
        with self._lock:
            self._packet_id = self._packet_id % 65535 + 1
            return self._packet_id

    def route(self, topic: str, payload: bytes, qos: int) -> None:
        with self._lock:
            targets = [c for c in self._clients if topic in c.subscriptions]
        for client in targets:
            client.deliver(topic, payload, qos)

    def remove(self, client: _Client) -> None:
        with self._lock:
            if client in self._clients:
                self._clients.remove(client)

    def drop_all_clients(self) -> None:
        """Force-close every client socket (reconnect testing)."""
        with self._lock:
            clients = list(self._clients)
        for client in clients:
            try:
                client.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            client.sock.close()

    def close(self) -> None:
        self._accepting = False
        self._server.close()
        self.drop_all_clients()
