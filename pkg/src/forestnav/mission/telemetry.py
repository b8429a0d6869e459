"""Telemetry and command transport: length-prefixed JSON over TCP.

Wire format: 4-byte big-endian payload length, then UTF-8 JSON. The server
broadcasts mission snapshots to every client and forwards well-formed
commands into the mission queue; each command is answered with an ack
carrying accept/reject and a reason. Malformed frames are rejected at the
socket layer without touching the mission.
"""

from __future__ import annotations

import json
import socket
import struct
import threading

MAX_MESSAGE = 8 * 1024 * 1024


def encode_message(obj: dict) -> bytes:
    body = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack(">I", len(body)) + body


def decode_message(body: bytes) -> dict:
    return json.loads(body.decode("utf-8"))


def read_message(sock: socket.socket) -> dict | None:
    """Blocking read of one framed message; None on clean EOF."""
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_MESSAGE:
        raise ValueError(f"frame of {length} bytes exceeds limit")
    body = _read_exact(sock, length)
    if body is None:
        return None
    return decode_message(body)


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


class TelemetryServer:
    """Bidirectional socket endpoint for one mission."""

    def __init__(self, mission, host: str = "127.0.0.1", port: int = 0):
        self.mission = mission
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.host, self.port = self._listener.getsockname()
        self._clients: list[tuple[socket.socket, threading.Lock]] = []
        self._lock = threading.Lock()
        self._running = False
        self._threads: list[threading.Thread] = []

    def start(self) -> None:
        self._running = True
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)

    def stop(self) -> None:
        self._running = False
        with self._lock:
            for sock, _ in self._clients:
                try:
                    sock.close()
                except OSError:
                    pass
            self._clients.clear()
        self._listener.close()

    def publish(self, snapshot: dict) -> None:
        frame = encode_message(snapshot)
        with self._lock:
            alive = []
            for sock, wlock in self._clients:
                try:
                    with wlock:
                        sock.sendall(frame)
                    alive.append((sock, wlock))
                except OSError:
                    pass
            self._clients = alive

    def _accept_loop(self) -> None:
        while self._running:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            wlock = threading.Lock()
            with self._lock:
                self._clients.append((conn, wlock))
            t = threading.Thread(target=self._client_loop, args=(conn, wlock),
                                 daemon=True)
            t.start()
            self._threads.append(t)

    def _client_loop(self, conn: socket.socket, wlock: threading.Lock) -> None:
        def send(obj: dict) -> None:
            try:
                with wlock:
                    conn.sendall(encode_message(obj))
            except OSError:
                pass

        while self._running:
            try:
                msg = read_message(conn)
            except (OSError, ValueError, json.JSONDecodeError):
                send({"v": 1, "type": "ack", "id": None, "accepted": False,
                      "reason": "malformed frame"})
                break
            if msg is None:
                break
            if not isinstance(msg, dict) or msg.get("type") != "command" \
                    or "name" not in msg:
                send({"v": 1, "type": "ack", "id": msg.get("id") if isinstance(msg, dict) else None,
                      "accepted": False, "reason": "malformed command"})
                continue
            self.mission.submit(msg, reply=send)
