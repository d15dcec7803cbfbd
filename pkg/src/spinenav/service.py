"""TCP streaming service: newline-delimited JSON over one duplex stream.

One simulation thread owns the session; client sockets get a reader
thread (commands into a FIFO) and a writer thread (bounded queue,
oldest message dropped when a client cannot keep up, so a slow client
never blocks the loop).  Ticks run on absolute deadlines; commands
queued since the previous tick are applied in arrival order before the
tick steps, acks go back to the issuing client, and every client then
receives the same state broadcast.

Wire format (PROTOCOL.md): every message is one JSON object per line,
enveloped {"type", "seq", "tick", "payload"}.  The server opens with a
"hello" carrying the protocol version and sends a "heartbeat" every
second.
"""

from __future__ import annotations

import json
import queue
import socket
import threading
import time
from collections import deque

from .phantom import Scenario
from .registration import RegistrationParams
from .session import PROTOCOL_VERSION, Session

__all__ = ["SpineNavServer", "PROTOCOL_VERSION"]

WRITE_QUEUE_LIMIT = 64
HEARTBEAT_PERIOD_S = 1.0


class _Client:
    _ids = 0

    def __init__(self, server: "SpineNavServer", sock: socket.socket):
        _Client._ids += 1
        self.id = _Client._ids
        self.server = server
        self.sock = sock
        self.queue: queue.Queue[bytes | None] = queue.Queue(maxsize=WRITE_QUEUE_LIMIT)
        self.alive = True
        self.writer = threading.Thread(target=self._write_loop, name=f"spinenav-w{self.id}", daemon=True)
        self.reader = threading.Thread(target=self._read_loop, name=f"spinenav-r{self.id}", daemon=True)

    def start(self) -> None:
        self.writer.start()
        self.reader.start()

    def send(self, data: bytes) -> None:
        """Enqueue without blocking; drop the oldest message when full."""
        while True:
            try:
                self.queue.put_nowait(data)
                return
            except queue.Full:
                try:
                    self.queue.get_nowait()
                except queue.Empty:
                    pass

    def close(self) -> None:
        if not self.alive:
            return
        self.alive = False
        try:
            self.queue.put_nowait(None)
        except queue.Full:
            pass
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass

    def _write_loop(self) -> None:
        while True:
            data = self.queue.get()
            if data is None or not self.alive:
                return
            try:
                self.sock.sendall(data)
            except OSError:
                self.server._drop_client(self)
                return

    def _read_loop(self) -> None:
        buffer = b""
        while self.alive:
            try:
                chunk = self.sock.recv(65536)
            except OSError:
                break
            if not chunk:
                break
            buffer += chunk
            while b"\n" in buffer:
                line, buffer = buffer.split(b"\n", 1)
                if not line.strip():
                    continue
                try:
                    message = json.loads(line)
                except json.JSONDecodeError:
                    self.server._send_error(self, "bad_json", "message was not valid JSON")
                    continue
                self.server._on_message(self, message)
        self.server._drop_client(self)


class SpineNavServer:
    """Runs one session at a fixed tick rate and streams it to clients."""

    def __init__(
        self,
        scenario: Scenario,
        host: str = "127.0.0.1",
        port: int = 0,
        tick_rate: float = 30.0,
        registration_params: RegistrationParams | None = None,
    ):
        self.session = Session(scenario, tick_rate=tick_rate, registration_params=registration_params)
        self.tick_rate = float(tick_rate)
        self.host = host
        self._requested_port = port
        self._listener: socket.socket | None = None
        self._clients: list[_Client] = []
        self._clients_lock = threading.Lock()
        self._commands: queue.Queue = queue.Queue()
        self._running = threading.Event()
        self._seq = 0
        self._seq_lock = threading.Lock()
        self.tick_starts: deque[float] = deque(maxlen=16384)
        self._threads: list[threading.Thread] = []

    # -- lifecycle -----------------------------------------------------------

    @property
    def port(self) -> int:
        if self._listener is None:
            raise RuntimeError("server is not started")
        return self._listener.getsockname()[1]

    def start(self) -> None:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self._requested_port))
        listener.listen(16)
        self._listener = listener
        self._running.set()
        accept = threading.Thread(target=self._accept_loop, name="spinenav-accept", daemon=True)
        loop = threading.Thread(target=self._run_loop, name="spinenav-loop", daemon=True)
        self._threads = [accept, loop]
        accept.start()
        loop.start()

    def stop(self) -> None:
        self._running.clear()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._clients_lock:
            clients = list(self._clients)
        for client in clients:
            client.close()
        for thread in self._threads:
            thread.join(timeout=5.0)

    def serve_forever(self) -> None:
        self.start()
        try:
            while self._running.is_set():
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    # -- plumbing --------------------------------------------------------------

    def _next_seq(self) -> int:
        with self._seq_lock:
            self._seq += 1
            return self._seq

    def _envelope(self, type_: str, payload: dict) -> bytes:
        doc = {"type": type_, "seq": self._next_seq(), "tick": self.session.tick, "payload": payload}
        return (json.dumps(doc) + "\n").encode("utf-8")

    def _accept_loop(self) -> None:
        while self._running.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            client = _Client(self, sock)
            with self._clients_lock:
                self._clients.append(client)
            client.start()
            client.send(
                self._envelope(
                    "hello",
                    {
                        "protocol": "spinenav.v1",
                        "version": PROTOCOL_VERSION,
                        "tick_rate": self.tick_rate,
                    },
                )
            )

    def _drop_client(self, client: _Client) -> None:
        with self._clients_lock:
            if client in self._clients:
                self._clients.remove(client)
        client.close()

    def _send_error(self, client: _Client, code: str, message: str) -> None:
        client.send(self._envelope("ack", {"ok": False, "error": code, "message": message}))

    def _on_message(self, client: _Client, message: dict) -> None:
        mtype = message.get("type")
        if mtype == "hello":
            version = message.get("payload", {}).get("version")
            if version not in (None, PROTOCOL_VERSION):
                self._send_error(client, "version_mismatch", f"server speaks version {PROTOCOL_VERSION}")
            return
        if mtype != "command":
            self._send_error(client, "bad_type", f"unsupported message type {mtype!r}")
            return
        self._commands.put((client, message.get("seq"), message.get("payload") or {}))

    # -- simulation loop -------------------------------------------------------

    def _run_loop(self) -> None:
        period = 1.0 / self.tick_rate
        next_heartbeat = time.monotonic()
        deadline = time.monotonic() + period
        while self._running.is_set():
            now = time.monotonic()
            wait = deadline - now
            if wait > 0:
                time.sleep(wait)
            start = time.monotonic()
            self.tick_starts.append(start)

            while True:
                try:
                    client, cmd_seq, payload = self._commands.get_nowait()
                except queue.Empty:
                    break
                ack = self.session.apply(payload)
                ack["command_seq"] = cmd_seq
                client.send(self._envelope("ack", ack))

            payload = self.session.step()
            data = self._envelope("state", payload)
            with self._clients_lock:
                clients = list(self._clients)
            for client in clients:
                client.send(data)

            if start >= next_heartbeat:
                beat = self._envelope("heartbeat", {"sim_time_ms": payload["sim_time_ms"]})
                for client in clients:
                    client.send(beat)
                next_heartbeat = start + HEARTBEAT_PERIOD_S

            deadline += period
            if deadline < time.monotonic() - 5 * period:
                deadline = time.monotonic() + period  # resync after a long stall
