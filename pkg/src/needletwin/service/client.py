"""Blocking client for the plan server wire protocol.

A background reader thread splits frames and routes responses to waiting
callers by envelope id; events land in a queue (optionally fanned out to
registered callbacks).
"""

import queue
import socket
import threading
import time

from ..errors import NeedleTwinError, ProtocolError
from . import protocol


class ServiceError(NeedleTwinError):
    """Error envelope surfaced to the caller."""

    def __init__(self, code, message):
        super().__init__(f"{code}: {message}")
        self.code = code


class PlanClient:
    def __init__(self, host, port, timeout=10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.timeout = timeout
        self.events = queue.Queue()
        self._next_id = 0
        self._id_lock = threading.Lock()
        self._waiters = {}
        self._waiters_lock = threading.Lock()
        self._event_handlers = []
        self._closed = threading.Event()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    # ---- plumbing ----

    def _read_loop(self):
        decoder = protocol.FrameDecoder()
        while not self._closed.is_set():
            try:
                data = self.sock.recv(65536)
            except OSError:
                break
            if not data:
                break
            try:
                payloads = decoder.feed(data)
            except ProtocolError:
                break
            for payload in payloads:
                try:
                    envelope = protocol.decode_envelope(payload)
                except ProtocolError:
                    continue
                self._dispatch(envelope)
        self._closed.set()
        with self._waiters_lock:
            for q in self._waiters.values():
                q.put(None)

    def _dispatch(self, envelope):
        kind = envelope["kind"]
        if kind in ("response", "error"):
            with self._waiters_lock:
                q = self._waiters.pop(envelope.get("id"), None)
            if q is not None:
                q.put(envelope)
            elif kind == "error" and envelope.get("id") is None:
                self.events.put(envelope)  # unsolicited protocol error
        elif kind == "event":
            envelope = dict(envelope)
            envelope["received_ms"] = time.monotonic_ns() // 1_000_000
            for handler in list(self._event_handlers):
                handler(envelope)
            self.events.put(envelope)

    def on_event(self, handler):
        self._event_handlers.append(handler)

    # ---- API ----

    def request(self, op, body=None, timeout=None):
        with self._id_lock:
            self._next_id += 1
            req_id = self._next_id
        q = queue.Queue()
        with self._waiters_lock:
            self._waiters[req_id] = q
        self.sock.sendall(protocol.encode_envelope(protocol.make_request(req_id, op, body)))
        try:
            envelope = q.get(timeout=timeout or self.timeout)
        except queue.Empty:
            with self._waiters_lock:
                self._waiters.pop(req_id, None)
            raise TimeoutError(f"no response to {op!r} within {timeout or self.timeout}s")
        if envelope is None:
            raise ConnectionError("connection closed while waiting for response")
        if envelope["kind"] == "error":
            body = envelope.get("body") or {}
            raise ServiceError(body.get("code", "UNKNOWN"), body.get("message", ""))
        return envelope.get("body") or {}

    def next_event(self, timeout=10.0, op=None):
        """Pop the next event, optionally filtered by op name."""
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError(f"no event{' ' + op if op else ''} within {timeout}s")
            envelope = self.events.get(timeout=remaining)
            if op is None or envelope["op"] == op:
                return envelope

    def drain_events(self):
        out = []
        while True:
            try:
                out.append(self.events.get_nowait())
            except queue.Empty:
                return out

    def send_raw(self, data: bytes):
        """Ship raw bytes down the socket (protocol tests)."""
        self.sock.sendall(data)

    def close(self):
        self._closed.set()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
