"""Gateway: translates abstract-instruction envelopes to device-native protocols.

The coordination server speaks plain HTTP to the gateway; the gateway owns
the device-specific legwork. One driver ships: ``lineproto``, a line-based
TCP protocol with base64-encoded values:

    CMD <verb> <key>=<base64(value)> ...\\n      server -> device
    OK\\n                                        device -> server
    ERR <code> <message...>\\n                   device -> server
    EVT <event_type> <key>=<base64(value)> ...\\n device -> server (async)

Connections are pooled per device address with one outstanding command at a
time; a reader thread per connection separates command replies from
asynchronous EVT lines, which are relayed upstream to the coordination
server's event endpoint (at-least-once, one retry).
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import re
import socket
import threading
import time
from dataclasses import dataclass, field
from queue import Empty, Queue
from typing import Callable

import requests

from .errors import ConfigInvalid, EncodingError, MalformedLine, UnknownDriver
from .httpkit import HttpServer, Request, Response, Router, json_response, parse_hostport
from .model import AccessSpec, DeviceDescriptor, Location

log = logging.getLogger(__name__)

_IDENT_RE = re.compile(r"^[a-z][a-z0-9_]*$")

DEVICE_TIMEOUT_MS = 1_500

ENVELOPE_KEYS = ("device_id", "driver", "native_address", "verb", "args", "correlation", "session")


@dataclass(frozen=True)
class DispatchEnvelope:
    device_id: str
    driver: str
    native_address: str
    verb: str
    args: dict[str, str]
    correlation_id: str
    session_id: str

    @classmethod
    def from_json(cls, data: dict) -> "DispatchEnvelope":
        missing = [k for k in ENVELOPE_KEYS if k not in data]
        if missing:
            raise ValueError(f"envelope is missing key {missing[0]!r}")
        args = data["args"]
        if not isinstance(args, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in args.items()
        ):
            raise ValueError("envelope args must map strings to strings")
        return cls(
            device_id=data["device_id"],
            driver=data["driver"],
            native_address=data["native_address"],
            verb=data["verb"],
            args=dict(args),
            correlation_id=data["correlation"],
            session_id=data["session"],
        )


# ---------------------------------------------------------------------------
# lineproto codec
# ---------------------------------------------------------------------------


def _b64(value: str) -> str:
    return base64.b64encode(value.encode("utf-8")).decode("ascii")


def _unb64(value: str) -> str:
    return base64.b64decode(value.encode("ascii"), validate=True).decode("utf-8")


def encode_native(envelope: DispatchEnvelope) -> str:
    """``CMD <verb> <key>=<base64(value)>`` with keys ascending, LF-terminated."""
    if not _IDENT_RE.match(envelope.verb):
        raise EncodingError(f"verb {envelope.verb!r} is not a valid identifier")
    parts = ["CMD", envelope.verb]
    for key in sorted(envelope.args):
        if not _IDENT_RE.match(key):
            raise EncodingError(f"argument key {key!r} is not a valid identifier")
        parts.append(f"{key}={_b64(envelope.args[key])}")
    return " ".join(parts) + "\n"


def encode_event(event_type: str, payload: dict[str, str]) -> str:
    """``EVT`` line a native device emits; same framing rules as commands."""
    if not _IDENT_RE.match(event_type):
        raise EncodingError(f"event type {event_type!r} is not a valid identifier")
    parts = ["EVT", event_type]
    for key in sorted(payload):
        if not _IDENT_RE.match(key):
            raise EncodingError(f"payload key {key!r} is not a valid identifier")
        parts.append(f"{key}={_b64(payload[key])}")
    return " ".join(parts) + "\n"


@dataclass(frozen=True)
class DecodedOk:
    pass


@dataclass(frozen=True)
class DecodedError:
    code: str
    message: str


@dataclass(frozen=True)
class DecodedEvent:
    event_type: str
    payload: dict[str, str]


def decode_native(line: str) -> DecodedOk | DecodedError | DecodedEvent:
    stripped = line.rstrip("\n").rstrip("\r")
    fields = stripped.split(" ")
    head = fields[0]
    if head == "OK":
        if len(fields) != 1:
            raise MalformedLine(stripped)
        return DecodedOk()
    if head == "ERR":
        if len(fields) < 2 or not fields[1]:
            raise MalformedLine(stripped)
        return DecodedError(code=fields[1], message=" ".join(fields[2:]))
    if head == "EVT":
        if len(fields) < 2 or not _IDENT_RE.match(fields[1]):
            raise MalformedLine(stripped)
        payload: dict[str, str] = {}
        for pair in fields[2:]:
            key, sep, value = pair.partition("=")
            if not sep or not _IDENT_RE.match(key):
                raise MalformedLine(stripped)
            try:
                payload[key] = _unb64(value)
            except (binascii.Error, UnicodeDecodeError, ValueError) as exc:
                raise MalformedLine(stripped) from exc
        return DecodedEvent(event_type=fields[1], payload=payload)
    raise MalformedLine(stripped)


# ---------------------------------------------------------------------------
# Native connections
# ---------------------------------------------------------------------------


class _NativeConnection:
    """One pooled TCP connection: serialized commands, independent event reader."""

    def __init__(self, address: str, device_id: str, on_event: Callable[[str, DecodedEvent], None]):
        self.address = address
        self.device_id = device_id
        host, port = parse_hostport(address)
        self._sock = socket.create_connection((host, port), timeout=5.0)
        self._sock.settimeout(None)
        self._file = self._sock.makefile("rb")
        self._replies: Queue = Queue()
        self._on_event = on_event
        self.command_lock = threading.Lock()
        self.alive = True
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        while True:
            try:
                raw = self._file.readline()
            except OSError:
                raw = b""
            if not raw:
                self.alive = False
                self._replies.put(None)
                return
            try:
                decoded = decode_native(raw.decode("utf-8", errors="replace"))
            except MalformedLine as exc:
                self._replies.put(exc)
                continue
            if isinstance(decoded, DecodedEvent):
                self._on_event(self.device_id, decoded)
            else:
                self._replies.put(decoded)

    def roundtrip(self, line: str, timeout_ms: int) -> DecodedOk | DecodedError | MalformedLine | None:
        """Send one command line and wait for its reply; None means timeout/EOF."""
        try:
            self._sock.sendall(line.encode("utf-8"))
        except OSError:
            self.alive = False
            return None
        try:
            return self._replies.get(timeout=timeout_ms / 1000.0)
        except Empty:
            return None

    def close(self) -> None:
        self.alive = False
        try:
            self._sock.close()
        except OSError:
            pass


# ---------------------------------------------------------------------------
# Gateway server
# ---------------------------------------------------------------------------


@dataclass
class GatewayConfig:
    gateway_id: str
    listen: str
    server_events_url: str
    drivers: tuple[str, ...] = ("lineproto",)
    device_timeout_ms: int = DEVICE_TIMEOUT_MS
    register_with_server: bool = True

    @classmethod
    def from_file(cls, path: str) -> "GatewayConfig":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        for key in ("gateway_id", "listen", "server_events_url"):
            if not data.get(key):
                raise ConfigInvalid(key, "required")
        return cls(
            gateway_id=data["gateway_id"],
            listen=data["listen"],
            server_events_url=data["server_events_url"],
            drivers=tuple(data.get("drivers") or ("lineproto",)),
            device_timeout_ms=int(data.get("device_timeout_ms") or DEVICE_TIMEOUT_MS),
            register_with_server=bool(data.get("register_with_server", True)),
        )


class GatewayServer:
    """HTTP front (POST /dispatch, GET /healthz) over the native connection pool."""

    def __init__(self, config: GatewayConfig, *, request_observer: Callable[[Request], None] | None = None):
        self.config = config
        self._http = requests.Session()
        self._pool: dict[str, _NativeConnection] = {}
        self._pool_lock = threading.Lock()
        self._observer = request_observer
        self.dropped_relays = 0
        self._heartbeat_thread: threading.Thread | None = None
        self._stopping = threading.Event()
        router = Router()
        router.add("GET", "/healthz", lambda req: json_response({"status": "ok"}))
        router.add("POST", "/dispatch", self._handle_dispatch)
        host, port = parse_hostport(config.listen)
        self._server = HttpServer(host, port, router)

    @property
    def url(self) -> str:
        return self._server.url

    @property
    def events_base_url(self) -> str:
        # ".../events" -> base server URL, used for self-registration
        return self.config.server_events_url.rsplit("/events", 1)[0]

    def start(self) -> None:
        self._server.start()
        if self.config.register_with_server:
            self._register_with_server()
            self._heartbeat_thread = threading.Thread(target=self._heartbeat_loop, daemon=True)
            self._heartbeat_thread.start()

    def stop(self) -> None:
        self._stopping.set()
        self._server.stop()
        with self._pool_lock:
            connections = list(self._pool.values())
            self._pool.clear()
        for conn in connections:
            conn.close()

    # -- upstream registration ------------------------------------------------

    def _descriptor(self) -> DeviceDescriptor:
        return DeviceDescriptor(
            id=self.config.gateway_id,
            capabilities=frozenset({"infra.gateway"}),
            location=Location(zone="infra", x=0.0, y=0.0),
            access=AccessSpec(kind="rest", endpoint=self.url),
            last_heartbeat=time.time_ns() // 1_000_000,
            extra={"role": "gateway"},
        )

    def _register_with_server(self) -> None:
        try:
            resp = self._http.post(
                f"{self.events_base_url}/devices", json=self._descriptor().to_json(), timeout=5
            )
            if resp.status_code not in (200, 201):
                log.warning("gateway registration rejected: HTTP %s", resp.status_code)
        except requests.RequestException as exc:
            log.warning("gateway registration failed: %s", exc)

    def _heartbeat_loop(self) -> None:
        while not self._stopping.wait(10.0):
            try:
                self._http.post(
                    f"{self.events_base_url}/devices/{self.config.gateway_id}/heartbeat",
                    json={"at": time.time_ns() // 1_000_000},
                    timeout=5,
                )
            except requests.RequestException:
                pass

    # -- dispatch ----------------------------------------------------------------

    def _handle_dispatch(self, request: Request) -> Response:
        if self._observer is not None:
            self._observer(request)
        envelope = DispatchEnvelope.from_json(request.json())
        if envelope.driver not in self.config.drivers:
            return json_response({"error": UnknownDriver(envelope.driver).to_json()}, status=400)
        outcome, code, message = self._run_device_leg(envelope)
        body = {"correlation": envelope.correlation_id, "outcome": outcome, "code": code, "message": message}
        return json_response(body)

    def _run_device_leg(self, envelope: DispatchEnvelope) -> tuple[str, str | None, str | None]:
        try:
            line = encode_native(envelope)
        except EncodingError as exc:
            return "transport_error", exc.code, exc.message
        try:
            conn = self._connection_for(envelope)
        except OSError as exc:
            return "transport_error", None, f"{envelope.native_address}: {exc}"
        with conn.command_lock:
            reply = conn.roundtrip(line, self.config.device_timeout_ms)
        if reply is None:
            was_alive = conn.alive
            self._discard(conn)
            if was_alive:
                return "timeout", None, f"no reply within {self.config.device_timeout_ms} ms"
            return "transport_error", None, "connection lost"
        if isinstance(reply, MalformedLine):
            return "transport_error", reply.code, reply.message
        if isinstance(reply, DecodedError):
            return "device_error", reply.code, reply.message
        return "ok", None, None

    def _connection_for(self, envelope: DispatchEnvelope) -> _NativeConnection:
        with self._pool_lock:
            conn = self._pool.get(envelope.native_address)
            if conn is not None and conn.alive:
                conn.device_id = envelope.device_id
                return conn
            conn = _NativeConnection(envelope.native_address, envelope.device_id, self._relay_event)
            self._pool[envelope.native_address] = conn
            return conn

    def _discard(self, conn: _NativeConnection) -> None:
        with self._pool_lock:
            if self._pool.get(conn.address) is conn:
                del self._pool[conn.address]
        conn.close()

    # -- event relay ---------------------------------------------------------------

    def _relay_event(self, device_id: str, event: DecodedEvent) -> None:
        body = {
            "device_id": device_id,
            "event_type": event.event_type,
            "payload": event.payload,
        }
        for attempt in (1, 2):
            try:
                resp = self._http.post(self.config.server_events_url, json=body, timeout=5)
                if resp.status_code < 500:
                    return
            except requests.RequestException:
                pass
            if attempt == 1:
                time.sleep(0.05)
        self.dropped_relays += 1
        log.warning("dropped event relay for %s/%s after retry", device_id, event.event_type)
