"""Simulated device network and scenario harness.

Spawns mock displays, speakers and cameras speaking rest, soap or the native
line protocol, registers them with the coordination server, models the
tourist group's position, and records every request each device receives so
tests can assert routing down to exact counts.

Cameras are oracle-based: each tick, every camera within sensing radius of
the group emits one movement event carrying the group's heading. Rest/soap
cameras POST the event straight to the server; native cameras push an EVT
line over whatever gateway connection is currently open.
"""

from __future__ import annotations

import base64
import json
import socketserver
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Callable

import requests

from .errors import InvalidHeading, PortInUse, RegistrationFailed
from .gateway import GatewayConfig, GatewayServer, encode_event
from .httpkit import (
    HttpServer,
    Request,
    Response,
    Router,
    free_port,
    json_response,
    parse_hostport,
    text_response,
)
from .model import AccessSpec, DeviceDescriptor, Location

HEADINGS = ("north", "south", "east", "west")

KIND_CAPABILITIES = {
    "display": "visual.display",
    "speaker": "audio.speaker",
    "camera": "sensor.camera",
    "echo": "util.echo",
}

DEFAULT_SENSING_RADIUS_M = 100.0
HEARTBEAT_INTERVAL_S = 10.0


@dataclass
class SimDeviceSpec:
    id: str
    kind: str  # display | speaker | camera | echo
    protocol: str  # rest | soap | native
    location: Location
    behavior: str = "normal"  # normal | dead | busy
    listen: str = "127.0.0.1:0"
    sensing_radius_m: float = DEFAULT_SENSING_RADIUS_M

    @classmethod
    def from_json(cls, data: dict) -> "SimDeviceSpec":
        loc = data.get("location") or {}
        return cls(
            id=data["id"],
            kind=data["kind"],
            protocol=data["protocol"],
            location=Location(zone=loc.get("zone", ""), x=loc.get("x", 0.0), y=loc.get("y", 0.0)),
            behavior=data.get("behavior", "normal"),
            listen=data.get("listen", "127.0.0.1:0"),
            sensing_radius_m=float(data.get("sensing_radius_m", DEFAULT_SENSING_RADIUS_M)),
        )


@dataclass
class GroupState:
    x: float
    y: float
    heading: str
    tick_ms: int = 500
    zone: str = "station"


@dataclass
class ScenarioSpec:
    devices: list[SimDeviceSpec]
    tables: dict[str, dict[str, str]]
    group: GroupState
    script: list[dict] = field(default_factory=list)
    gateway: dict | None = None  # {"id": ..., "listen": ...}

    @classmethod
    def from_json(cls, data: dict) -> "ScenarioSpec":
        group = data.get("group") or {}
        return cls(
            devices=[SimDeviceSpec.from_json(d) for d in data.get("devices") or []],
            tables={k: dict(v) for k, v in (data.get("tables") or {}).items()},
            group=GroupState(
                x=group.get("x", 0.0),
                y=group.get("y", 0.0),
                heading=group.get("heading", "east"),
                tick_ms=int(group.get("tick_ms", 500)),
                zone=group.get("zone", "station"),
            ),
            script=list(data.get("script") or []),
            gateway=data.get("gateway"),
        )

    @classmethod
    def from_file(cls, path: str) -> "ScenarioSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass
class CaptureEntry:
    at: int
    device_id: str
    transport: str  # rest | soap | native | gateway
    detail: str
    correlation: str | None = None
    body: str | None = None

    def to_json(self) -> dict:
        return {
            "at": self.at,
            "device_id": self.device_id,
            "transport": self.transport,
            "detail": self.detail,
            "correlation": self.correlation,
            "body": self.body,
        }


class _DeviceState:
    """What a sim device remembers, queryable for assertions."""

    def __init__(self):
        self._lock = threading.Lock()
        self.last_text: str | None = None
        self.announcements: list[str] = []
        self.monitoring: bool = False
        self.monitor_target: str | None = None
        self.last_body: str | None = None

    def apply(self, kind: str, verb: str, args: dict[str, str]) -> None:
        with self._lock:
            if kind == "display" and verb == "show":
                self.last_text = args.get("text")
            elif kind == "speaker" and verb == "announce":
                self.announcements.append(args.get("text", ""))
            elif kind == "camera" and verb == "monitor":
                self.monitoring = True
                self.monitor_target = args.get("target")

    def to_json(self) -> dict:
        with self._lock:
            return {
                "last_text": self.last_text,
                "announcements": list(self.announcements),
                "monitoring": self.monitoring,
                "monitor_target": self.monitor_target,
                "last_body": self.last_body,
            }


class _SimDevice:
    def __init__(self, spec: SimDeviceSpec, record: Callable[[CaptureEntry], None]):
        self.spec = spec
        self.state = _DeviceState()
        self._record = record
        self.address: str = spec.listen  # resolved at spawn

    def record(self, transport: str, detail: str, correlation: str | None, body: str | None) -> None:
        self._record(
            CaptureEntry(
                at=time.time_ns() // 1_000_000,
                device_id=self.spec.id,
                transport=transport,
                detail=detail,
                correlation=correlation,
                body=body,
            )
        )

    def start(self) -> None:
        raise NotImplementedError

    def stop(self) -> None:
        raise NotImplementedError

    def emit_movement(self, heading: str) -> bool:
        raise NotImplementedError


class _RestDevice(_SimDevice):
    def __init__(self, spec, record, events_url: str):
        super().__init__(spec, record)
        self._events_url = events_url
        self._http = requests.Session()
        self._server: HttpServer | None = None

    def start(self) -> None:
        host, port = parse_hostport(self.spec.listen)
        self._server = HttpServer(host, port, self._router())
        self.address = f"{self._server.host}:{self._server.port}"
        self._server.start()

    def stop(self) -> None:
        if self._server is not None:
            self._server.stop()

    @property
    def endpoint(self) -> str:
        assert self._server is not None
        return self._server.url

    def _router(self) -> Router:
        router = Router()
        router.add("POST", "/actions/{verb}", self._handle_action)
        return router

    def _handle_action(self, request: Request) -> Response:
        body = request.json()
        verb = request.params["verb"]
        self.record("rest", f"POST {request.path}", body.get("correlation"), request.text())
        if self.spec.behavior == "busy":
            return json_response({"error": {"code": "BUSY", "message": "device busy"}})
        args = body.get("args") or {}
        self.state.apply(self.spec.kind, verb, args)
        if self.spec.kind == "echo":
            with self.state._lock:
                self.state.last_body = request.text()
        return json_response({"result": "ok"})

    def emit_movement(self, heading: str) -> bool:
        try:
            self._http.post(
                self._events_url,
                json={
                    "device_id": self.spec.id,
                    "event_type": "movement",
                    "payload": {"direction": heading},
                },
                timeout=5,
            )
            return True
        except requests.RequestException:
            return False


class _SoapDevice(_SimDevice):
    def __init__(self, spec, record, events_url: str):
        super().__init__(spec, record)
        self._events_url = events_url
        self._http = requests.Session()
        self._server: HttpServer | None = None

    def start(self) -> None:
        host, port = parse_hostport(self.spec.listen)
        router = Router()
        router.fallback = self._handle_envelope
        self._server = HttpServer(host, port, router)
        self.address = f"{self._server.host}:{self._server.port}"
        self._server.start()

    def stop(self) -> None:
        if self._server is not None:
            self._server.stop()

    @property
    def endpoint(self) -> str:
        assert self._server is not None
        return self._server.url

    def _handle_envelope(self, request: Request) -> Response:
        def reply(inner: str) -> Response:
            return text_response(
                f"<Envelope><Body>{inner}</Body></Envelope>",
                content_type="text/xml; charset=utf-8",
            )

        try:
            root = ET.fromstring(request.text())
            body = root.find("Body")
            action = body[0] if body is not None and len(body) else None
        except ET.ParseError:
            action = None
        if action is None:
            self.record("soap", f"POST {request.path}", None, request.text())
            return reply('<fault code="MALFORMED">bad envelope</fault>')
        correlation = action.get("correlation")
        self.record("soap", f"POST {request.path}", correlation, request.text())
        if self.spec.behavior == "busy":
            return reply('<fault code="BUSY">device busy</fault>')
        args = {arg.get("name", ""): arg.text or "" for arg in action.findall("arg")}
        self.state.apply(self.spec.kind, action.tag, args)
        return reply("<ok/>")

    def emit_movement(self, heading: str) -> bool:
        try:
            self._http.post(
                self._events_url,
                json={
                    "device_id": self.spec.id,
                    "event_type": "movement",
                    "payload": {"direction": heading},
                },
                timeout=5,
            )
            return True
        except requests.RequestException:
            return False


class _NativeDevice(_SimDevice):
    """TCP line-protocol device; pushes EVT lines on open connections."""

    def __init__(self, spec, record):
        super().__init__(spec, record)
        self._server: socketserver.ThreadingTCPServer | None = None
        self._thread: threading.Thread | None = None
        self._conn_lock = threading.Lock()
        self._connections: list = []

    def start(self) -> None:
        host, port = parse_hostport(self.spec.listen)
        device = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self) -> None:
                write_lock = threading.Lock()
                conn = (self.wfile, write_lock)
                with device._conn_lock:
                    device._connections.append(conn)
                try:
                    while True:
                        raw = self.rfile.readline()
                        if not raw:
                            return
                        reply = device.handle_line(raw.decode("utf-8", errors="replace"))
                        with write_lock:
                            self.wfile.write(reply.encode("utf-8"))
                            self.wfile.flush()
                except OSError:
                    pass
                finally:
                    with device._conn_lock:
                        if conn in device._connections:
                            device._connections.remove(conn)

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        try:
            self._server = Server((host, port), Handler)
        except OSError as exc:
            raise PortInUse(self.spec.listen) from exc
        self.address = f"{self._server.server_address[0]}:{self._server.server_address[1]}"
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()

    def handle_line(self, line: str) -> str:
        stripped = line.rstrip("\n")
        try:
            fields = stripped.split(" ")
            if fields[0] != "CMD" or len(fields) < 2:
                self.record("native", stripped, None, line)
                return "ERR MALFORMED bad line\n"
            verb = fields[1]
            args: dict[str, str] = {}
            for pair in fields[2:]:
                key, _, value = pair.partition("=")
                args[key] = base64.b64decode(value.encode("ascii")).decode("utf-8")
        except Exception:
            self.record("native", stripped, None, line)
            return "ERR MALFORMED bad line\n"
        self.record("native", stripped, None, line)
        if self.spec.behavior == "busy":
            return "ERR BUSY device busy\n"
        self.state.apply(self.spec.kind, verb, args)
        return "OK\n"

    def emit_movement(self, heading: str) -> bool:
        line = encode_event("movement", {"direction": heading}).encode("utf-8")
        with self._conn_lock:
            connections = list(self._connections)
        sent = False
        for wfile, write_lock in connections:
            try:
                with write_lock:
                    wfile.write(line)
                    wfile.flush()
                sent = True
            except OSError:
                pass
        return sent


class _DeadDevice(_SimDevice):
    """Registered but accepts no connections: the address point refuses."""

    def start(self) -> None:
        host, port = parse_hostport(self.spec.listen)
        if port == 0:
            port = free_port(host)
        self.address = f"{host}:{port}"

    def stop(self) -> None:
        pass

    @property
    def endpoint(self) -> str:
        return f"http://{self.address}"

    def emit_movement(self, heading: str) -> bool:
        return False


class World:
    """A running device network bound to one coordination server."""

    def __init__(self, scenario: ScenarioSpec, server_url: str):
        self.scenario = scenario
        self.server_url = server_url.rstrip("/")
        self.group = GroupState(**vars(scenario.group))
        self._http = requests.Session()
        self._capture_lock = threading.Lock()
        self._capture: list[CaptureEntry] = []
        self._devices: dict[str, _SimDevice] = {}
        self.gateway: GatewayServer | None = None
        self._controller: HttpServer | None = None
        self._stop = threading.Event()
        self._ticker: threading.Thread | None = None
        self._heartbeat: threading.Thread | None = None
        self._tick_count = 0
        self.script_sessions: list[str] = []

    # -- lifecycle -----------------------------------------------------------

    def spawn(self) -> "World":
        self._check_ports()
        try:
            self._start_devices()
            self._start_gateway()
            self._register_devices()
            self._start_controller()
        except Exception:
            self.close()
            raise
        self._heartbeat = threading.Thread(target=self._heartbeat_loop, daemon=True)
        self._heartbeat.start()
        return self

    def close(self) -> None:
        self.stop_ticker()
        self._stop.set()
        for device in self._devices.values():
            device.stop()
        if self.gateway is not None:
            self.gateway.stop()
        if self._controller is not None:
            self._controller.stop()

    def _check_ports(self) -> None:
        seen: set[str] = set()
        for spec in self.scenario.devices:
            _, port = parse_hostport(spec.listen)
            if port == 0:
                continue
            if spec.listen in seen:
                raise PortInUse(spec.listen)
            seen.add(spec.listen)

    def _start_devices(self) -> None:
        events_url = f"{self.server_url}/events"
        for spec in self.scenario.devices:
            if spec.behavior == "dead":
                device: _SimDevice = _DeadDevice(spec, self._record)
            elif spec.protocol == "native":
                device = _NativeDevice(spec, self._record)
            elif spec.protocol == "soap":
                device = _SoapDevice(spec, self._record, events_url)
            else:
                device = _RestDevice(spec, self._record, events_url)
            device.start()
            self._devices[spec.id] = device

    def _start_gateway(self) -> None:
        needs_gateway = any(s.protocol == "native" for s in self.scenario.devices)
        gw_spec = self.scenario.gateway
        if gw_spec is None:
            if not needs_gateway:
                return
            gw_spec = {"id": "gw-1", "listen": "127.0.0.1:0"}
        config = GatewayConfig(
            gateway_id=gw_spec.get("id", "gw-1"),
            listen=gw_spec.get("listen", "127.0.0.1:0"),
            server_events_url=f"{self.server_url}/events",
        )
        self.gateway = GatewayServer(config, request_observer=self._observe_gateway)
        self.gateway.start()

    def _observe_gateway(self, request: Request) -> None:
        correlation = None
        try:
            correlation = request.json().get("correlation")
        except ValueError:
            pass
        assert self.gateway is not None
        self._record(
            CaptureEntry(
                at=time.time_ns() // 1_000_000,
                device_id=self.gateway.config.gateway_id,
                transport="gateway",
                detail=f"POST {request.path}",
                correlation=correlation,
                body=request.text(),
            )
        )

    def _descriptor_for(self, device: _SimDevice) -> DeviceDescriptor:
        spec = device.spec
        if spec.protocol == "native":
            gw_id = self.gateway.config.gateway_id if self.gateway else "gw-1"
            access = AccessSpec(
                kind="native",
                gateway_id=gw_id,
                driver="lineproto",
                native_address=device.address,
            )
        else:
            endpoint = device.endpoint  # type: ignore[attr-defined]
            access = AccessSpec(kind=spec.protocol, endpoint=endpoint)
        return DeviceDescriptor(
            id=spec.id,
            capabilities=frozenset({KIND_CAPABILITIES[spec.kind]}),
            location=spec.location,
            access=access,
            last_heartbeat=time.time_ns() // 1_000_000,
            extra={"kind": spec.kind, "behavior": spec.behavior},
        )

    def _register_devices(self) -> None:
        for device in self._devices.values():
            descriptor = self._descriptor_for(device)
            try:
                resp = self._http.post(
                    f"{self.server_url}/devices", json=descriptor.to_json(), timeout=5
                )
            except requests.RequestException as exc:
                raise RegistrationFailed(f"{device.spec.id}: {exc}") from exc
            if resp.status_code not in (200, 201):
                raise RegistrationFailed(f"{device.spec.id}: HTTP {resp.status_code} {resp.text}")

    def _heartbeat_loop(self) -> None:
        while not self._stop.wait(HEARTBEAT_INTERVAL_S):
            now = time.time_ns() // 1_000_000
            for device_id in list(self._devices):
                try:
                    self._http.post(
                        f"{self.server_url}/devices/{device_id}/heartbeat",
                        json={"at": now},
                        timeout=5,
                    )
                except requests.RequestException:
                    pass

    # -- capture ----------------------------------------------------------------

    def _record(self, entry: CaptureEntry) -> None:
        with self._capture_lock:
            self._capture.append(entry)

    def capture(self) -> list[CaptureEntry]:
        with self._capture_lock:
            return list(self._capture)

    def device_state(self, device_id: str) -> dict | None:
        device = self._devices.get(device_id)
        return device.state.to_json() if device else None

    # -- group dynamics ------------------------------------------------------------

    def steer(self, heading: str) -> None:
        if heading not in HEADINGS:
            raise InvalidHeading(heading)
        self.group.heading = heading

    def tick(self) -> list[dict]:
        """Advance the group 1 m and let in-range cameras report movement."""
        self._run_script_actions(self._tick_count)
        self._tick_count += 1
        dx, dy = {
            "north": (0.0, 1.0),
            "south": (0.0, -1.0),
            "east": (1.0, 0.0),
            "west": (-1.0, 0.0),
        }[self.group.heading]
        self.group.x += dx
        self.group.y += dy
        emitted: list[dict] = []
        for device in self._devices.values():
            spec = device.spec
            if spec.kind != "camera" or spec.behavior == "dead":
                continue
            dist = ((spec.location.x - self.group.x) ** 2 + (spec.location.y - self.group.y) ** 2) ** 0.5
            if dist > spec.sensing_radius_m:
                continue
            if device.emit_movement(self.group.heading):
                emitted.append(
                    {
                        "device_id": spec.id,
                        "event_type": "movement",
                        "payload": {"direction": self.group.heading},
                    }
                )
        return emitted

    def _run_script_actions(self, tick_index: int) -> None:
        for action in self.scenario.script:
            if int(action.get("tick", 0)) != tick_index:
                continue
            if action.get("action") == "steer":
                self.steer(action["heading"])
            elif action.get("action") == "request":
                try:
                    resp = self._http.post(
                        f"{self.server_url}/sessions",
                        json={
                            "logic": action["logic"],
                            "params": action.get("params") or {},
                            "user": {"zone": self.group.zone, "x": self.group.x, "y": self.group.y},
                        },
                        timeout=10,
                    )
                    if resp.status_code == 201:
                        session_id = resp.json()["session_id"]
                        self.script_sessions.append(session_id)
                        self._await_request_settled(session_id)
                except requests.RequestException:
                    pass

    def _await_request_settled(self, session_id: str, timeout_s: float = 5.0) -> None:
        """Block until the session's request phase finished (its subscriptions
        are registered or it reached a terminal state), so events from later
        ticks cannot race the subscription setup."""
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            try:
                view = self._http.get(
                    f"{self.server_url}/sessions/{session_id}", timeout=5
                ).json()
            except (requests.RequestException, ValueError):
                return
            if view.get("state") in ("completed", "failed") or view.get("subscriptions"):
                return
            time.sleep(0.01)

    def run_script(self, ticks: int, settle_s: float = 0.0) -> None:
        """Drive the scenario script synchronously for a fixed tick count."""
        for _ in range(ticks):
            self.tick()
            if settle_s:
                time.sleep(settle_s)

    # -- ticker + controller --------------------------------------------------------

    def start_ticker(self) -> None:
        if self._ticker is not None:
            return
        self._stop.clear()

        def loop() -> None:
            while not self._stop.wait(self.group.tick_ms / 1000.0):
                self.tick()

        self._ticker = threading.Thread(target=loop, daemon=True)
        self._ticker.start()

    def stop_ticker(self) -> None:
        self._stop.set()
        if self._ticker is not None:
            self._ticker.join(timeout=5)
            self._ticker = None

    def _start_controller(self) -> None:
        router = Router()
        router.add("POST", "/sim/steer", self._handle_steer)
        router.add("GET", "/sim/capture", lambda req: json_response(
            {"entries": [e.to_json() for e in self.capture()]}
        ))
        router.add("GET", "/sim/devices/{id}/state", self._handle_device_state)
        router.add("GET", "/healthz", lambda req: json_response({"status": "ok"}))
        self._controller = HttpServer("127.0.0.1", 0, router)
        self._controller.start()

    @property
    def controller_url(self) -> str:
        assert self._controller is not None
        return self._controller.url

    def _handle_steer(self, request: Request) -> Response:
        heading = request.json().get("heading", "")
        try:
            self.steer(heading)
        except InvalidHeading as exc:
            return json_response({"error": exc.to_json()}, status=400)
        return json_response({"heading": heading})

    def _handle_device_state(self, request: Request) -> Response:
        state = self.device_state(request.params["id"])
        if state is None:
            return json_response(
                {"error": {"code": "UNKNOWN_DEVICE", "message": request.params["id"]}}, status=404
            )
        return json_response(state)


def spawn_world(scenario: ScenarioSpec, server_url: str) -> World:
    return World(scenario, server_url).spawn()
