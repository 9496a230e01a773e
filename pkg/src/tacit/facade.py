"""The coordination server's HTTP API.

Ties the registry, logic store, planner and session engine together behind
one JSON API, streams session logs as server-sent events, and optionally
serves the operator console as static assets under /console/.
"""

from __future__ import annotations

import json
import mimetypes
import os
import time
from dataclasses import dataclass
from queue import Empty
from typing import Iterator

from . import vocab
from .dsl import ParseError, parse, validate
from .dispatch import HttpDispatcher
from .errors import (
    ConfigInvalid,
    InvalidDescriptor,
    StaleTimestamp,
    UnknownDevice,
    UnknownLogic,
)
from .httpkit import (
    HttpServer,
    Request,
    Response,
    Router,
    StreamResponse,
    error_response,
    json_response,
    parse_hostport,
    text_response,
)
from .model import DeviceDescriptor, Location
from .registry import DeviceRegistry
from .runtime import TERMINAL_STATES, SessionEngine


@dataclass
class Config:
    listen: str = "127.0.0.1:0"
    registry_path: str | None = None
    ttl_ms: int = 30_000
    dispatch_timeout_ms: int = 2_000
    max_attempts: int = 2
    session_idle_timeout_ms: int = 600_000
    tables_path: str | None = None
    console_dir: str | None = None
    vocabulary: tuple[str, ...] | None = None

    def validated(self) -> "Config":
        for name in ("ttl_ms", "dispatch_timeout_ms", "max_attempts", "session_idle_timeout_ms"):
            if getattr(self, name) <= 0:
                raise ConfigInvalid(name, "must be positive")
        if ":" not in self.listen:
            raise ConfigInvalid("listen", "must be host:port")
        if self.tables_path is not None and not os.path.isfile(self.tables_path):
            raise ConfigInvalid("tables_path", f"not a readable file: {self.tables_path}")
        if self.console_dir is not None and not os.path.isdir(self.console_dir):
            raise ConfigInvalid("console_dir", f"not a directory: {self.console_dir}")
        return self

    @classmethod
    def from_file(cls, path: str) -> "Config":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}  # type: ignore[attr-defined]
        unknown = set(data) - known
        if unknown:
            raise ConfigInvalid(sorted(unknown)[0], "unknown config field")
        if "vocabulary" in data and data["vocabulary"] is not None:
            data["vocabulary"] = tuple(data["vocabulary"])
        return cls(**data).validated()


def load_tables(path: str | None) -> dict[str, dict[str, str]]:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigInvalid("tables_path", "tables file must be a JSON object")
    return {name: {str(k): str(v) for k, v in table.items()} for name, table in data.items()}


class FacadeServer:
    def __init__(self, config: Config, *, clock=None):
        self.config = config.validated()
        self._clock = clock or (lambda: time.time_ns() // 1_000_000)
        self.registry = DeviceRegistry(config.registry_path, clock=self._clock)
        self.tables = load_tables(config.tables_path)
        self.dispatcher = HttpDispatcher(gateway_resolver=self._gateway_url)
        self.engine = SessionEngine(
            self.registry,
            self.dispatcher,
            tables=self.tables,
            clock=self._clock,
            ttl_ms=config.ttl_ms,
            dispatch_timeout_ms=config.dispatch_timeout_ms,
            max_attempts=config.max_attempts,
            idle_timeout_ms=config.session_idle_timeout_ms,
        )
        self._logic_sources: dict[str, str] = {}
        host, port = parse_hostport(config.listen)
        self._server = HttpServer(host, port, self._router())

    # -- lifecycle ------------------------------------------------------------

    @property
    def url(self) -> str:
        return self._server.url

    def start(self) -> "FacadeServer":
        self._server.start()
        return self

    def stop(self) -> None:
        self.engine.shutdown()
        self._server.stop()

    def _gateway_url(self, gateway_id: str) -> str | None:
        device = self.registry.get(gateway_id)
        if device is not None and device.access.kind == "rest":
            return device.access.endpoint
        return None

    # -- routing ----------------------------------------------------------------

    def _router(self) -> Router:
        router = Router()
        router.add("GET", "/healthz", lambda req: json_response({"status": "ok"}))
        router.add("POST", "/devices", self._post_device)
        router.add("DELETE", "/devices/{id}", self._delete_device)
        router.add("POST", "/devices/{id}/heartbeat", self._post_heartbeat)
        router.add("GET", "/devices", self._get_devices)
        router.add("POST", "/logics", self._post_logic)
        router.add("GET", "/logics/{name}", self._get_logic)
        router.add("POST", "/sessions", self._post_session)
        router.add("GET", "/sessions/{id}", self._get_session)
        router.add("GET", "/sessions/{id}/stream", self._stream_session)
        router.add("POST", "/events", self._post_event)
        router.add("GET", "/console", self._console_asset)
        router.add("GET", "/console/{file}", self._console_asset)
        return router

    # -- devices ------------------------------------------------------------------

    def _post_device(self, request: Request) -> Response:
        descriptor = DeviceDescriptor.from_json(request.json())
        try:
            device_id = self.registry.register(descriptor)
        except InvalidDescriptor as exc:
            return error_response(exc, 400)
        return json_response({"id": device_id}, status=201)

    def _delete_device(self, request: Request) -> Response:
        try:
            self.registry.delete(request.params["id"])
        except UnknownDevice as exc:
            return error_response(exc, 404)
        return Response(status=204)

    def _post_heartbeat(self, request: Request) -> Response:
        at = request.json().get("at")
        if at is None:
            at = self._clock()
        try:
            self.registry.heartbeat(request.params["id"], int(at))
        except UnknownDevice as exc:
            return error_response(exc, 404)
        except StaleTimestamp as exc:
            return error_response(exc, 409)
        return Response(status=204)

    def _get_devices(self, request: Request) -> Response:
        capability = request.query.get("capability")
        zone = request.query.get("zone")
        if capability:
            devices = self.registry.query(
                capability, now=self._clock(), ttl_ms=self.config.ttl_ms, zone=zone
            )
        else:
            devices = list(self.registry.snapshot(self._clock()).devices)
            if zone:
                devices = [d for d in devices if d.location.zone == zone]
        return json_response({"devices": [d.to_json() for d in devices]})

    # -- logic store -----------------------------------------------------------------

    def _post_logic(self, request: Request) -> Response:
        name = request.query.get("name")
        if not name:
            return json_response(
                {"error": {"code": "BAD_REQUEST", "message": "missing ?name="}}, status=400
            )
        source = request.text()
        try:
            logic = parse(source)
        except ParseError as exc:
            return json_response(
                {
                    "error": {
                        "code": "PARSE_ERROR",
                        "message": exc.message,
                        "line": exc.line,
                        "column": exc.column,
                    }
                },
                status=400,
            )
        vocabulary = frozenset(self.config.vocabulary or vocab.DEFAULT_VOCABULARY)
        table_functions = frozenset(self.tables) or vocab.DEFAULT_TABLE_FUNCTIONS
        report = validate(logic, vocabulary, table_functions)
        findings = [
            {
                "severity": f.severity,
                "path": f.path,
                "message": f.message,
                "line": f.line,
                "col": f.col,
            }
            for f in report.findings
        ]
        if not report.ok:
            return json_response(
                {"error": {"code": "VALIDATION_FAILED", "message": "logic rejected"}, "findings": findings},
                status=400,
            )
        self._logic_sources[name] = source
        self.engine.add_logic(name, logic)
        return json_response({"name": name, "findings": findings}, status=201)

    def _get_logic(self, request: Request) -> Response:
        name = request.params["name"]
        source = self._logic_sources.get(name)
        if source is None:
            return error_response(UnknownLogic(name), 404)
        return text_response(source)

    # -- sessions ---------------------------------------------------------------------

    def _post_session(self, request: Request) -> Response:
        body = request.json()
        user = body.get("user") or {}
        location = Location(
            zone=user.get("zone", "user"),
            x=float(user.get("x", 0.0)),
            y=float(user.get("y", 0.0)),
        )
        params = {str(k): str(v) for k, v in (body.get("params") or {}).items()}
        try:
            session_id = self.engine.start_session(body.get("logic", ""), params, location)
        except UnknownLogic as exc:
            return error_response(exc, 404)
        return json_response({"session_id": session_id}, status=201)

    def _get_session(self, request: Request) -> Response:
        session = self.engine.get_session(request.params["id"])
        if session is None:
            return json_response(
                {"error": {"code": "UNKNOWN_SESSION", "message": request.params["id"]}}, status=404
            )
        return json_response(session.to_json())

    def _stream_session(self, request: Request) -> StreamResponse | Response:
        session = self.engine.get_session(request.params["id"])
        if session is None:
            return json_response(
                {"error": {"code": "UNKNOWN_SESSION", "message": request.params["id"]}}, status=404
            )
        snapshot, q = session.attach_watcher()

        def chunks() -> Iterator[bytes]:
            try:
                for entry in snapshot:
                    yield _sse(entry)
                if session.state in TERMINAL_STATES and q.empty():
                    return
                while True:
                    try:
                        item = q.get(timeout=15.0)
                    except Empty:
                        yield b": keep-alive\n\n"
                        continue
                    if item is None:
                        return
                    yield _sse(item)
            finally:
                session.detach_watcher(q)

        return StreamResponse(chunks())

    # -- events --------------------------------------------------------------------------

    def _post_event(self, request: Request) -> Response:
        body = request.json()
        payload = {str(k): str(v) for k, v in (body.get("payload") or {}).items()}
        try:
            self.engine.ingest_event(body.get("device_id", ""), body.get("event_type", ""), payload)
        except UnknownDevice as exc:
            return error_response(exc, 404)
        return json_response({"accepted": True})

    # -- console assets ---------------------------------------------------------------------

    def _console_asset(self, request: Request) -> Response:
        if self.config.console_dir is None:
            return json_response(
                {"error": {"code": "NOT_FOUND", "message": "console not configured"}}, status=404
            )
        name = request.params.get("file") or "index.html"
        if "/" in name or name.startswith("."):
            return json_response({"error": {"code": "NOT_FOUND", "message": name}}, status=404)
        path = os.path.join(self.config.console_dir, name)
        if not os.path.isfile(path):
            return json_response({"error": {"code": "NOT_FOUND", "message": name}}, status=404)
        ctype = mimetypes.guess_type(name)[0] or "application/octet-stream"
        with open(path, "rb") as fh:
            return Response(status=200, body=fh.read(), content_type=ctype)


def _sse(entry: dict) -> bytes:
    return f"data: {json.dumps(entry)}\n\n".encode("utf-8")


def serve(config: Config) -> FacadeServer:
    """Start a facade server; the caller owns stop()."""
    return FacadeServer(config).start()
