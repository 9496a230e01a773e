"""Minimal threaded HTTP server with pattern routing.

Every HTTP surface in the middleware (facade, gateway, sim controller, sim
devices) is a handful of JSON endpoints; this keeps them on one tiny,
dependency-free base. Route handlers receive a Request and return a
Response, or a StreamResponse whose chunks are flushed as produced.
"""

from __future__ import annotations

import json
import socket
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Iterable, Iterator
from urllib.parse import parse_qs, urlparse

from .errors import BindFailed, TacitError


@dataclass
class Request:
    method: str
    path: str
    params: dict[str, str]
    query: dict[str, str]
    headers: dict[str, str]
    body: bytes

    def json(self) -> dict:
        if not self.body:
            return {}
        data = json.loads(self.body.decode("utf-8"))
        if not isinstance(data, dict):
            raise ValueError("expected a JSON object")
        return data

    def text(self) -> str:
        return self.body.decode("utf-8")


@dataclass
class Response:
    status: int = 200
    body: bytes = b""
    content_type: str = "application/json"
    headers: dict[str, str] = field(default_factory=dict)


@dataclass
class StreamResponse:
    chunks: Iterator[bytes]
    content_type: str = "text/event-stream"
    status: int = 200


def json_response(payload, status: int = 200) -> Response:
    return Response(status=status, body=(json.dumps(payload) + "\n").encode("utf-8"))


def text_response(text: str, status: int = 200, content_type: str = "text/plain; charset=utf-8") -> Response:
    return Response(status=status, body=text.encode("utf-8"), content_type=content_type)


def error_response(exc: TacitError, status: int) -> Response:
    return json_response({"error": exc.to_json()}, status=status)


RouteHandler = Callable[[Request], "Response | StreamResponse"]


class Router:
    """Matches METHOD + path patterns like ``/sessions/{id}/stream``."""

    def __init__(self):
        self._routes: list[tuple[str, list[str], RouteHandler]] = []
        self.fallback: RouteHandler | None = None

    def add(self, method: str, pattern: str, handler: RouteHandler) -> None:
        segments = [s for s in pattern.split("/") if s != ""]
        self._routes.append((method.upper(), segments, handler))

    def match(self, method: str, path: str) -> tuple[RouteHandler, dict[str, str]] | None:
        parts = [s for s in path.split("/") if s != ""]
        for route_method, segments, handler in self._routes:
            if route_method != method.upper() or len(segments) != len(parts):
                continue
            params: dict[str, str] = {}
            for seg, part in zip(segments, parts):
                if seg.startswith("{") and seg.endswith("}"):
                    params[seg[1:-1]] = part
                elif seg != part:
                    break
            else:
                return handler, params
        return None


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    router: Router = None  # type: ignore[assignment]

    def log_message(self, fmt, *args):  # noqa: A003 - silence default stderr chatter
        pass

    def _handle(self, method: str) -> None:
        parsed = urlparse(self.path)
        matched = self.router.match(method, parsed.path)
        if matched is None and self.router.fallback is not None:
            matched = (self.router.fallback, {})
        if matched is None:
            self._send(json_response({"error": {"code": "NOT_FOUND", "message": parsed.path}}, 404))
            return
        handler, params = matched
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        query = {k: v[0] for k, v in parse_qs(parsed.query).items()}
        request = Request(
            method=method,
            path=parsed.path,
            params=params,
            query=query,
            headers={k.lower(): v for k, v in self.headers.items()},
            body=body,
        )
        try:
            result = handler(request)
        except (ValueError, KeyError) as exc:
            result = json_response({"error": {"code": "BAD_REQUEST", "message": str(exc)}}, 400)
        except Exception as exc:  # noqa: BLE001 - last-resort surface, never kill the server
            result = json_response({"error": {"code": "INTERNAL", "message": str(exc)}}, 500)
        if isinstance(result, StreamResponse):
            self._send_stream(result)
        else:
            self._send(result)

    def _send(self, response: Response) -> None:
        self.send_response(response.status)
        self.send_header("Content-Type", response.content_type)
        self.send_header("Content-Length", str(len(response.body)))
        for key, value in response.headers.items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(response.body)

    def _send_stream(self, response: StreamResponse) -> None:
        self.send_response(response.status)
        self.send_header("Content-Type", response.content_type)
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Connection", "close")
        self.end_headers()
        try:
            for chunk in response.chunks:
                self.wfile.write(chunk)
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            self.close_connection = True

    def do_GET(self):
        self._handle("GET")

    def do_POST(self):
        self._handle("POST")

    def do_DELETE(self):
        self._handle("DELETE")

    def do_PUT(self):
        self._handle("PUT")


class HttpServer:
    """A ThreadingHTTPServer wrapper: bind, serve in background, stop cleanly."""

    def __init__(self, host: str, port: int, router: Router):
        handler = type("BoundHandler", (_Handler,), {"router": router})
        try:
            self._server = ThreadingHTTPServer((host, port), handler)
        except OSError as exc:
            raise BindFailed(f"cannot bind {host}:{port}: {exc}") from exc
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def host(self) -> str:
        return self._server.server_address[0]

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        host = self.host if self.host not in ("0.0.0.0", "::") else "127.0.0.1"
        return f"http://{host}:{self.port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


def parse_hostport(listen: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    if ":" not in listen:
        raise ValueError(f"listen address must be host:port, got {listen!r}")
    host, _, port = listen.rpartition(":")
    return host or default_host, int(port)


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as sock:
        sock.bind((host, 0))
        return sock.getsockname()[1]
