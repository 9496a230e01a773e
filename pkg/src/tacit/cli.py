"""Operator CLI: run servers, validate logic files, and poke a running server.

Exit codes: 0 success, 1 validation or request failure, 2 transport failure,
64 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from typing import Sequence

import requests

from . import vocab
from .devsim import ScenarioSpec, World
from .dsl import ParseError, parse, validate
from .errors import TacitError
from .facade import Config, FacadeServer
from .gateway import GatewayConfig, GatewayServer

EX_OK = 0
EX_FAIL = 1
EX_TRANSPORT = 2
EX_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EX_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="tacit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("server", help="run the coordination server")
    p.add_argument("--config", required=True, metavar="F")

    p = sub.add_parser("gateway", help="run a protocol gateway")
    p.add_argument("--config", required=True, metavar="F")

    p = sub.add_parser("sim", help="run a simulated device world")
    p.add_argument("--scenario", required=True, metavar="F")
    p.add_argument("--server", required=True, metavar="URL")

    p = sub.add_parser("validate", help="parse and validate logic files")
    p.add_argument("files", nargs="+", metavar="FILE")

    p = sub.add_parser("register", help="register a device descriptor")
    p.add_argument("--server", required=True, metavar="URL")
    p.add_argument("file", metavar="FILE")

    p = sub.add_parser("request", help="start a session")
    p.add_argument("--server", required=True, metavar="URL")
    p.add_argument("--logic", required=True, metavar="NAME")
    p.add_argument("--param", action="append", default=[], metavar="K=V")
    p.add_argument("--user-zone", default="user", metavar="Z")
    p.add_argument("--user-x", type=float, default=0.0, metavar="N")
    p.add_argument("--user-y", type=float, default=0.0, metavar="N")

    p = sub.add_parser("logs", help="print a session's log")
    p.add_argument("--server", required=True, metavar="URL")
    p.add_argument("session", metavar="SESSION")
    p.add_argument("--follow", action="store_true")

    return parser


def _wait_forever() -> None:
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass


def _cmd_server(args) -> int:
    try:
        server = FacadeServer(Config.from_file(args.config)).start()
    except (TacitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_FAIL
    print(f"listening on {server.url}")
    _wait_forever()
    server.stop()
    return EX_OK


def _cmd_gateway(args) -> int:
    try:
        gateway = GatewayServer(GatewayConfig.from_file(args.config))
        gateway.start()
    except (TacitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_FAIL
    print(f"gateway {gateway.config.gateway_id} listening on {gateway.url}")
    _wait_forever()
    gateway.stop()
    return EX_OK


def _cmd_sim(args) -> int:
    try:
        scenario = ScenarioSpec.from_file(args.scenario)
        world = World(scenario, args.server).spawn()
    except (TacitError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EX_FAIL
    world.start_ticker()
    print(f"sim controller on {world.controller_url}")
    _wait_forever()
    world.close()
    return EX_OK


def _cmd_validate(args) -> int:
    failed = False
    for path in args.files:
        try:
            with open(path, encoding="utf-8") as fh:
                source = fh.read()
        except OSError as exc:
            print(f"{path}: {exc}", file=sys.stderr)
            failed = True
            continue
        try:
            logic = parse(source)
        except ParseError as exc:
            print(f"{path}:{exc.line}:{exc.column}: error: {exc.message}")
            failed = True
            continue
        report = validate(logic, vocab.DEFAULT_VOCABULARY, vocab.DEFAULT_TABLE_FUNCTIONS)
        for finding in report.findings:
            print(f"{path}:{finding.format()}")
        if not report.ok:
            failed = True
    return EX_FAIL if failed else EX_OK


def _cmd_register(args) -> int:
    try:
        with open(args.file, encoding="utf-8") as fh:
            descriptor = json.load(fh)
    except (OSError, ValueError) as exc:
        print(f"{args.file}: {exc}", file=sys.stderr)
        return EX_FAIL
    try:
        resp = requests.post(f"{args.server.rstrip('/')}/devices", json=descriptor, timeout=10)
    except requests.RequestException as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EX_TRANSPORT
    if resp.status_code in (200, 201):
        print(resp.json().get("id", ""))
        return EX_OK
    print(resp.text.strip(), file=sys.stderr)
    return EX_FAIL


def _cmd_request(args) -> int:
    params = {}
    for item in args.param:
        key, sep, value = item.partition("=")
        if not sep:
            print(f"--param expects K=V, got {item!r}", file=sys.stderr)
            return EX_USAGE
        params[key] = value
    body = {
        "logic": args.logic,
        "params": params,
        "user": {"zone": args.user_zone, "x": args.user_x, "y": args.user_y},
    }
    try:
        resp = requests.post(f"{args.server.rstrip('/')}/sessions", json=body, timeout=10)
    except requests.RequestException as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EX_TRANSPORT
    if resp.status_code == 201:
        print(resp.json()["session_id"])
        return EX_OK
    print(resp.text.strip(), file=sys.stderr)
    return EX_FAIL


def _cmd_logs(args) -> int:
    base = args.server.rstrip("/")
    try:
        if args.follow:
            resp = requests.get(
                f"{base}/sessions/{args.session}/stream", stream=True, timeout=(10, None)
            )
            if resp.status_code != 200:
                print(resp.text.strip(), file=sys.stderr)
                return EX_FAIL
            for line in resp.iter_lines():
                if line.startswith(b"data: "):
                    print(line[6:].decode("utf-8"))
            return EX_OK
        resp = requests.get(f"{base}/sessions/{args.session}", timeout=10)
    except requests.RequestException as exc:
        print(f"transport failure: {exc}", file=sys.stderr)
        return EX_TRANSPORT
    if resp.status_code != 200:
        print(resp.text.strip(), file=sys.stderr)
        return EX_FAIL
    session = resp.json()
    for entry in session.get("log", []):
        print(json.dumps(entry))
    return EX_OK


_COMMANDS = {
    "server": _cmd_server,
    "gateway": _cmd_gateway,
    "sim": _cmd_sim,
    "validate": _cmd_validate,
    "register": _cmd_register,
    "request": _cmd_request,
    "logs": _cmd_logs,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
