from __future__ import annotations

import json
import socket
from pathlib import Path

import pytest
import requests

from tacit.devsim import GroupState, ScenarioSpec, SimDeviceSpec, World
from tacit.errors import InvalidHeading, PortInUse
from tacit.httpkit import HttpServer, Request, Response, Router, json_response
from tacit.model import Location

from conftest import wait_until

BUNDLED_SCENARIO = Path(__file__).parent.parent / "src" / "tacit" / "fixtures" / "station_nav.scenario.json"


class FakeCoordinationServer:
    """Captures registrations, heartbeats, events and session requests."""

    def __init__(self):
        self.devices: list[dict] = []
        self.events: list[dict] = []
        self.sessions: list[dict] = []
        router = Router()
        router.add("POST", "/devices", self._post_device)
        router.add("POST", "/devices/{id}/heartbeat", lambda req: Response(status=204))
        router.add("POST", "/events", self._post_event)
        router.add("POST", "/sessions", self._post_session)
        self._server = HttpServer("127.0.0.1", 0, router)
        self._server.start()

    def _post_device(self, request: Request) -> Response:
        self.devices.append(request.json())
        return json_response({"id": request.json()["id"]}, status=201)

    def _post_event(self, request: Request) -> Response:
        self.events.append(request.json())
        return json_response({"accepted": True})

    def _post_session(self, request: Request) -> Response:
        self.sessions.append(request.json())
        return json_response({"session_id": f"s-{len(self.sessions)}"}, status=201)

    @property
    def url(self) -> str:
        return self._server.url

    def stop(self):
        self._server.stop()


@pytest.fixture
def fake_server():
    server = FakeCoordinationServer()
    yield server
    server.stop()


def _scenario(devices, group_heading="east", gateway=None) -> ScenarioSpec:
    return ScenarioSpec(
        devices=devices,
        tables={"route": {"A1": "x"}},
        group=GroupState(x=0.0, y=0.0, heading=group_heading, tick_ms=50),
        gateway=gateway,
    )


def _device(device_id, kind, protocol, x=1.0, y=0.0, behavior="normal", listen="127.0.0.1:0"):
    return SimDeviceSpec(
        id=device_id,
        kind=kind,
        protocol=protocol,
        location=Location(zone="concourse", x=x, y=y),
        behavior=behavior,
        listen=listen,
    )


def test_spawn_bundled_fixture_registers_all_devices(fake_server):
    scenario = ScenarioSpec.from_file(str(BUNDLED_SCENARIO))
    world = World(scenario, fake_server.url).spawn()
    try:
        ids = {d["id"] for d in fake_server.devices}
        assert {
            "disp-rest-1",
            "disp-soap-1",
            "spk-rest-1",
            "spk-native-1",
            "cam-rest-1",
            "cam-native-1",
            "gw-1",
        } <= ids
        assert len(fake_server.devices) == 7  # 6 devices + the gateway
        native = next(d for d in fake_server.devices if d["id"] == "spk-native-1")
        assert native["access"]["kind"] == "native"
        assert native["access"]["gateway_id"] == "gw-1"
        assert native["access"]["driver"] == "lineproto"
    finally:
        world.close()


def test_duplicate_listen_port_rejected(fake_server):
    port = 39_121
    scenario = _scenario(
        [
            _device("a", "display", "rest", listen=f"127.0.0.1:{port}"),
            _device("b", "display", "rest", listen=f"127.0.0.1:{port}"),
        ]
    )
    with pytest.raises(PortInUse):
        World(scenario, fake_server.url).spawn()


def test_dead_device_registered_but_refuses_connections(fake_server):
    scenario = _scenario([_device("spk-dead", "speaker", "rest", behavior="dead")])
    world = World(scenario, fake_server.url).spawn()
    try:
        (desc,) = [d for d in fake_server.devices if d["id"] == "spk-dead"]
        endpoint = desc["access"]["endpoint"]
        with pytest.raises(requests.RequestException):
            requests.post(f"{endpoint}/actions/announce", json={}, timeout=1)
    finally:
        world.close()


def test_tick_advances_group_and_emits_movement(fake_server):
    scenario = _scenario([_device("cam-1", "camera", "rest", x=5.0)])
    world = World(scenario, fake_server.url).spawn()
    try:
        emitted = world.tick()
        assert world.group.x == 1.0 and world.group.y == 0.0
        assert emitted == [
            {"device_id": "cam-1", "event_type": "movement", "payload": {"direction": "east"}}
        ]
        assert fake_server.events[-1]["payload"] == {"direction": "east"}
    finally:
        world.close()


def test_out_of_range_camera_emits_nothing(fake_server):
    scenario = _scenario([_device("cam-1", "camera", "rest", x=500.0)])
    world = World(scenario, fake_server.url).spawn()
    try:
        assert world.tick() == []
        assert fake_server.events == []
    finally:
        world.close()


def test_steer_changes_next_tick(fake_server):
    scenario = _scenario([_device("cam-1", "camera", "rest", x=2.0)])
    world = World(scenario, fake_server.url).spawn()
    try:
        world.steer("north")
        emitted = world.tick()
        assert emitted[0]["payload"] == {"direction": "north"}
        assert (world.group.x, world.group.y) == (0.0, 1.0)
    finally:
        world.close()


def test_steer_invalid_heading(fake_server):
    scenario = _scenario([])
    world = World(scenario, fake_server.url).spawn()
    try:
        with pytest.raises(InvalidHeading):
            world.steer("up")
    finally:
        world.close()


def test_two_steers_last_one_wins(fake_server):
    scenario = _scenario([_device("cam-1", "camera", "rest", x=2.0)])
    world = World(scenario, fake_server.url).spawn()
    try:
        world.steer("south")
        world.steer("west")
        emitted = world.tick()
        assert emitted[0]["payload"] == {"direction": "west"}
    finally:
        world.close()


def test_fresh_world_capture_empty(fake_server):
    scenario = _scenario([_device("disp-1", "display", "rest")])
    world = World(scenario, fake_server.url).spawn()
    try:
        assert world.capture() == []
    finally:
        world.close()


def test_rest_display_records_capture_and_state(fake_server):
    scenario = _scenario([_device("disp-1", "display", "rest")])
    world = World(scenario, fake_server.url).spawn()
    try:
        (desc,) = fake_server.devices
        endpoint = desc["access"]["endpoint"]
        resp = requests.post(
            f"{endpoint}/actions/show",
            json={"session": "s-1", "correlation": "c-1", "args": {"text": "hello"}},
            timeout=5,
        )
        assert resp.json() == {"result": "ok"}
        entries = world.capture()
        assert len(entries) == 1
        assert entries[0].device_id == "disp-1"
        assert entries[0].transport == "rest"
        assert entries[0].correlation == "c-1"
        assert world.device_state("disp-1")["last_text"] == "hello"
    finally:
        world.close()


def test_busy_device_reports_busy(fake_server):
    scenario = _scenario([_device("spk-1", "speaker", "rest", behavior="busy")])
    world = World(scenario, fake_server.url).spawn()
    try:
        (desc,) = fake_server.devices
        resp = requests.post(
            f"{desc['access']['endpoint']}/actions/announce",
            json={"session": "s", "correlation": "c", "args": {"text": "x"}},
            timeout=5,
        )
        assert resp.json()["error"]["code"] == "BUSY"
    finally:
        world.close()


def test_soap_display_parses_envelope(fake_server):
    scenario = _scenario([_device("disp-soap", "display", "soap")])
    world = World(scenario, fake_server.url).spawn()
    try:
        (desc,) = fake_server.devices
        body = (
            '<Envelope><Body><show session="s-1" correlation="c-9">'
            '<arg name="text">Platform 1</arg></show></Body></Envelope>'
        )
        resp = requests.post(desc["access"]["endpoint"], data=body.encode(), timeout=5)
        assert "<ok/>" in resp.text
        assert world.device_state("disp-soap")["last_text"] == "Platform 1"
        (entry,) = world.capture()
        assert entry.transport == "soap"
        assert entry.correlation == "c-9"
    finally:
        world.close()


def test_native_speaker_line_protocol(fake_server):
    scenario = _scenario([_device("spk-n", "speaker", "native")])
    world = World(scenario, fake_server.url).spawn()
    try:
        (desc,) = [d for d in fake_server.devices if d["id"] == "spk-n"]
        host, port = desc["access"]["native_address"].rsplit(":", 1)
        with socket.create_connection((host, int(port)), timeout=5) as sock:
            sock.sendall(b"CMD announce text=R28gbGVmdA==\n")
            reply = sock.makefile("rb").readline()
        assert reply == b"OK\n"
        assert world.device_state("spk-n")["announcements"] == ["Go left"]
        (entry,) = world.capture()
        assert entry.transport == "native"
        assert entry.detail == "CMD announce text=R28gbGVmdA=="
    finally:
        world.close()


def test_native_camera_without_connection_emits_nothing(fake_server):
    scenario = _scenario([_device("cam-n", "camera", "native", x=2.0)])
    world = World(scenario, fake_server.url).spawn()
    try:
        assert world.tick() == []
    finally:
        world.close()


def test_controller_endpoints(fake_server):
    scenario = _scenario([_device("disp-1", "display", "rest")])
    world = World(scenario, fake_server.url).spawn()
    try:
        base = world.controller_url
        resp = requests.post(f"{base}/sim/steer", json={"heading": "north"}, timeout=5)
        assert resp.status_code == 200
        assert world.group.heading == "north"
        resp = requests.post(f"{base}/sim/steer", json={"heading": "up"}, timeout=5)
        assert resp.status_code == 400
        resp = requests.get(f"{base}/sim/capture", timeout=5)
        assert resp.json() == {"entries": []}
        resp = requests.get(f"{base}/sim/devices/disp-1/state", timeout=5)
        assert resp.json()["last_text"] is None
        assert requests.get(f"{base}/sim/devices/nope/state", timeout=5).status_code == 404
    finally:
        world.close()


def _normalized_log(view: dict) -> bytes:
    entries = [{k: v for k, v in e.items() if k != "at"} for e in view["log"]]
    return json.dumps(entries, sort_keys=True).encode("utf-8")


def test_scripted_scenario_is_deterministic(tmp_path):
    """Fixed script + fixed tick schedule -> identical session log bytes
    across runs, after timestamp normalization."""
    from tacit.facade import Config, FacadeServer
    from tacit.httpkit import free_port

    scenario_json = json.loads(BUNDLED_SCENARIO.read_text())
    # identical world configuration across runs: pin every listen port once
    for device in scenario_json["devices"]:
        device["listen"] = f"127.0.0.1:{free_port()}"
    scenario_json["gateway"]["listen"] = f"127.0.0.1:{free_port()}"
    logs = []
    for run in range(2):
        workdir = tmp_path / f"run{run}"
        workdir.mkdir()
        tables = workdir / "tables.json"
        tables.write_text(json.dumps(scenario_json["tables"]))
        facade = FacadeServer(
            Config(
                listen="127.0.0.1:0",
                registry_path=str(workdir / "registry.json"),
                tables_path=str(tables),
            )
        ).start()
        scenario = ScenarioSpec.from_json(scenario_json)
        # a single camera keeps per-tick event order trivially fixed
        scenario.devices = [d for d in scenario.devices if d.id != "cam-native-1"]
        world = World(scenario, facade.url).spawn()
        try:
            logic = (BUNDLED_SCENARIO.parent / "station_nav.tcl").read_text()
            resp = requests.post(
                f"{facade.url}/logics", params={"name": "station_nav"}, data=logic, timeout=5
            )
            assert resp.status_code == 201
            world.run_script(ticks=5)
            (sid,) = world.script_sessions

            def view():
                return requests.get(f"{facade.url}/sessions/{sid}", timeout=5).json()

            # quiescence: log length stable for a few polls
            stable = {"length": -1, "count": 0}

            def settled():
                length = len(view()["log"])
                if length == stable["length"]:
                    stable["count"] += 1
                else:
                    stable["length"], stable["count"] = length, 0
                return stable["count"] >= 5
            wait_until(settled, timeout=10.0, interval=0.05, message="log quiescent")
            logs.append(_normalized_log(view()))
        finally:
            world.close()
            facade.stop()
    assert logs[0] == logs[1]
    assert b"Wrong way" in logs[0]


def test_script_actions_run_on_their_tick(fake_server):
    scenario = ScenarioSpec(
        devices=[_device("cam-1", "camera", "rest", x=2.0)],
        tables={},
        group=GroupState(x=0.0, y=0.0, heading="east", tick_ms=50),
        script=[
            {"tick": 0, "action": "request", "logic": "station_nav", "params": {"destination": "A1"}},
            {"tick": 1, "action": "steer", "heading": "north"},
        ],
    )
    world = World(scenario, fake_server.url).spawn()
    try:
        world.run_script(ticks=2)
        assert len(fake_server.sessions) == 1
        assert fake_server.sessions[0]["logic"] == "station_nav"
        assert world.group.heading == "north"
        assert world.script_sessions == ["s-1"]
    finally:
        world.close()
