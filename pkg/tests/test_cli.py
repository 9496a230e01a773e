from __future__ import annotations

import json
from pathlib import Path

import pytest
import requests

from tacit.cli import EX_FAIL, EX_OK, EX_TRANSPORT, EX_USAGE, main
from tacit.facade import Config, FacadeServer
from tacit.httpkit import free_port

from conftest import make_descriptor, wait_until
from test_facade import RestDeviceStub, _minimal_logic, _now

BUNDLED = Path(__file__).parent.parent / "src" / "tacit" / "fixtures"


def test_validate_bundled_fixture_exit_zero(capsys):
    assert main(["validate", str(BUNDLED / "station_nav.tcl")]) == EX_OK


def test_validate_broken_logic_exit_one(tmp_path, capsys):
    broken = tmp_path / "broken.tcl"
    broken.write_text(
        'service s { role d requires capability visual.display on request() { ghost.show("x") } }'
    )
    assert main(["validate", str(broken)]) == EX_FAIL
    out = capsys.readouterr().out
    assert "error" in out
    assert "ghost" in out
    # findings printed with line:col
    assert ":1:" in out


def test_validate_parse_error_position(tmp_path, capsys):
    broken = tmp_path / "broken.tcl"
    broken.write_text("service s {")
    assert main(["validate", str(broken)]) == EX_FAIL
    assert ":1:12:" in capsys.readouterr().out


def test_request_against_stopped_server_exit_two(capsys):
    port = free_port()
    code = main(
        [
            "request",
            "--server",
            f"http://127.0.0.1:{port}",
            "--logic",
            "hello",
            "--param",
            "text=hi",
        ]
    )
    assert code == EX_TRANSPORT


def test_usage_error_exit_64():
    with pytest.raises(SystemExit) as err:
        main(["request"])  # missing required options
    assert err.value.code == EX_USAGE


def test_unknown_subcommand_exit_64():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == EX_USAGE


@pytest.fixture
def live_server(tmp_path):
    server = FacadeServer(Config(listen="127.0.0.1:0", registry_path=str(tmp_path / "r.json"))).start()
    stub = RestDeviceStub()
    yield server, stub
    server.stop()
    stub.stop()


def test_register_request_logs_flow(live_server, tmp_path, capsys):
    server, stub = live_server
    descriptor = make_descriptor("disp-1", "visual.display", endpoint=stub.url, heartbeat=0).to_json()
    descriptor["last_heartbeat"] = _now()
    desc_path = tmp_path / "disp.json"
    desc_path.write_text(json.dumps(descriptor))

    assert main(["register", "--server", server.url, str(desc_path)]) == EX_OK
    assert capsys.readouterr().out.strip() == "disp-1"

    resp = requests.post(f"{server.url}/logics", params={"name": "hello"}, data=_minimal_logic(), timeout=5)
    assert resp.status_code == 201

    code = main(
        [
            "request",
            "--server", server.url,
            "--logic", "hello",
            "--param", "text=hi",
            "--user-zone", "z",
            "--user-x", "0",
            "--user-y", "0",
        ]
    )
    assert code == EX_OK
    session_id = capsys.readouterr().out.strip()
    assert session_id.startswith("s-")

    wait_until(
        lambda: requests.get(f"{server.url}/sessions/{session_id}", timeout=5).json()["state"]
        == "completed",
        message="session completed",
    )
    assert main(["logs", "--server", server.url, session_id]) == EX_OK
    lines = [json.loads(line) for line in capsys.readouterr().out.strip().splitlines()]
    assert [e["kind"] for e in lines] == [
        "state_change",
        "instruction",
        "dispatch_result",
        "state_change",
    ]


def test_logs_follow_streams_until_completion(live_server, tmp_path, capsys):
    server, stub = live_server
    descriptor = make_descriptor("disp-1", "visual.display", endpoint=stub.url, heartbeat=0).to_json()
    descriptor["last_heartbeat"] = _now()
    requests.post(f"{server.url}/devices", json=descriptor, timeout=5)
    requests.post(f"{server.url}/logics", params={"name": "hello"}, data=_minimal_logic(), timeout=5)
    resp = requests.post(
        f"{server.url}/sessions",
        json={"logic": "hello", "params": {"text": "hi"}, "user": {"zone": "z", "x": 0, "y": 0}},
        timeout=5,
    )
    sid = resp.json()["session_id"]
    wait_until(
        lambda: requests.get(f"{server.url}/sessions/{sid}", timeout=5).json()["state"] == "completed",
        message="session completed",
    )
    assert main(["logs", "--server", server.url, sid, "--follow"]) == EX_OK
    lines = [json.loads(line) for line in capsys.readouterr().out.strip().splitlines()]
    assert lines[-1]["kind"] == "state_change"
    assert lines[-1]["state"] == "completed"


def test_register_bad_file_exit_one(tmp_path):
    missing = tmp_path / "nope.json"
    assert main(["register", "--server", "http://127.0.0.1:1", str(missing)]) == EX_FAIL
