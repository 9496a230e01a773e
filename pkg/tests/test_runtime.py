from __future__ import annotations

import threading

import pytest

from tacit.dsl import parse
from tacit.errors import TableMiss, UnknownDevice, UnknownLogic
from tacit.model import Location
from tacit.registry import DeviceRegistry
from tacit.runtime import (
    DispatchResult,
    SessionEngine,
    canonical_value,
    eval_condition,
    evaluate,
)

from conftest import make_descriptor, wait_until

TABLES = {
    "route": {"A1": "Platform 4 EAST"},
    "expected_direction": {"A1": "east"},
    "alert_text": {"A1": "Wrong way: go EAST"},
}

STATION_NAV = """
service station_nav {
  role disp requires capability visual.display near user within 80 m
  role spk requires capability audio.speaker near user within 80 m
  role cam requires capability sensor.camera near user

  on request(destination) {
    disp.show(route(destination))
    spk.announce(route(destination))
    cam.monitor(destination) -> movement
  }

  on movement(direction) when direction != expected_direction(destination) {
    spk.announce(alert_text(destination))
  }
}
"""

USER = Location(zone="station", x=0.0, y=0.0)


class FakeDispatcher:
    """Scripted dispatcher: outcome per device id, records every call."""

    def __init__(self):
        self.outcomes: dict[str, tuple[str, str | None]] = {}
        self.calls: list[dict] = []
        self._lock = threading.Lock()

    def set_outcome(self, device_id: str, outcome: str, code: str | None = None):
        self.outcomes[device_id] = (outcome, code)

    def __call__(self, instruction, route, timeout_ms, max_attempts, *, device_id):
        outcome, code = self.outcomes.get(device_id, ("ok", None))
        attempts = max_attempts if outcome in ("timeout", "transport_error") else 1
        with self._lock:
            self.calls.append(
                {
                    "device_id": device_id,
                    "verb": instruction.verb,
                    "args": instruction.wire_args(),
                    "route": route,
                    "correlation": instruction.correlation_id,
                }
            )
        return DispatchResult(
            correlation_id=instruction.correlation_id,
            outcome=outcome,
            attempts=attempts,
            route_used=route,
            code=code,
            message=None if outcome == "ok" else "scripted",
        )


def _engine(fixed_clock, dispatcher=None, devices=(), tables=TABLES, **knobs):
    registry = DeviceRegistry(clock=fixed_clock)
    for dev in devices:
        registry.register(dev)
    dispatcher = dispatcher or FakeDispatcher()
    engine = SessionEngine(
        registry,
        dispatcher,
        tables=tables,
        clock=fixed_clock,
        idle_timeout_ms=knobs.pop("idle_timeout_ms", 600_000),
        **knobs,
    )
    return engine, dispatcher, registry


def _station_devices(now):
    return (
        make_descriptor("disp-1", "visual.display", x=3.0, heartbeat=now),
        make_descriptor("spk-1", "audio.speaker", x=4.0, heartbeat=now),
        make_descriptor("cam-1", "sensor.camera", x=2.0, heartbeat=now),
    )


# -- evaluate -----------------------------------------------------------------


def test_evaluate_string_literal():
    from tacit.dsl import StringLit

    assert evaluate(StringLit("go"), {}, {}) == "go"


def test_evaluate_table_lookup():
    from tacit.dsl import TableCall, VarRef

    expr = TableCall("route", (VarRef("destination"),))
    assert evaluate(expr, {"destination": "A1"}, TABLES) == "Platform 4 EAST"


def test_evaluate_table_miss():
    from tacit.dsl import StringLit, TableCall

    expr = TableCall("expected_direction", (StringLit("ZZ"),))
    with pytest.raises(TableMiss) as err:
        evaluate(expr, {}, TABLES)
    assert err.value.function == "expected_direction"
    assert err.value.key == "ZZ"


def test_canonical_number_formatting():
    assert canonical_value(5.0) == "5"
    assert canonical_value(2.5) == "2.5"
    assert canonical_value("x") == "x"


def test_guard_compares_canonical_forms():
    from tacit.dsl import Condition, NumberLit, VarRef

    cond = Condition(left=VarRef("n"), op="==", right=NumberLit(5.0))
    assert eval_condition(cond, {"n": "5"}, {})


# -- session start ----------------------------------------------------------------


def test_station_nav_session_flow(fixed_clock):
    engine, dispatcher, _ = _engine(fixed_clock, devices=_station_devices(fixed_clock()))
    engine.add_logic("station_nav", parse(STATION_NAV))
    sid = engine.start_session("station_nav", {"destination": "A1"}, USER)
    session = engine.get_session(sid)
    assert session.drain()
    log = session.log_entries()
    instructions = [e for e in log if e["kind"] == "instruction"]
    assert [(e["role"], e["verb"]) for e in instructions] == [
        ("disp", "show"),
        ("spk", "announce"),
        ("cam", "monitor"),
    ]
    assert instructions[0]["args"] == {"text": "Platform 4 EAST"}
    assert instructions[2]["args"] == {"target": "A1"}
    results = [e for e in log if e["kind"] == "dispatch_result"]
    assert [r["outcome"] for r in results] == ["ok", "ok", "ok"]
    assert session.state == "running"
    assert session.subscription_pairs() == {("movement", "cam-1")}
    engine.shutdown()


def test_instruction_then_result_ordering(fixed_clock):
    engine, _, _ = _engine(fixed_clock, devices=_station_devices(fixed_clock()))
    engine.add_logic("station_nav", parse(STATION_NAV))
    sid = engine.start_session("station_nav", {"destination": "A1"}, USER)
    session = engine.get_session(sid)
    session.drain()
    log = session.log_entries()
    seen: dict[str, list[str]] = {}
    for entry in log:
        if entry["kind"] in ("instruction", "dispatch_result"):
            seen.setdefault(entry["correlation"], []).append(entry["kind"])
    assert all(kinds == ["instruction", "dispatch_result"] for kinds in seen.values())
    engine.shutdown()


def test_empty_logic_completes_with_only_state_changes(fixed_clock):
    engine, _, _ = _engine(fixed_clock)
    engine.add_logic("noop", parse("service noop { on request() { } }"))
    sid = engine.start_session("noop", {}, USER)
    session = engine.get_session(sid)
    wait_until(lambda: session.state == "completed", message="session completed")
    assert all(e["kind"] == "state_change" for e in session.log_entries())


def test_unknown_logic(fixed_clock):
    engine, _, _ = _engine(fixed_clock)
    with pytest.raises(UnknownLogic):
        engine.start_session("nope", {}, USER)


def test_plan_failure_marks_session_failed(fixed_clock):
    devices = (
        make_descriptor("disp-1", "visual.display", x=3.0, heartbeat=fixed_clock()),
        make_descriptor("cam-1", "sensor.camera", x=2.0, heartbeat=fixed_clock()),
    )  # no speakers
    engine, dispatcher, _ = _engine(fixed_clock, devices=devices)
    engine.add_logic("station_nav", parse(STATION_NAV))
    sid = engine.start_session("station_nav", {"destination": "A1"}, USER)
    session = engine.get_session(sid)
    assert session.state == "failed"
    assert "ROLE_UNSATISFIED" in session.reason
    assert "spk" in session.reason
    assert dispatcher.calls == []


# -- events ---------------------------------------------------------------------


def _running_station_session(fixed_clock, dispatcher=None):
    engine, dispatcher, registry = _engine(
        fixed_clock, dispatcher=dispatcher, devices=_station_devices(fixed_clock())
    )
    engine.add_logic("station_nav", parse(STATION_NAV))
    sid = engine.start_session("station_nav", {"destination": "A1"}, USER)
    session = engine.get_session(sid)
    session.drain()
    return engine, dispatcher, session


def test_wrong_direction_triggers_alert(fixed_clock):
    engine, dispatcher, session = _running_station_session(fixed_clock)
    engine.ingest_event("cam-1", "movement", {"direction": "north"})
    session.drain()
    alerts = [c for c in dispatcher.calls if c["args"].get("text") == "Wrong way: go EAST"]
    assert len(alerts) == 1
    assert alerts[0]["device_id"] == "spk-1"
    engine.shutdown()


def test_expected_direction_no_alert(fixed_clock):
    engine, dispatcher, session = _running_station_session(fixed_clock)
    before = len(dispatcher.calls)
    engine.ingest_event("cam-1", "movement", {"direction": "east"})
    session.drain()
    assert len(dispatcher.calls) == before
    # the event itself is still logged
    assert any(e["kind"] == "event" for e in session.log_entries())
    engine.shutdown()


def test_unsubscribed_event_dropped_and_counted(fixed_clock):
    engine, dispatcher, session = _running_station_session(fixed_clock)
    engine._registry.register(make_descriptor("cam-9", "sensor.camera", heartbeat=fixed_clock()))
    before_log = len(session.log_entries())
    engine.ingest_event("cam-9", "movement", {"direction": "north"})
    assert engine.dropped_events == 1
    assert len(session.log_entries()) == before_log
    engine.shutdown()


def test_event_from_unknown_device_rejected(fixed_clock):
    engine, _, session = _running_station_session(fixed_clock)
    with pytest.raises(UnknownDevice):
        engine.ingest_event("ghost", "movement", {"direction": "north"})
    engine.shutdown()


def test_table_miss_in_guard_fails_handler_only(fixed_clock):
    engine, dispatcher, session = _running_station_session(fixed_clock)
    engine.start_session  # session running; send event with unknown destination key
    session.params["destination"] = "ZZ"  # simulate unknown key for the guard lookup
    engine.ingest_event("cam-1", "movement", {"direction": "north"})
    session.drain()
    errors = [e for e in session.log_entries() if e["kind"] == "error"]
    assert any(e["code"] == "TABLE_MISS" for e in errors)
    assert session.state == "running"
    engine.shutdown()


def test_event_payload_missing_param_skips_handler(fixed_clock):
    engine, dispatcher, session = _running_station_session(fixed_clock)
    before = len(dispatcher.calls)
    engine.ingest_event("cam-1", "movement", {"speed": "fast"})  # no "direction" key
    session.drain()
    errors = [e for e in session.log_entries() if e["kind"] == "error"]
    assert any(e["code"] == "UNBOUND_PARAM" for e in errors)
    assert len(dispatcher.calls) == before
    assert session.state == "running"
    engine.shutdown()


def test_events_processed_in_arrival_order(fixed_clock):
    engine, dispatcher, session = _running_station_session(fixed_clock)
    for direction in ("north", "south", "west"):
        engine.ingest_event("cam-1", "movement", {"direction": direction})
    session.drain()
    events = [e for e in session.log_entries() if e["kind"] == "event"]
    assert [e["payload"]["direction"] for e in events] == ["north", "south", "west"]
    engine.shutdown()


# -- failover ----------------------------------------------------------------------


def test_failover_to_substitute_speaker(fixed_clock):
    now = fixed_clock()
    devices = _station_devices(now) + (
        make_descriptor("spk-2", "audio.speaker", x=9.0, heartbeat=now),
    )
    dispatcher = FakeDispatcher()
    dispatcher.set_outcome("spk-1", "transport_error")
    engine, _, _ = _engine(fixed_clock, dispatcher=dispatcher, devices=devices)
    engine.add_logic("station_nav", parse(STATION_NAV))
    sid = engine.start_session("station_nav", {"destination": "A1"}, USER)
    session = engine.get_session(sid)
    session.drain()
    announce_calls = [c for c in dispatcher.calls if c["verb"] == "announce"]
    assert [c["device_id"] for c in announce_calls] == ["spk-1", "spk-2"]
    assert session.plan.bindings["spk"].device_id == "spk-2"
    assert session.state == "running"
    results = [e for e in session.log_entries() if e["kind"] == "dispatch_result"]
    outcomes = [(r["device_id"], r["outcome"]) for r in results]
    assert ("spk-1", "transport_error") in outcomes
    assert ("spk-2", "ok") in outcomes
    engine.shutdown()


def test_failover_exhausted_fails_session(fixed_clock):
    dispatcher = FakeDispatcher()
    dispatcher.set_outcome("spk-1", "timeout")
    engine, _, _ = _engine(
        fixed_clock, dispatcher=dispatcher, devices=_station_devices(fixed_clock())
    )
    engine.add_logic("station_nav", parse(STATION_NAV))
    sid = engine.start_session("station_nav", {"destination": "A1"}, USER)
    session = engine.get_session(sid)
    wait_until(lambda: session.state == "failed", message="session failed")
    assert "ROLE_UNSATISFIED" in session.reason
    # the monitor statement after the failed announce never dispatched
    assert not any(c["verb"] == "monitor" for c in dispatcher.calls)


def test_device_error_never_fails_over(fixed_clock):
    dispatcher = FakeDispatcher()
    dispatcher.set_outcome("spk-1", "device_error", code="BUSY")
    engine, _, _ = _engine(
        fixed_clock, dispatcher=dispatcher, devices=_station_devices(fixed_clock())
    )
    engine.add_logic("station_nav", parse(STATION_NAV))
    sid = engine.start_session("station_nav", {"destination": "A1"}, USER)
    session = engine.get_session(sid)
    session.drain()
    announce_calls = [c for c in dispatcher.calls if c["verb"] == "announce"]
    assert [c["device_id"] for c in announce_calls] == ["spk-1"]
    # handler continued to the next statement
    assert any(c["verb"] == "monitor" for c in dispatcher.calls)
    assert session.state == "running"
    engine.shutdown()


def test_failover_rewires_subscription(fixed_clock):
    now = fixed_clock()
    devices = _station_devices(now) + (
        make_descriptor("cam-2", "sensor.camera", x=9.0, heartbeat=now),
    )
    dispatcher = FakeDispatcher()
    dispatcher.set_outcome("cam-1", "transport_error")
    engine, _, _ = _engine(fixed_clock, dispatcher=dispatcher, devices=devices)
    engine.add_logic("station_nav", parse(STATION_NAV))
    sid = engine.start_session("station_nav", {"destination": "A1"}, USER)
    session = engine.get_session(sid)
    session.drain()
    assert session.subscription_pairs() == {("movement", "cam-2")}
    engine.shutdown()


# -- invariants ------------------------------------------------------------------------


def test_exactly_once_correlation_ids(fixed_clock):
    now = fixed_clock()
    devices = _station_devices(now) + (
        make_descriptor("spk-2", "audio.speaker", x=9.0, heartbeat=now),
    )
    dispatcher = FakeDispatcher()
    dispatcher.set_outcome("spk-1", "transport_error")
    engine, _, _ = _engine(fixed_clock, dispatcher=dispatcher, devices=devices)
    engine.add_logic("station_nav", parse(STATION_NAV))
    sid = engine.start_session("station_nav", {"destination": "A1"}, USER)
    session = engine.get_session(sid)
    session.drain()
    engine.ingest_event("cam-1", "movement", {"direction": "north"})
    session.drain()
    log = session.log_entries()
    instr = [e["correlation"] for e in log if e["kind"] == "instruction"]
    results = [e["correlation"] for e in log if e["kind"] == "dispatch_result"]
    assert len(instr) == len(set(instr))
    assert sorted(instr) == sorted(results)
    engine.shutdown()


def test_device_independence_across_inventories(fixed_clock):
    """Same logic + same event schedule over disjoint inventories -> same
    ordered (role, verb, args) sequence; only devices and routes differ."""
    now = fixed_clock()
    inventory_a = (
        make_descriptor("ra-disp", "visual.display", kind="rest", x=1.0, heartbeat=now),
        make_descriptor("ra-spk", "audio.speaker", kind="rest", x=2.0, heartbeat=now),
        make_descriptor("ra-cam", "sensor.camera", kind="rest", x=3.0, heartbeat=now),
    )
    inventory_b = (
        make_descriptor("nb-disp", "visual.display", kind="native", x=7.0, heartbeat=now),
        make_descriptor("nb-spk", "audio.speaker", kind="native", x=6.0, heartbeat=now),
        make_descriptor("nb-cam", "sensor.camera", kind="native", x=5.0, heartbeat=now),
    )
    sequences = []
    for inventory, cam in ((inventory_a, "ra-cam"), (inventory_b, "nb-cam")):
        engine, _, _ = _engine(fixed_clock, devices=inventory)
        engine.add_logic("station_nav", parse(STATION_NAV))
        sid = engine.start_session("station_nav", {"destination": "A1"}, USER)
        session = engine.get_session(sid)
        session.drain()
        for direction in ("east", "north", "north"):
            engine.ingest_event(cam, "movement", {"direction": direction})
        session.drain()
        sequences.append(
            [
                (e["role"], e["verb"], tuple(sorted(e["args"].items())))
                for e in session.log_entries()
                if e["kind"] == "instruction"
            ]
        )
        engine.shutdown()
    assert sequences[0] == sequences[1]
    assert sequences[0][:3] == [
        ("disp", "show", (("text", "Platform 4 EAST"),)),
        ("spk", "announce", (("text", "Platform 4 EAST"),)),
        ("cam", "monitor", (("target", "A1"),)),
    ]
    # two wrong-direction events -> two alerts
    assert len(sequences[0]) == 5


def test_idle_timeout_completes_session(fixed_clock):
    engine, _, _ = _engine(
        fixed_clock, devices=_station_devices(fixed_clock()), idle_timeout_ms=80
    )
    engine.add_logic("station_nav", parse(STATION_NAV))
    sid = engine.start_session("station_nav", {"destination": "A1"}, USER)
    session = engine.get_session(sid)
    wait_until(lambda: session.state == "completed", timeout=3.0, message="idle completion")
    assert session.reason == "idle timeout"


def test_sessions_isolated(fixed_clock):
    engine, dispatcher, _ = _engine(fixed_clock, devices=_station_devices(fixed_clock()))
    engine.add_logic("station_nav", parse(STATION_NAV))
    sid1 = engine.start_session("station_nav", {"destination": "A1"}, USER)
    sid2 = engine.start_session("station_nav", {"destination": "A1"}, USER)
    s1, s2 = engine.get_session(sid1), engine.get_session(sid2)
    s1.drain(), s2.drain()
    engine.ingest_event("cam-1", "movement", {"direction": "north"})
    s1.drain(), s2.drain()
    # both sessions subscribed to the same camera: each logs the event once
    for session in (s1, s2):
        events = [e for e in session.log_entries() if e["kind"] == "event"]
        assert len(events) == 1
    engine.shutdown()
