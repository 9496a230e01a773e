from __future__ import annotations

import time

import pytest

from tacit.model import AccessSpec, DeviceDescriptor, Location


def wait_until(predicate, timeout: float = 5.0, interval: float = 0.01, message: str = "condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    raise AssertionError(f"timed out waiting for {message}")


def make_descriptor(
    device_id: str = "disp-1",
    capability: str = "visual.display",
    *,
    kind: str = "rest",
    zone: str = "concourse",
    x: float = 0.0,
    y: float = 0.0,
    heartbeat: int = 1_000,
    endpoint: str | None = None,
    gateway_id: str = "gw-1",
    native_address: str = "127.0.0.1:7001",
) -> DeviceDescriptor:
    if kind in ("rest", "soap"):
        access = AccessSpec(kind=kind, endpoint=endpoint or f"http://{device_id}.local:80")
    else:
        access = AccessSpec(
            kind="native",
            gateway_id=gateway_id,
            driver="lineproto",
            native_address=native_address,
        )
    return DeviceDescriptor(
        id=device_id,
        capabilities=frozenset({capability}),
        location=Location(zone=zone, x=x, y=y),
        access=access,
        last_heartbeat=heartbeat,
    )


@pytest.fixture
def fixed_clock():
    """A controllable millisecond clock."""

    class Clock:
        def __init__(self):
            self.now = 1_000_000

        def __call__(self) -> int:
            return self.now

        def advance(self, ms: int) -> None:
            self.now += ms

    return Clock()
