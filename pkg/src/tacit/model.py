"""Device metadata model.

Devices publish their own metadata: what they can do (capabilities), where
they are (location), and how to reach them (access spec). Everything here is
immutable; the registry swaps whole records rather than mutating in place.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Mapping
from urllib.parse import urlparse

from .errors import InvalidDescriptor

CAPABILITY_RE = re.compile(r"^[a-z][a-z0-9_]*(\.[a-z][a-z0-9_]*)*$")
IDENT_RE = re.compile(r"^[a-z][a-z0-9_]*$")

ACCESS_KINDS = ("rest", "soap", "native")


@dataclass(frozen=True)
class Location:
    """A zone label plus metric offsets (x east, y north) within it."""

    zone: str
    x: float
    y: float


@dataclass(frozen=True)
class AccessSpec:
    """How to invoke a device.

    ``rest`` and ``soap`` devices carry an absolute ``endpoint`` URL and are
    invoked directly. ``native`` devices are reached through a gateway:
    ``gateway_id`` names it, ``driver`` selects the protocol translation and
    ``native_address`` is the device's own host:port.
    """

    kind: str
    endpoint: str | None = None
    gateway_id: str | None = None
    driver: str | None = None
    native_address: str | None = None

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind in ("rest", "soap"):
            out["endpoint"] = self.endpoint
        else:
            out["gateway_id"] = self.gateway_id
            out["driver"] = self.driver
            out["native_address"] = self.native_address
        return out

    @classmethod
    def from_json(cls, data: Mapping) -> "AccessSpec":
        return cls(
            kind=data.get("kind", ""),
            endpoint=data.get("endpoint"),
            gateway_id=data.get("gateway_id"),
            driver=data.get("driver"),
            native_address=data.get("native_address"),
        )


@dataclass(frozen=True)
class DeviceDescriptor:
    """A device's self-published record."""

    id: str
    capabilities: frozenset[str]
    location: Location
    access: AccessSpec
    last_heartbeat: int  # ms since epoch
    extra: Mapping[str, str] = field(default_factory=dict)

    def with_heartbeat(self, at: int) -> "DeviceDescriptor":
        return replace(self, last_heartbeat=at)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "capabilities": sorted(self.capabilities),
            "location": {
                "zone": self.location.zone,
                "x": self.location.x,
                "y": self.location.y,
            },
            "access": self.access.to_json(),
            "last_heartbeat": self.last_heartbeat,
            "extra": dict(self.extra),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "DeviceDescriptor":
        loc = data.get("location") or {}
        return cls(
            id=data.get("id", ""),
            capabilities=frozenset(data.get("capabilities") or ()),
            location=Location(
                zone=loc.get("zone", ""),
                x=loc.get("x", 0.0),
                y=loc.get("y", 0.0),
            ),
            access=AccessSpec.from_json(data.get("access") or {}),
            last_heartbeat=data.get("last_heartbeat", 0),
            extra=dict(data.get("extra") or {}),
        )


@dataclass(frozen=True)
class RegistrySnapshot:
    """Point-in-time, immutable copy of the registry; devices sorted by id."""

    taken_at: int
    devices: tuple[DeviceDescriptor, ...]

    def get(self, device_id: str) -> DeviceDescriptor | None:
        for dev in self.devices:
            if dev.id == device_id:
                return dev
        return None


def _require(cond: bool, field_path: str, message: str) -> None:
    if not cond:
        raise InvalidDescriptor(field_path, message)


def validate_descriptor(desc: DeviceDescriptor, now: int | None = None) -> None:
    """Check every descriptor invariant, raising on the first violation.

    ``now`` enables the last_heartbeat <= current-time check; pass None to
    skip it (e.g. when loading a persisted file written in the past).
    """
    _require(bool(desc.id) and not desc.id.isspace(), "id", "must be non-empty")
    _require(bool(desc.capabilities), "capabilities", "must be non-empty")
    for cap in sorted(desc.capabilities):
        _require(
            isinstance(cap, str) and bool(CAPABILITY_RE.match(cap)),
            "capabilities",
            f"invalid capability name {cap!r}",
        )
    _require(
        bool(desc.location.zone) and not desc.location.zone.isspace(),
        "location.zone",
        "must be non-empty",
    )
    for axis in ("x", "y"):
        value = getattr(desc.location, axis)
        _require(
            isinstance(value, (int, float)) and math.isfinite(value),
            f"location.{axis}",
            "must be a finite number",
        )
    _validate_access(desc.access)
    _require(
        isinstance(desc.last_heartbeat, int) and desc.last_heartbeat >= 0,
        "last_heartbeat",
        "must be a non-negative integer (ms since epoch)",
    )
    if now is not None:
        _require(
            desc.last_heartbeat <= now,
            "last_heartbeat",
            f"must not be in the future ({desc.last_heartbeat} > {now})",
        )
    for key, value in desc.extra.items():
        _require(isinstance(key, str), "extra", "keys must be strings")
        _require(isinstance(value, str), f"extra.{key}", "values must be strings")


def _validate_access(access: AccessSpec) -> None:
    _require(access.kind in ACCESS_KINDS, "access.kind", f"must be one of {ACCESS_KINDS}")
    if access.kind in ("rest", "soap"):
        _require(access.endpoint is not None, "access.endpoint", "required for rest/soap")
        parsed = urlparse(access.endpoint or "")
        _require(
            parsed.scheme in ("http", "https") and bool(parsed.netloc),
            "access.endpoint",
            f"must be an absolute URL, got {access.endpoint!r}",
        )
        for name in ("gateway_id", "driver", "native_address"):
            _require(
                getattr(access, name) is None,
                f"access.{name}",
                f"must be absent for kind={access.kind}",
            )
    else:  # native
        _require(access.gateway_id is not None, "access.gateway_id", "required for native")
        _require(access.driver is not None, "access.driver", "required for native")
        _require(
            access.native_address is not None,
            "access.native_address",
            "required for native",
        )
        _require(
            ":" in (access.native_address or ""),
            "access.native_address",
            "must be host:port",
        )
        _require(access.endpoint is None, "access.endpoint", "must be absent for native")
