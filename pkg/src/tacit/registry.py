"""Device registry: stores published metadata, tracks liveness, answers queries.

Thread-safety: a single lock serializes writes; reads copy references to
immutable descriptors, so snapshots handed to planners can never tear. When
constructed with a path the registry persists after every mutation and
reloads on startup.
"""

from __future__ import annotations

import json
import os
import threading
import time
from typing import Callable, Iterable

from .errors import InvalidDescriptor, StaleTimestamp, StoreIOError, UnknownDevice
from .model import (
    CAPABILITY_RE,
    DeviceDescriptor,
    RegistrySnapshot,
    validate_descriptor,
)

DEFAULT_TTL_MS = 30_000


def _wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


class DeviceRegistry:
    def __init__(
        self,
        path: str | None = None,
        *,
        clock: Callable[[], int] | None = None,
    ):
        self._path = path
        self._clock = clock or _wall_clock_ms
        self._lock = threading.RLock()
        self._devices: dict[str, DeviceDescriptor] = {}
        if path and os.path.exists(path):
            self.load_from(path)

    # -- mutations ---------------------------------------------------------

    def register(self, descriptor: DeviceDescriptor) -> str:
        """Upsert a descriptor by id; persisted before returning.

        Re-registration replaces the record. The stored heartbeat never
        moves backwards: an older incoming timestamp keeps the newer one.
        """
        validate_descriptor(descriptor, now=self._clock())
        with self._lock:
            existing = self._devices.get(descriptor.id)
            if existing is not None and existing.last_heartbeat > descriptor.last_heartbeat:
                descriptor = descriptor.with_heartbeat(existing.last_heartbeat)
            self._devices[descriptor.id] = descriptor
            self._persist_locked()
        return descriptor.id

    def heartbeat(self, device_id: str, at: int) -> None:
        with self._lock:
            existing = self._devices.get(device_id)
            if existing is None:
                raise UnknownDevice(device_id)
            if at < existing.last_heartbeat:
                raise StaleTimestamp(device_id, at, existing.last_heartbeat)
            self._devices[device_id] = existing.with_heartbeat(at)
            self._persist_locked()

    def delete(self, device_id: str) -> None:
        with self._lock:
            if device_id not in self._devices:
                raise UnknownDevice(device_id)
            del self._devices[device_id]
            self._persist_locked()

    # -- queries -----------------------------------------------------------

    def get(self, device_id: str) -> DeviceDescriptor | None:
        with self._lock:
            return self._devices.get(device_id)

    def query(
        self,
        capability: str,
        now: int,
        ttl_ms: int,
        zone: str | None = None,
    ) -> list[DeviceDescriptor]:
        """Devices with the capability, alive within ttl, optionally zone-bound.

        Capability matching is exact-string on the dotted name; there is no
        hierarchy (``visual`` does not match ``visual.display``).
        """
        if not CAPABILITY_RE.match(capability):
            raise InvalidDescriptor("capability", f"invalid capability name {capability!r}")
        with self._lock:
            devices = list(self._devices.values())
        hits = [
            d
            for d in devices
            if capability in d.capabilities
            and (now - d.last_heartbeat) <= ttl_ms
            and (zone is None or d.location.zone == zone)
        ]
        hits.sort(key=lambda d: d.id)
        return hits

    def snapshot(self, now: int | None = None) -> RegistrySnapshot:
        if now is None:
            now = self._clock()
        with self._lock:
            devices = tuple(sorted(self._devices.values(), key=lambda d: d.id))
        return RegistrySnapshot(taken_at=now, devices=devices)

    def device_count(self) -> int:
        with self._lock:
            return len(self._devices)

    # -- persistence -------------------------------------------------------

    def persist_to(self, path: str) -> None:
        with self._lock:
            devices = sorted(self._devices.values(), key=lambda d: d.id)
            self._write_file(path, devices)

    def load_from(self, path: str) -> None:
        """Replace in-memory contents with the device set persisted at path."""
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, ValueError) as exc:
            raise StoreIOError(path, exc) from exc
        if not isinstance(data, dict) or not isinstance(data.get("devices"), list):
            raise StoreIOError(path, "expected an object with a 'devices' array")
        loaded: dict[str, DeviceDescriptor] = {}
        for entry in data["devices"]:
            desc = DeviceDescriptor.from_json(entry)
            validate_descriptor(desc)
            loaded[desc.id] = desc
        with self._lock:
            self._devices = loaded

    def _persist_locked(self) -> None:
        if self._path is None:
            return
        devices = sorted(self._devices.values(), key=lambda d: d.id)
        self._write_file(self._path, devices)

    @staticmethod
    def _write_file(path: str, devices: Iterable[DeviceDescriptor]) -> None:
        payload = {"devices": [d.to_json() for d in devices]}
        tmp = f"{path}.tmp"
        try:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, indent=2, sort_keys=True)
                fh.write("\n")
            os.replace(tmp, path)
        except OSError as exc:
            raise StoreIOError(path, exc) from exc
