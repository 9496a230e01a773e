"""Error types shared across the middleware.

Every error carries a stable machine-readable ``code`` so HTTP layers and
logs can surface it without string matching on messages.
"""

from __future__ import annotations


class TacitError(Exception):
    """Base class for all middleware errors."""

    code = "ERROR"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def to_json(self) -> dict:
        return {"code": self.code, "message": self.message}


class InvalidDescriptor(TacitError):
    """A device descriptor violated an invariant; ``field`` names the first offender."""

    code = "INVALID_DESCRIPTOR"

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field

    def to_json(self) -> dict:
        return {"code": self.code, "message": self.message, "field": self.field}


class UnknownDevice(TacitError):
    code = "UNKNOWN_DEVICE"

    def __init__(self, device_id: str):
        super().__init__(f"no device registered with id {device_id!r}")
        self.device_id = device_id


class StaleTimestamp(TacitError):
    code = "STALE_TIMESTAMP"

    def __init__(self, device_id: str, at: int, stored: int):
        super().__init__(
            f"heartbeat for {device_id!r} at {at} is older than stored {stored}"
        )
        self.device_id = device_id
        self.at = at
        self.stored = stored


class StoreIOError(TacitError):
    code = "IO_ERROR"

    def __init__(self, path: str, cause: BaseException | str):
        super().__init__(f"{path}: {cause}")
        self.path = path
        self.cause = cause


class RoleUnsatisfied(TacitError):
    """No eligible device exists for a declared role."""

    code = "ROLE_UNSATISFIED"

    def __init__(self, role: str):
        super().__init__(f"no eligible device for role {role!r}")
        self.role = role


class UnknownLogic(TacitError):
    code = "UNKNOWN_LOGIC"

    def __init__(self, name: str):
        super().__init__(f"no coordination logic named {name!r}")
        self.name = name


class TableMiss(TacitError):
    """A table function was called with a key it has no entry for."""

    code = "TABLE_MISS"

    def __init__(self, function: str, key: str):
        super().__init__(f"table function {function!r} has no entry for key {key!r}")
        self.function = function
        self.key = key


class UnknownDriver(TacitError):
    code = "UNKNOWN_DRIVER"

    def __init__(self, driver: str):
        super().__init__(f"gateway has no driver named {driver!r}")
        self.driver = driver


class MalformedLine(TacitError):
    code = "MALFORMED_LINE"

    def __init__(self, line: str):
        excerpt = line if len(line) <= 40 else line[:37] + "..."
        super().__init__(f"unrecognized native line: {excerpt!r}")
        self.line = line


class EncodingError(TacitError):
    code = "ENCODING_ERROR"


class PortInUse(TacitError):
    code = "PORT_IN_USE"

    def __init__(self, listen: str):
        super().__init__(f"listen address already in use: {listen}")
        self.listen = listen


class RegistrationFailed(TacitError):
    code = "REGISTRATION_FAILED"


class InvalidHeading(TacitError):
    code = "INVALID_HEADING"

    def __init__(self, heading: str):
        super().__init__(f"heading must be north, south, east or west, got {heading!r}")
        self.heading = heading


class ConfigInvalid(TacitError):
    code = "CONFIG_INVALID"

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class BindFailed(TacitError):
    code = "BIND_FAILED"
