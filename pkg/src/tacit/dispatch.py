"""Instruction dispatch over the three routes (direct REST, direct SOAP, gateway).

Wire formats are pinned:

* direct-rest: ``POST {endpoint}/actions/{verb}`` with
  ``{"session": ..., "correlation": ..., "args": {...}}``; the device answers
  HTTP 200 with ``{"result":"ok"}`` or ``{"error":{"code":...,"message":...}}``.
* direct-soap: ``POST {endpoint}`` with an
  ``<Envelope><Body><verb ...><arg name=...>value</arg></verb></Body></Envelope>``
  document; reply carries ``<ok/>`` or ``<fault code=.../>``.
* via-gateway: ``POST {gateway}/dispatch`` with the abstract-instruction
  envelope; the gateway reports the device-leg outcome in its JSON body.

Retries happen only on timeout/transport_error, never on device_error.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from typing import Callable
from xml.sax.saxutils import escape, quoteattr

import requests

from .planner import DirectRest, DirectSoap, DispatchRoute, ViaGateway
from .runtime import AbstractInstruction, DispatchResult

GATEWAY_OUTCOMES = ("ok", "device_error", "timeout", "transport_error")


def build_soap_envelope(verb: str, session_id: str, correlation_id: str, args: dict[str, str]) -> str:
    parts = [
        "<Envelope><Body>",
        f"<{verb} session={quoteattr(session_id)} correlation={quoteattr(correlation_id)}>",
    ]
    for name, value in args.items():
        parts.append(f"<arg name={quoteattr(name)}>{escape(value)}</arg>")
    parts.append(f"</{verb}></Body></Envelope>")
    return "".join(parts)


def parse_soap_reply(text: str) -> tuple[str, str | None, str | None]:
    """Returns (outcome, code, message) from a device's SOAP reply."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError:
        return "transport_error", None, "unparseable reply envelope"
    body = root.find("Body")
    if body is None:
        return "transport_error", None, "reply has no Body"
    if body.find("ok") is not None:
        return "ok", None, None
    fault = body.find("fault")
    if fault is not None:
        return "device_error", fault.get("code") or "FAULT", fault.text or ""
    return "transport_error", None, "reply has neither ok nor fault"


class HttpDispatcher:
    """Default dispatcher used by the coordination server.

    ``gateway_resolver`` maps a gateway id to its base URL (gateways publish
    themselves in the device registry, so the facade backs this with a
    registry lookup).
    """

    def __init__(self, gateway_resolver: Callable[[str], str | None]):
        self._resolve_gateway = gateway_resolver
        self._http = requests.Session()

    def __call__(
        self,
        instruction: AbstractInstruction,
        route: DispatchRoute,
        timeout_ms: int,
        max_attempts: int,
        *,
        device_id: str,
    ) -> DispatchResult:
        attempts = 0
        outcome, code, message = "transport_error", None, "not attempted"
        while attempts < max_attempts:
            attempts += 1
            outcome, code, message = self._attempt(instruction, route, timeout_ms, device_id)
            if outcome in ("ok", "device_error"):
                break
        return DispatchResult(
            correlation_id=instruction.correlation_id,
            outcome=outcome,
            attempts=attempts,
            route_used=route,
            code=code,
            message=message,
        )

    def _attempt(
        self,
        instruction: AbstractInstruction,
        route: DispatchRoute,
        timeout_ms: int,
        device_id: str,
    ) -> tuple[str, str | None, str | None]:
        timeout_s = timeout_ms / 1000.0
        try:
            if isinstance(route, DirectRest):
                return self._attempt_rest(instruction, route, timeout_s)
            if isinstance(route, DirectSoap):
                return self._attempt_soap(instruction, route, timeout_s)
            return self._attempt_gateway(instruction, route, timeout_s, device_id)
        except requests.Timeout:
            return "timeout", None, f"no reply within {timeout_ms} ms"
        except requests.RequestException as exc:
            return "transport_error", None, str(exc)

    def _attempt_rest(
        self, instruction: AbstractInstruction, route: DirectRest, timeout_s: float
    ) -> tuple[str, str | None, str | None]:
        url = f"{route.endpoint.rstrip('/')}/actions/{instruction.verb}"
        body = {
            "session": instruction.session_id,
            "correlation": instruction.correlation_id,
            "args": instruction.wire_args(),
        }
        resp = self._http.post(url, json=body, timeout=timeout_s)
        if resp.status_code != 200:
            return "transport_error", None, f"HTTP {resp.status_code}"
        try:
            data = resp.json()
        except ValueError:
            return "transport_error", None, "non-JSON reply"
        if data.get("result") == "ok":
            return "ok", None, None
        error = data.get("error")
        if isinstance(error, dict):
            return "device_error", error.get("code") or "ERROR", error.get("message") or ""
        return "transport_error", None, "unexpected reply shape"

    def _attempt_soap(
        self, instruction: AbstractInstruction, route: DirectSoap, timeout_s: float
    ) -> tuple[str, str | None, str | None]:
        envelope = build_soap_envelope(
            instruction.verb,
            instruction.session_id,
            instruction.correlation_id,
            instruction.wire_args(),
        )
        resp = self._http.post(
            route.endpoint,
            data=envelope.encode("utf-8"),
            headers={"Content-Type": "text/xml; charset=utf-8"},
            timeout=timeout_s,
        )
        if resp.status_code != 200:
            return "transport_error", None, f"HTTP {resp.status_code}"
        return parse_soap_reply(resp.text)

    def _attempt_gateway(
        self,
        instruction: AbstractInstruction,
        route: ViaGateway,
        timeout_s: float,
        device_id: str,
    ) -> tuple[str, str | None, str | None]:
        base = self._resolve_gateway(route.gateway_id)
        if base is None:
            return "transport_error", None, f"unknown gateway {route.gateway_id!r}"
        envelope = {
            "device_id": device_id,
            "driver": route.driver,
            "native_address": route.native_address,
            "verb": instruction.verb,
            "args": instruction.wire_args(),
            "correlation": instruction.correlation_id,
            "session": instruction.session_id,
        }
        # The gateway leg has its own device timeout; leave headroom for it.
        resp = self._http.post(
            f"{base.rstrip('/')}/dispatch", json=envelope, timeout=timeout_s + 2.0
        )
        if resp.status_code != 200:
            return "transport_error", None, f"gateway HTTP {resp.status_code}"
        try:
            data = resp.json()
        except ValueError:
            return "transport_error", None, "non-JSON gateway reply"
        outcome = data.get("outcome")
        if outcome not in GATEWAY_OUTCOMES:
            return "transport_error", None, f"unexpected gateway outcome {outcome!r}"
        return outcome, data.get("code"), data.get("message")
