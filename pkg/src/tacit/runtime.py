"""Session engine: runs coordination logic against a plan of bound devices.

Each session is a live service request. Request handlers run once at start;
monitor-style statements (``-> event``) subscribe the session to events from
the bound device, and matching event handlers react as events arrive. A
session processes one item at a time from a FIFO mailbox on its own worker
thread, so per-session ordering is strict while sessions stay independent.

Dispatch failures at the transport level (timeout, unreachable) trigger one
failover: the planner re-plans around the dead device and the instruction is
re-issued once to the substitute. Device-reported errors never trigger
failover.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Protocol

from . import vocab
from .dsl import Condition, CoordinationLogic, Expr, NumberLit, StringLit, TableCall, VarRef, format_number
from .errors import RoleUnsatisfied, TableMiss, TacitError, UnknownDevice, UnknownLogic
from .model import Location
from .planner import (
    BindingPlan,
    DispatchRoute,
    PlanContext,
    RoleBinding,
    plan_bindings,
    replan,
    route_to_json,
)
from .registry import DeviceRegistry

TERMINAL_STATES = ("completed", "failed")

_STOP = object()


class EvalError(TacitError):
    code = "EVAL_ERROR"


class _SessionAborted(Exception):
    """Internal: unwinds the worker after a session reached a failed state."""


@dataclass(frozen=True)
class AbstractInstruction:
    """A device-independent action: role + verb + fully evaluated arguments."""

    session_id: str
    correlation_id: str
    role: str
    verb: str
    args: tuple
    arg_names: tuple[str, ...]
    issued_at: int

    def wire_args(self) -> dict[str, str]:
        return {n: canonical_value(v) for n, v in zip(self.arg_names, self.args)}


@dataclass(frozen=True)
class DeviceEvent:
    device_id: str
    event_type: str
    payload: Mapping[str, str]
    received_at: int


@dataclass(frozen=True)
class DispatchResult:
    correlation_id: str
    outcome: str  # ok | device_error | timeout | transport_error
    attempts: int
    route_used: DispatchRoute
    code: str | None = None
    message: str | None = None


class Dispatcher(Protocol):
    def __call__(
        self,
        instruction: AbstractInstruction,
        route: DispatchRoute,
        timeout_ms: int,
        max_attempts: int,
        *,
        device_id: str,
    ) -> DispatchResult: ...


# ---------------------------------------------------------------------------
# Expression evaluation
# ---------------------------------------------------------------------------


def canonical_value(value) -> str:
    """Canonical string form; integral numbers render without a fraction."""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, float)):
        return format_number(float(value))
    return str(value)


def evaluate(expr: Expr, bindings: Mapping[str, str], tables: Mapping[str, Mapping[str, str]]):
    """Reduce an expression to a plain value (str or float)."""
    if isinstance(expr, StringLit):
        return expr.value
    if isinstance(expr, NumberLit):
        return expr.value
    if isinstance(expr, VarRef):
        if expr.name not in bindings:
            raise EvalError(f"parameter {expr.name!r} is not bound")
        return bindings[expr.name]
    if isinstance(expr, TableCall):
        if len(expr.args) != 1:
            raise EvalError(
                f"table function {expr.func!r} takes exactly one key argument"
            )
        key = canonical_value(evaluate(expr.args[0], bindings, tables))
        table = tables.get(expr.func)
        if table is None or key not in table:
            raise TableMiss(expr.func, key)
        return table[key]
    raise EvalError(f"cannot evaluate {expr!r}")


def eval_condition(
    cond: Condition, bindings: Mapping[str, str], tables: Mapping[str, Mapping[str, str]]
) -> bool:
    left = canonical_value(evaluate(cond.left, bindings, tables))
    right = canonical_value(evaluate(cond.right, bindings, tables))
    return left == right if cond.op == "==" else left != right


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------


class Session:
    """One live service request: plan, subscriptions, and an ordered log."""

    def __init__(
        self,
        session_id: str,
        logic_name: str,
        logic: CoordinationLogic,
        params: dict[str, str],
        user: Location,
        clock: Callable[[], int],
    ):
        self.session_id = session_id
        self.logic_name = logic_name
        self.logic = logic
        self.params = params
        self.user = user
        self.state = "created"
        self.reason: str | None = None
        self.plan: BindingPlan | None = None
        self.excluded: set[str] = set()
        self.mailbox: queue.Queue = queue.Queue()
        self.worker: threading.Thread | None = None
        self._clock = clock
        self._lock = threading.Lock()
        self._log: list[dict] = []
        self._subs: list[dict] = []
        self._correlations = 0
        self._watchers: list[queue.Queue] = []

    # -- log ----------------------------------------------------------------

    def append(self, kind: str, **data) -> dict:
        with self._lock:
            entry = {"seq": len(self._log) + 1, "kind": kind, "at": self._clock(), **data}
            self._log.append(entry)
            watchers = list(self._watchers)
        for w in watchers:
            w.put(entry)
        return entry

    def log_entries(self) -> list[dict]:
        with self._lock:
            return list(self._log)

    def next_correlation(self) -> str:
        with self._lock:
            self._correlations += 1
            return f"{self.session_id}-c{self._correlations}"

    # -- state ----------------------------------------------------------------

    def set_state(self, state: str, reason: str | None = None) -> None:
        self.state = state
        self.reason = reason
        if reason is not None:
            self.append("state_change", state=state, reason=reason)
        else:
            self.append("state_change", state=state)

    # -- subscriptions --------------------------------------------------------

    def add_subscription(self, event_type: str, device_id: str, role: str) -> None:
        with self._lock:
            self._subs.append(
                {"event_type": event_type, "device_id": device_id, "role": role}
            )

    def subscription_pairs(self) -> set[tuple[str, str]]:
        with self._lock:
            return {(s["event_type"], s["device_id"]) for s in self._subs}

    def subscriptions(self) -> list[dict]:
        with self._lock:
            return [dict(s) for s in self._subs]

    def rewire_subscriptions(self, plan: BindingPlan) -> None:
        with self._lock:
            for sub in self._subs:
                binding = plan.bindings.get(sub["role"])
                if binding is not None:
                    sub["device_id"] = binding.device_id

    def has_subscriptions(self) -> bool:
        with self._lock:
            return bool(self._subs)

    # -- watchers (session log streaming) --------------------------------------

    def attach_watcher(self) -> tuple[list[dict], queue.Queue]:
        """Snapshot of existing entries plus a queue fed with later ones.

        The queue yields None once the session reaches a terminal state.
        """
        with self._lock:
            snapshot = list(self._log)
            q: queue.Queue = queue.Queue()
            self._watchers.append(q)
            if self.state in TERMINAL_STATES:
                q.put(None)
        return snapshot, q

    def detach_watcher(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._watchers:
                self._watchers.remove(q)

    def close_watchers(self) -> None:
        with self._lock:
            watchers = list(self._watchers)
        for w in watchers:
            w.put(None)

    # -- test/ops helpers -------------------------------------------------------

    def drain(self, timeout: float = 5.0) -> bool:
        """Wait until the mailbox is fully processed or the session ended."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.state in TERMINAL_STATES or self.mailbox.unfinished_tasks == 0:
                return True
            time.sleep(0.005)
        return False

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "logic": self.logic_name,
            "state": self.state,
            "reason": self.reason,
            "params": dict(self.params),
            "user": {"zone": self.user.zone, "x": self.user.x, "y": self.user.y},
            "plan": self.plan.to_json() if self.plan else None,
            "subscriptions": self.subscriptions(),
            "log": self.log_entries(),
        }


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class SessionEngine:
    def __init__(
        self,
        registry: DeviceRegistry,
        dispatcher: Dispatcher,
        *,
        tables: Mapping[str, Mapping[str, str]] | None = None,
        clock: Callable[[], int] | None = None,
        ttl_ms: int = 30_000,
        dispatch_timeout_ms: int = 2_000,
        max_attempts: int = 2,
        idle_timeout_ms: int = 600_000,
    ):
        self._registry = registry
        self._dispatcher = dispatcher
        self._tables = dict(tables or {})
        self._clock = clock or (lambda: time.time_ns() // 1_000_000)
        self.ttl_ms = ttl_ms
        self.dispatch_timeout_ms = dispatch_timeout_ms
        self.max_attempts = max_attempts
        self.idle_timeout_ms = idle_timeout_ms
        self._lock = threading.Lock()
        self._logics: dict[str, CoordinationLogic] = {}
        self._sessions: dict[str, Session] = {}
        self._session_counter = 0
        self._dropped_events = 0

    # -- logic store ---------------------------------------------------------

    def add_logic(self, name: str, logic: CoordinationLogic) -> None:
        with self._lock:
            self._logics[name] = logic

    def has_logic(self, name: str) -> bool:
        with self._lock:
            return name in self._logics

    # -- sessions --------------------------------------------------------------

    def start_session(self, logic_name: str, params: Mapping[str, str], user: Location) -> str:
        with self._lock:
            logic = self._logics.get(logic_name)
            if logic is None:
                raise UnknownLogic(logic_name)
            self._session_counter += 1
            session_id = f"s-{self._session_counter}"
        session = Session(
            session_id, logic_name, logic, dict(params), user, clock=self._clock
        )
        with self._lock:
            self._sessions[session_id] = session
        now = self._clock()
        ctx = PlanContext(user_location=user, now=now, ttl_ms=self.ttl_ms)
        try:
            session.plan = plan_bindings(logic, self._registry.snapshot(now), ctx)
        except RoleUnsatisfied as exc:
            session.set_state("failed", reason=f"PLAN_FAILED: {exc.code}({exc.role})")
            session.close_watchers()
            return session_id
        session.set_state("running")
        session.mailbox.put(("request", None))
        worker = threading.Thread(
            target=self._worker_loop, args=(session,), daemon=True, name=f"tacit-{session_id}"
        )
        session.worker = worker
        worker.start()
        return session_id

    def get_session(self, session_id: str) -> Session | None:
        with self._lock:
            return self._sessions.get(session_id)

    def sessions(self) -> list[Session]:
        with self._lock:
            return list(self._sessions.values())

    @property
    def dropped_events(self) -> int:
        with self._lock:
            return self._dropped_events

    def ingest_event(self, device_id: str, event_type: str, payload: Mapping[str, str]) -> DeviceEvent:
        """Deliver an event to every running session subscribed to its source."""
        if self._registry.get(device_id) is None:
            raise UnknownDevice(device_id)
        event = DeviceEvent(
            device_id=device_id,
            event_type=event_type,
            payload=dict(payload),
            received_at=self._clock(),
        )
        delivered = False
        for session in self.sessions():
            if session.state != "running":
                continue
            if (event_type, device_id) in session.subscription_pairs():
                session.mailbox.put(("event", event))
                delivered = True
        if not delivered:
            with self._lock:
                self._dropped_events += 1
        return event

    def shutdown(self, timeout: float = 5.0) -> None:
        for session in self.sessions():
            if session.state not in TERMINAL_STATES:
                session.mailbox.put(_STOP)
        deadline = time.monotonic() + timeout
        for session in self.sessions():
            if session.worker is not None:
                session.worker.join(max(0.0, deadline - time.monotonic()))

    # -- worker ------------------------------------------------------------------

    def _worker_loop(self, session: Session) -> None:
        idle_s = self.idle_timeout_ms / 1000.0
        while True:
            try:
                item = session.mailbox.get(timeout=idle_s)
            except queue.Empty:
                self._complete(session, reason="idle timeout")
                return
            try:
                if item is _STOP:
                    self._complete(session, reason="shutdown")
                    return
                kind, payload = item
                if kind == "request":
                    self._run_request_phase(session)
                    if not session.has_subscriptions():
                        self._complete(session)
                        return
                else:
                    self._handle_event(session, payload)
            except _SessionAborted:
                return
            finally:
                session.mailbox.task_done()

    def _complete(self, session: Session, reason: str | None = None) -> None:
        if session.state not in TERMINAL_STATES:
            session.set_state("completed", reason=reason)
        session.close_watchers()

    def _fail(self, session: Session, reason: str) -> None:
        session.set_state("failed", reason=reason)
        session.close_watchers()
        raise _SessionAborted()

    def _run_request_phase(self, session: Session) -> None:
        for handler in session.logic.handlers:
            if not handler.trigger.is_request:
                continue
            env = dict(session.params)
            missing = [p for p in handler.trigger.params if p not in env]
            if missing:
                session.append(
                    "error",
                    code="UNBOUND_PARAM",
                    message=f"request is missing parameter {missing[0]!r}",
                )
                continue
            self._run_guarded_body(session, handler, env)

    def _handle_event(self, session: Session, event: DeviceEvent) -> None:
        session.append(
            "event",
            device_id=event.device_id,
            event_type=event.event_type,
            payload=dict(event.payload),
        )
        for handler in session.logic.handlers:
            if handler.trigger.is_request or handler.trigger.name != event.event_type:
                continue
            env = dict(session.params)
            missing = [p for p in handler.trigger.params if p not in event.payload]
            if missing:
                session.append(
                    "error",
                    code="UNBOUND_PARAM",
                    message=f"event payload is missing key {missing[0]!r}",
                )
                continue
            for p in handler.trigger.params:
                env[p] = event.payload[p]
            self._run_guarded_body(session, handler, env)

    def _run_guarded_body(self, session: Session, handler, env: dict[str, str]) -> None:
        if handler.guard is not None:
            try:
                if not eval_condition(handler.guard, env, self._tables):
                    return
            except TacitError as exc:
                session.append("error", code=exc.code, message=exc.message)
                return
        for stmt in handler.body:
            try:
                values = tuple(evaluate(arg, env, self._tables) for arg in stmt.args)
            except TacitError as exc:
                # A table miss or unbound parameter fails this handler only.
                session.append("error", code=exc.code, message=exc.message)
                return
            self._dispatch_statement(session, stmt, values)

    def _dispatch_statement(self, session: Session, stmt, values: tuple) -> None:
        assert session.plan is not None
        binding = session.plan.bindings[stmt.role]
        result = self._emit_and_dispatch(session, stmt, values, binding)
        if result.outcome in ("timeout", "transport_error"):
            binding = self._failover(session, stmt, binding)
            result = self._emit_and_dispatch(session, stmt, values, binding)
        if result.outcome == "ok" and stmt.subscription is not None:
            session.add_subscription(stmt.subscription, binding.device_id, stmt.role)

    def _emit_and_dispatch(
        self, session: Session, stmt, values: tuple, binding: RoleBinding
    ) -> DispatchResult:
        correlation = session.next_correlation()
        instruction = AbstractInstruction(
            session_id=session.session_id,
            correlation_id=correlation,
            role=stmt.role,
            verb=stmt.verb,
            args=values,
            arg_names=vocab.arg_names(stmt.verb, len(values)),
            issued_at=self._clock(),
        )
        session.append(
            "instruction",
            correlation=correlation,
            role=stmt.role,
            verb=stmt.verb,
            args=instruction.wire_args(),
        )
        result = self._dispatcher(
            instruction,
            binding.route,
            self.dispatch_timeout_ms,
            self.max_attempts,
            device_id=binding.device_id,
        )
        session.append(
            "dispatch_result",
            correlation=correlation,
            outcome=result.outcome,
            code=result.code,
            message=result.message,
            attempts=result.attempts,
            device_id=binding.device_id,
            route=route_to_json(binding.route),
        )
        return result

    def _failover(self, session: Session, stmt, failed_binding: RoleBinding) -> RoleBinding:
        """Re-plan around a transport-dead device; fail the session if impossible."""
        assert session.plan is not None
        failed = failed_binding.device_id
        now = self._clock()
        snapshot = self._registry.snapshot(now)
        ctx = PlanContext(
            user_location=session.user,
            now=now,
            ttl_ms=self.ttl_ms,
            excluded=frozenset(session.excluded),
        )
        try:
            new_plan = replan(session.logic, snapshot, ctx, failed, session.plan)
        except RoleUnsatisfied as exc:
            session.excluded.add(failed)
            self._fail(session, f"{exc.code}({exc.role})")
            raise AssertionError("unreachable")
        session.excluded.add(failed)
        session.plan = new_plan
        session.rewire_subscriptions(new_plan)
        return new_plan.bindings[stmt.role]
