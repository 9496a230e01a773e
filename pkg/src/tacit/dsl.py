"""The coordination-logic language: parse, validate, pretty-print.

A logic file declares named roles (device slots described by capability and
placement constraints, never by concrete device ids) and handlers that react
to the initial request or to device events. The grammar has no production
that can name a device, so device independence holds by construction.

    service station_nav {
      role disp requires capability visual.display near user within 80 m

      on request(destination) {
        disp.show(route(destination))
      }
    }

Statements may subscribe to an event stream with ``-> name``; handlers
``on name(params)`` then react to those events. Expressions are literals,
trigger parameters, and table-function calls; there is no arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Union

MAX_EXPR_DEPTH = 64

REQUEST_TRIGGER = "request"

Pos = tuple[int, int]  # (line, column), both 1-based


class ParseError(Exception):
    """Points at the first offending token; there is no error recovery."""

    def __init__(self, line: int, column: int, message: str):
        super().__init__(f"{line}:{column}: {message}")
        self.line = line
        self.column = column
        self.message = message


# ---------------------------------------------------------------------------
# AST
#
# ``pos`` fields are excluded from equality so that structural comparison
# (and the parse/pretty-print round-trip) ignores source layout.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StringLit:
    value: str
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class NumberLit:
    value: float
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class VarRef:
    name: str
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class TableCall:
    func: str
    args: tuple["Expr", ...]
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


Expr = Union[StringLit, NumberLit, VarRef, TableCall]


@dataclass(frozen=True)
class Condition:
    left: Expr
    op: str  # "==" or "!="
    right: Expr
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class NearUser:
    radius_m: float | None  # None = unbounded (proximity used for scoring only)
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class InZone:
    zone: str
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


Constraint = Union[NearUser, InZone]


@dataclass(frozen=True)
class RoleSpec:
    name: str
    capability: str
    constraints: tuple[Constraint, ...] = ()
    pos: Pos = field(default=(0, 0), compare=False, repr=False)

    @property
    def near_user(self) -> NearUser | None:
        for c in self.constraints:
            if isinstance(c, NearUser):
                return c
        return None

    @property
    def in_zone(self) -> InZone | None:
        for c in self.constraints:
            if isinstance(c, InZone):
                return c
        return None


@dataclass(frozen=True)
class Trigger:
    name: str  # "request" or an event type
    params: tuple[str, ...]
    pos: Pos = field(default=(0, 0), compare=False, repr=False)

    @property
    def is_request(self) -> bool:
        return self.name == REQUEST_TRIGGER


@dataclass(frozen=True)
class Statement:
    role: str
    verb: str
    args: tuple[Expr, ...]
    subscription: str | None = None
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Handler:
    trigger: Trigger
    guard: Condition | None
    body: tuple[Statement, ...]
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class CoordinationLogic:
    name: str
    roles: tuple[RoleSpec, ...]
    handlers: tuple[Handler, ...]

    def role(self, name: str) -> RoleSpec | None:
        for r in self.roles:
            if r.name == name:
                return r
        return None


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

_PUNCT = {
    "{": "LBRACE",
    "}": "RBRACE",
    "(": "LPAREN",
    ")": "RPAREN",
    ".": "DOT",
    ",": "COMMA",
}


@dataclass(frozen=True)
class _Token:
    kind: str  # IDENT NUMBER STRING LBRACE RBRACE LPAREN RPAREN DOT COMMA ARROW EQEQ NEQ EOF
    text: str
    line: int
    col: int

    def describe(self) -> str:
        if self.kind == "EOF":
            return "end of input"
        if self.kind == "IDENT":
            return f"identifier {self.text!r}"
        if self.kind == "NUMBER":
            return f"number {self.text}"
        if self.kind == "STRING":
            return "string literal"
        return f"'{self.text}'"


def _tokenize(source: str) -> Iterator[_Token]:
    line, col = 1, 1
    i, n = 0, len(source)
    while i < n:
        ch = source[i]
        if ch == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and source[i] != "\n":
                i += 1
            continue
        start_line, start_col = line, col
        if ch in _PUNCT:
            yield _Token(_PUNCT[ch], ch, start_line, start_col)
            i += 1
            col += 1
            continue
        if ch == "-":
            if i + 1 < n and source[i + 1] == ">":
                yield _Token("ARROW", "->", start_line, start_col)
                i += 2
                col += 2
                continue
            raise ParseError(start_line, start_col, "unexpected character '-'")
        if ch == "=":
            if i + 1 < n and source[i + 1] == "=":
                yield _Token("EQEQ", "==", start_line, start_col)
                i += 2
                col += 2
                continue
            raise ParseError(start_line, start_col, "unexpected character '='")
        if ch == "!":
            if i + 1 < n and source[i + 1] == "=":
                yield _Token("NEQ", "!=", start_line, start_col)
                i += 2
                col += 2
                continue
            raise ParseError(start_line, start_col, "unexpected character '!'")
        if ch == '"':
            value = []
            i += 1
            col += 1
            while True:
                if i >= n:
                    raise ParseError(start_line, start_col, "unterminated string literal")
                c = source[i]
                if c == '"':
                    i += 1
                    col += 1
                    break
                if c == "\\":
                    if i + 1 >= n or source[i + 1] not in ('"', "\\"):
                        raise ParseError(line, col, "invalid escape; only \\\" and \\\\ are allowed")
                    value.append(source[i + 1])
                    i += 2
                    col += 2
                    continue
                if c == "\n":
                    line += 1
                    col = 1
                else:
                    col += 1
                value.append(c)
                i += 1
            yield _Token("STRING", "".join(value), start_line, start_col)
            continue
        if "0" <= ch <= "9":
            j = i
            while j < n and "0" <= source[j] <= "9":
                j += 1
            if j + 1 < n and source[j] == "." and "0" <= source[j + 1] <= "9":
                j += 1
                while j < n and "0" <= source[j] <= "9":
                    j += 1
            text = source[i:j]
            col += j - i
            i = j
            yield _Token("NUMBER", text, start_line, start_col)
            continue
        if "a" <= ch <= "z":
            j = i
            while j < n and ("a" <= source[j] <= "z" or "0" <= source[j] <= "9" or source[j] == "_"):
                j += 1
            text = source[i:j]
            col += j - i
            i = j
            yield _Token("IDENT", text, start_line, start_col)
            continue
        raise ParseError(start_line, start_col, f"unexpected character {ch!r}")
    yield _Token("EOF", "", line, col)


# ---------------------------------------------------------------------------
# Parser (recursive descent, single error, no recovery)
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, source: str):
        self._tokens = list(_tokenize(source))
        self._i = 0

    @property
    def _cur(self) -> _Token:
        return self._tokens[self._i]

    def _advance(self) -> _Token:
        tok = self._cur
        if tok.kind != "EOF":
            self._i += 1
        return tok

    def _error(self, expected: str) -> ParseError:
        tok = self._cur
        return ParseError(tok.line, tok.col, f"expected {expected}, found {tok.describe()}")

    def _expect(self, kind: str, expected: str) -> _Token:
        if self._cur.kind != kind:
            raise self._error(expected)
        return self._advance()

    def _expect_keyword(self, word: str) -> _Token:
        if self._cur.kind != "IDENT" or self._cur.text != word:
            raise self._error(f"'{word}'")
        return self._advance()

    def _at_keyword(self, word: str) -> bool:
        return self._cur.kind == "IDENT" and self._cur.text == word

    def parse_logic(self) -> CoordinationLogic:
        self._expect_keyword("service")
        name = self._expect("IDENT", "service name").text
        self._expect("LBRACE", "'{'")
        roles = []
        while self._at_keyword("role"):
            roles.append(self._parse_role())
        handlers = []
        while self._at_keyword("on"):
            handlers.append(self._parse_handler())
        self._expect("RBRACE", "'}', 'role' or 'on'")
        self._expect("EOF", "end of input")
        return CoordinationLogic(name=name, roles=tuple(roles), handlers=tuple(handlers))

    def _parse_role(self) -> RoleSpec:
        start = self._expect_keyword("role")
        name = self._expect("IDENT", "role name").text
        self._expect_keyword("requires")
        self._expect_keyword("capability")
        capability = self._parse_qname()
        constraints: list[Constraint] = []
        while True:
            if self._at_keyword("near"):
                tok = self._advance()
                self._expect_keyword("user")
                radius = None
                if self._at_keyword("within"):
                    self._advance()
                    radius = float(self._expect("NUMBER", "radius in meters").text)
                    self._expect_keyword("m")
                if any(isinstance(c, NearUser) for c in constraints):
                    raise ParseError(tok.line, tok.col, "duplicate 'near user' constraint")
                constraints.append(NearUser(radius_m=radius, pos=(tok.line, tok.col)))
            elif self._at_keyword("in"):
                tok = self._advance()
                self._expect_keyword("zone")
                zone = self._expect("STRING", "zone label string").text
                if any(isinstance(c, InZone) for c in constraints):
                    raise ParseError(tok.line, tok.col, "duplicate 'in zone' constraint")
                constraints.append(InZone(zone=zone, pos=(tok.line, tok.col)))
            else:
                break
        return RoleSpec(
            name=name,
            capability=capability,
            constraints=tuple(constraints),
            pos=(start.line, start.col),
        )

    def _parse_qname(self) -> str:
        parts = [self._expect("IDENT", "capability name").text]
        while self._cur.kind == "DOT":
            self._advance()
            parts.append(self._expect("IDENT", "capability name segment").text)
        return ".".join(parts)

    def _parse_handler(self) -> Handler:
        start = self._expect_keyword("on")
        trig_tok = self._expect("IDENT", "trigger name")
        self._expect("LPAREN", "'('")
        params: list[str] = []
        if self._cur.kind != "RPAREN":
            params.append(self._expect("IDENT", "parameter name").text)
            while self._cur.kind == "COMMA":
                self._advance()
                params.append(self._expect("IDENT", "parameter name").text)
        self._expect("RPAREN", "')'")
        trigger = Trigger(
            name=trig_tok.text, params=tuple(params), pos=(trig_tok.line, trig_tok.col)
        )
        guard = None
        if self._at_keyword("when"):
            when_tok = self._advance()
            left = self._parse_expr(0)
            if self._cur.kind == "EQEQ":
                op = "=="
            elif self._cur.kind == "NEQ":
                op = "!="
            else:
                raise self._error("'==' or '!='")
            self._advance()
            right = self._parse_expr(0)
            guard = Condition(left=left, op=op, right=right, pos=(when_tok.line, when_tok.col))
        self._expect("LBRACE", "'{'")
        body = []
        while self._cur.kind == "IDENT":
            body.append(self._parse_statement())
        self._expect("RBRACE", "'}' or a statement")
        return Handler(trigger=trigger, guard=guard, body=tuple(body), pos=(start.line, start.col))

    def _parse_statement(self) -> Statement:
        role_tok = self._expect("IDENT", "role name")
        self._expect("DOT", "'.'")
        verb = self._expect("IDENT", "verb").text
        self._expect("LPAREN", "'('")
        args: list[Expr] = []
        if self._cur.kind != "RPAREN":
            args.append(self._parse_expr(0))
            while self._cur.kind == "COMMA":
                self._advance()
                args.append(self._parse_expr(0))
        self._expect("RPAREN", "')'")
        subscription = None
        if self._cur.kind == "ARROW":
            self._advance()
            subscription = self._expect("IDENT", "event name").text
        return Statement(
            role=role_tok.text,
            verb=verb,
            args=tuple(args),
            subscription=subscription,
            pos=(role_tok.line, role_tok.col),
        )

    def _parse_expr(self, depth: int) -> Expr:
        if depth > MAX_EXPR_DEPTH:
            tok = self._cur
            raise ParseError(tok.line, tok.col, "expression nesting too deep")
        tok = self._cur
        if tok.kind == "STRING":
            self._advance()
            return StringLit(value=tok.text, pos=(tok.line, tok.col))
        if tok.kind == "NUMBER":
            self._advance()
            return NumberLit(value=float(tok.text), pos=(tok.line, tok.col))
        if tok.kind == "IDENT":
            self._advance()
            if self._cur.kind == "LPAREN":
                self._advance()
                args: list[Expr] = []
                if self._cur.kind != "RPAREN":
                    args.append(self._parse_expr(depth + 1))
                    while self._cur.kind == "COMMA":
                        self._advance()
                        args.append(self._parse_expr(depth + 1))
                self._expect("RPAREN", "')'")
                return TableCall(func=tok.text, args=tuple(args), pos=(tok.line, tok.col))
            return VarRef(name=tok.text, pos=(tok.line, tok.col))
        raise self._error("an expression (string, number, parameter or table call)")


def parse(source: str) -> CoordinationLogic:
    """Parse coordination-logic text into an AST, preserving source order."""
    return _Parser(source).parse_logic()


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    severity: str  # "error" | "warning"
    path: str
    message: str
    line: int
    col: int

    def format(self) -> str:
        return f"{self.line}:{self.col}: {self.severity}: {self.message} ({self.path})"


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...]

    @property
    def errors(self) -> tuple[Finding, ...]:
        return tuple(f for f in self.findings if f.severity == "error")

    @property
    def warnings(self) -> tuple[Finding, ...]:
        return tuple(f for f in self.findings if f.severity == "warning")

    @property
    def ok(self) -> bool:
        return not self.errors


def validate(
    logic: CoordinationLogic,
    vocabulary: set[str] | frozenset[str],
    table_functions: set[str] | frozenset[str],
) -> ValidationReport:
    """Check a parsed logic against a capability vocabulary and table set.

    Request-trigger parameters are session-scoped: event handlers and their
    guards may reference them in addition to their own trigger parameters.
    """
    findings: list[Finding] = []

    def err(path: str, message: str, pos: Pos) -> None:
        findings.append(Finding("error", path, message, pos[0], pos[1]))

    def warn(path: str, message: str, pos: Pos) -> None:
        findings.append(Finding("warning", path, message, pos[0], pos[1]))

    declared: dict[str, RoleSpec] = {}
    for i, role in enumerate(logic.roles):
        if role.name in declared:
            err(f"roles[{i}]", f"duplicate role name {role.name!r}", role.pos)
        else:
            declared[role.name] = role
        if role.capability not in vocabulary:
            err(
                f"roles[{i}].capability",
                f"capability {role.capability!r} not in vocabulary",
                role.pos,
            )

    request_params: set[str] = set()
    for handler in logic.handlers:
        if handler.trigger.is_request:
            request_params.update(handler.trigger.params)

    event_triggers = {h.trigger.name for h in logic.handlers if not h.trigger.is_request}
    used_roles: set[str] = set()

    def check_expr(expr: Expr, env: set[str], path: str) -> None:
        if isinstance(expr, VarRef):
            if expr.name not in env:
                err(path, f"parameter {expr.name!r} is not bound by the trigger", expr.pos)
        elif isinstance(expr, TableCall):
            if expr.func not in table_functions:
                err(path, f"unknown table function {expr.func!r}", expr.pos)
            for j, arg in enumerate(expr.args):
                check_expr(arg, env, f"{path}.args[{j}]")

    for h, handler in enumerate(logic.handlers):
        env = set(handler.trigger.params)
        if not handler.trigger.is_request:
            env |= request_params
        if handler.guard is not None:
            check_expr(handler.guard.left, env, f"handlers[{h}].guard")
            check_expr(handler.guard.right, env, f"handlers[{h}].guard")
        for s, stmt in enumerate(handler.body):
            path = f"handlers[{h}].body[{s}]"
            used_roles.add(stmt.role)
            if stmt.role not in declared:
                err(path, f"undeclared role {stmt.role!r}", stmt.pos)
            for j, arg in enumerate(stmt.args):
                check_expr(arg, env, f"{path}.args[{j}]")
            if stmt.subscription is not None and stmt.subscription not in event_triggers:
                warn(
                    path,
                    f"subscription {stmt.subscription!r} has no matching event handler",
                    stmt.pos,
                )

    for i, role in enumerate(logic.roles):
        if role.name not in used_roles:
            warn(f"roles[{i}]", f"role {role.name!r} is never used", role.pos)

    findings.sort(key=lambda f: (f.line, f.col))
    return ValidationReport(findings=tuple(findings))


# ---------------------------------------------------------------------------
# Pretty-printer
# ---------------------------------------------------------------------------


def format_number(value: float) -> str:
    """Decimal rendering with no exponent, integers without trailing '.0'."""
    if value == int(value):
        return str(int(value))
    return f"{value:.12f}".rstrip("0").rstrip(".")


def _format_string(value: str) -> str:
    return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _format_expr(expr: Expr) -> str:
    if isinstance(expr, StringLit):
        return _format_string(expr.value)
    if isinstance(expr, NumberLit):
        return format_number(expr.value)
    if isinstance(expr, VarRef):
        return expr.name
    return f"{expr.func}({', '.join(_format_expr(a) for a in expr.args)})"


def pretty_print(logic: CoordinationLogic) -> str:
    """Canonical text form; parse(pretty_print(l)) is structurally equal to l."""
    lines = [f"service {logic.name} {{"]
    for role in logic.roles:
        parts = [f"  role {role.name} requires capability {role.capability}"]
        for c in role.constraints:
            if isinstance(c, NearUser):
                parts.append("near user" if c.radius_m is None else f"near user within {format_number(c.radius_m)} m")
            else:
                parts.append(f"in zone {_format_string(c.zone)}")
        lines.append(" ".join(parts))
    for handler in logic.handlers:
        lines.append("")
        head = f"  on {handler.trigger.name}({', '.join(handler.trigger.params)})"
        if handler.guard is not None:
            g = handler.guard
            head += f" when {_format_expr(g.left)} {g.op} {_format_expr(g.right)}"
        lines.append(head + " {")
        for stmt in handler.body:
            text = f"    {stmt.role}.{stmt.verb}({', '.join(_format_expr(a) for a in stmt.args)})"
            if stmt.subscription is not None:
                text += f" -> {stmt.subscription}"
            lines.append(text)
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"
