"""Role binding: pick a concrete device per role and decide its dispatch route.

Selection is nearest-device: among eligible candidates the one maximizing
1/(1+d) wins, d being the Euclidean distance to the requesting user; ties go
to the lexicographically smallest device id. Routing follows the hybrid
rule: rest/soap devices are invoked directly, native devices go through
their gateway. Planning is all-or-nothing; a plan never leaves a role
unbound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .dsl import CoordinationLogic, InZone, NearUser, RoleSpec
from .errors import RoleUnsatisfied
from .model import AccessSpec, DeviceDescriptor, Location, RegistrySnapshot


@dataclass(frozen=True)
class DirectRest:
    endpoint: str
    kind: str = field(default="direct-rest", init=False)


@dataclass(frozen=True)
class DirectSoap:
    endpoint: str
    kind: str = field(default="direct-soap", init=False)


@dataclass(frozen=True)
class ViaGateway:
    gateway_id: str
    driver: str
    native_address: str
    kind: str = field(default="via-gateway", init=False)


DispatchRoute = DirectRest | DirectSoap | ViaGateway


def route_to_json(route: DispatchRoute) -> dict:
    if isinstance(route, ViaGateway):
        return {
            "kind": route.kind,
            "gateway_id": route.gateway_id,
            "driver": route.driver,
            "native_address": route.native_address,
        }
    return {"kind": route.kind, "endpoint": route.endpoint}


@dataclass(frozen=True)
class PlanContext:
    user_location: Location
    now: int
    ttl_ms: int
    excluded: frozenset[str] = frozenset()


@dataclass(frozen=True)
class RoleBinding:
    device_id: str
    route: DispatchRoute
    score: float


@dataclass(frozen=True)
class BindingPlan:
    logic_name: str
    bindings: dict[str, RoleBinding]
    planned_at: int

    def device_ids(self) -> set[str]:
        return {b.device_id for b in self.bindings.values()}

    def to_json(self) -> dict:
        return {
            "logic": self.logic_name,
            "planned_at": self.planned_at,
            "bindings": {
                role: {
                    "device_id": b.device_id,
                    "route": route_to_json(b.route),
                    "score": b.score,
                }
                for role, b in self.bindings.items()
            },
        }


def route_for(access: AccessSpec) -> DispatchRoute:
    """Route variant is a pure function of the access kind (the hybrid rule)."""
    if access.kind == "rest":
        return DirectRest(endpoint=access.endpoint or "")
    if access.kind == "soap":
        return DirectSoap(endpoint=access.endpoint or "")
    return ViaGateway(
        gateway_id=access.gateway_id or "",
        driver=access.driver or "",
        native_address=access.native_address or "",
    )


def distance(a: Location, b: Location) -> float:
    return math.dist((a.x, a.y), (b.x, b.y))


def score(user: Location, device: DeviceDescriptor) -> float:
    return 1.0 / (1.0 + distance(user, device.location))


def is_eligible(device: DeviceDescriptor, role: RoleSpec, ctx: PlanContext) -> bool:
    if role.capability not in device.capabilities:
        return False
    if (ctx.now - device.last_heartbeat) > ctx.ttl_ms:
        return False
    if device.id in ctx.excluded:
        return False
    near = role.near_user
    if near is not None and near.radius_m is not None:
        if distance(ctx.user_location, device.location) > near.radius_m:
            return False
    zone = role.in_zone
    if zone is not None and device.location.zone != zone.zone:
        return False
    return True


def _select(role: RoleSpec, snapshot: RegistrySnapshot, ctx: PlanContext) -> RoleBinding:
    best: DeviceDescriptor | None = None
    best_score = -math.inf
    for device in snapshot.devices:
        if not is_eligible(device, role, ctx):
            continue
        s = score(ctx.user_location, device)
        if s > best_score or (s == best_score and best is not None and device.id < best.id):
            best = device
            best_score = s
    if best is None:
        raise RoleUnsatisfied(role.name)
    return RoleBinding(device_id=best.id, route=route_for(best.access), score=best_score)


def plan_bindings(
    logic: CoordinationLogic, snapshot: RegistrySnapshot, ctx: PlanContext
) -> BindingPlan:
    """Bind every declared role or raise ROLE_UNSATISFIED (all-or-nothing).

    Roles resolve independently, so one device may serve several roles.
    """
    bindings = {role.name: _select(role, snapshot, ctx) for role in logic.roles}
    return BindingPlan(logic_name=logic.name, bindings=bindings, planned_at=ctx.now)


def replan(
    logic: CoordinationLogic,
    snapshot: RegistrySnapshot,
    ctx: PlanContext,
    failed: str,
    prior: BindingPlan,
) -> BindingPlan:
    """Replace bindings of a failed device, keeping unaffected roles stable.

    Roles that were not bound to ``failed`` keep their prior device when it
    is still eligible; only then does fresh selection run.
    """
    if failed not in prior.device_ids():
        return prior
    ctx = replace(ctx, excluded=ctx.excluded | {failed})
    bindings: dict[str, RoleBinding] = {}
    for role in logic.roles:
        prior_binding = prior.bindings.get(role.name)
        if prior_binding is not None and prior_binding.device_id != failed:
            device = snapshot.get(prior_binding.device_id)
            if device is not None and is_eligible(device, role, ctx):
                bindings[role.name] = RoleBinding(
                    device_id=device.id,
                    route=route_for(device.access),
                    score=score(ctx.user_location, device),
                )
                continue
        bindings[role.name] = _select(role, snapshot, ctx)
    return BindingPlan(logic_name=logic.name, bindings=bindings, planned_at=ctx.now)
