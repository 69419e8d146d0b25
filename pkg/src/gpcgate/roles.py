"""GDPR actor roles for (entity, processing activity) pairs.

Role facts are declared by the integrator; nothing here looks at traffic.
"""
from __future__ import annotations

import enum
from collections.abc import Iterable
from dataclasses import dataclass


class InconsistentBinding(ValueError):
    pass


class DuplicateActivity(ValueError):
    pass


class PartyRole(str, enum.Enum):
    CONTROLLER = "Controller"
    PROCESSOR = "Processor"
    THIRD_PARTY = "ThirdParty"


@dataclass(frozen=True)
class EntityActivityBinding:
    entity_id: str
    activity_id: str
    determines_purposes_and_means: bool = False
    acts_on_behalf_of_controller: bool = False
    is_intended_interaction_target: bool = False

    @classmethod
    def from_json(cls, obj: dict) -> "EntityActivityBinding":
        return cls(
            entity_id=obj["entity_id"],
            activity_id=obj["activity_id"],
            determines_purposes_and_means=bool(obj.get("determines_purposes_and_means", False)),
            acts_on_behalf_of_controller=bool(obj.get("acts_on_behalf_of_controller", False)),
            is_intended_interaction_target=bool(obj.get("is_intended_interaction_target", False)),
        )


def classify(binding: EntityActivityBinding) -> PartyRole:
    """Role of the bound entity for its activity, seen from the first party.

    An entity that determines purposes and means but is not the party the
    person meant to interact with is an independent controller of its own
    activity, and therefore a third party relative to the first party.
    """
    if binding.determines_purposes_and_means and binding.acts_on_behalf_of_controller:
        raise InconsistentBinding(
            f"{binding.entity_id}/{binding.activity_id}: cannot both determine "
            "purposes and act on behalf of the controller"
        )
    if binding.determines_purposes_and_means and binding.is_intended_interaction_target:
        return PartyRole.CONTROLLER
    if binding.acts_on_behalf_of_controller:
        return PartyRole.PROCESSOR
    return PartyRole.THIRD_PARTY


def split_roles(entity_id: str, bindings: Iterable[EntityActivityBinding]) -> dict[str, PartyRole]:
    roles: dict[str, PartyRole] = {}
    for b in bindings:
        if b.entity_id != entity_id:
            raise InconsistentBinding(f"binding for {b.entity_id!r} passed for {entity_id!r}")
        if b.activity_id in roles:
            raise DuplicateActivity(b.activity_id)
        roles[b.activity_id] = classify(b)
    return roles
