"""Restriction tags that travel with data shared beyond the user's session.

A record carries one all-or-nothing :class:`RestrictionTag` plus a content
hash of that tag. Every hop re-checks the hash, so a tag dropped or edited
in transit surfaces as :class:`TagStripped` instead of silently turning
into an unrestricted record.
"""
from __future__ import annotations

import base64
import datetime as _dt
import enum
import hashlib
import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Optional, Union

from .engine import ProcessingActivity
from .signal import SignalState
from .timefmt import format_ts, parse_ts, utcnow


class TagStripped(ValueError):
    pass


class OriginSignal(str, enum.Enum):
    GPC_ACTIVE = "GpcActive"
    NONE = "None"


@dataclass(frozen=True)
class RestrictionTag:
    no_sell: bool
    no_share: bool
    no_cross_context_ads: bool
    origin_signal: OriginSignal
    issued_at: _dt.datetime

    def __post_init__(self):
        expected = self.origin_signal is OriginSignal.GPC_ACTIVE
        if not (self.no_sell is self.no_share is self.no_cross_context_ads is expected):
            raise ValueError("restriction tags are all-or-nothing and follow origin_signal")

    @property
    def restricted(self) -> bool:
        return self.origin_signal is OriginSignal.GPC_ACTIVE

    def to_json(self) -> dict:
        return {
            "no_sell": self.no_sell,
            "no_share": self.no_share,
            "no_cross_context_ads": self.no_cross_context_ads,
            "origin_signal": self.origin_signal.value,
            "issued_at": format_ts(self.issued_at),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RestrictionTag":
        return cls(
            no_sell=obj["no_sell"],
            no_share=obj["no_share"],
            no_cross_context_ads=obj["no_cross_context_ads"],
            origin_signal=OriginSignal(obj["origin_signal"]),
            issued_at=parse_ts(obj["issued_at"]),
        )

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()


def _canonical_adapter(tag: RestrictionTag) -> bytes:
    return tag.canonical_bytes()


# Seam for downstream framework encodings; only the canonical form ships.
EXTERNAL_ADAPTERS: dict[str, Callable[[RestrictionTag], bytes]] = {
    "canonical": _canonical_adapter,
}


def to_external(tag: RestrictionTag, adapter: str = "canonical") -> bytes:
    try:
        encode = EXTERNAL_ADAPTERS[adapter]
    except KeyError:
        raise ValueError(f"no external adapter named {adapter!r}") from None
    return encode(tag)


@dataclass(frozen=True)
class TaggedRecord:
    payload: bytes
    tag: RestrictionTag
    provenance: tuple[str, ...]
    integrity: str = ""

    def __post_init__(self):
        if not self.provenance:
            raise ValueError("provenance must name at least the sender")
        if not self.integrity:
            object.__setattr__(self, "integrity", self.tag.digest())

    def verify(self) -> None:
        if self.tag.digest() != self.integrity:
            raise TagStripped(f"tag digest mismatch after {self.provenance[-1]!r}")

    def to_json(self) -> dict:
        return {
            "payload_b64": base64.b64encode(self.payload).decode("ascii"),
            "tag": self.tag.to_json(),
            "provenance": list(self.provenance),
            "integrity": self.integrity,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TaggedRecord":
        """Decode the interchange form. A missing or unparseable tag is a
        stripped tag, never an unrestricted one."""
        try:
            tag = RestrictionTag.from_json(obj["tag"])
            integrity = obj["integrity"]
        except (KeyError, TypeError, ValueError) as exc:
            raise TagStripped(f"unreadable tag: {exc}") from exc
        record = cls(
            payload=base64.b64decode(obj["payload_b64"], validate=True),
            tag=tag,
            provenance=tuple(obj["provenance"]),
            integrity=integrity,
        )
        record.verify()
        return record


def _payload_bytes(payload: Union[bytes, str]) -> bytes:
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    if not payload:
        raise ValueError("payload must be non-empty")
    return bytes(payload)


def tag_outbound(payload: Union[bytes, str], signal: SignalState, sender: str,
                 issued_at: Optional[_dt.datetime] = None) -> TaggedRecord:
    """Attach the restriction derived from ``signal`` to an outbound record.

    Invalid observations tag as unrestricted, matching how the engine
    decides them.
    """
    active = signal.is_active
    tag = RestrictionTag(
        no_sell=active,
        no_share=active,
        no_cross_context_ads=active,
        origin_signal=OriginSignal.GPC_ACTIVE if active else OriginSignal.NONE,
        issued_at=issued_at or utcnow(),
    )
    return TaggedRecord(_payload_bytes(payload), tag, (sender,))


def forward(record: TaggedRecord, next_hop: str) -> TaggedRecord:
    record.verify()
    out = TaggedRecord(record.payload, record.tag, record.provenance + (next_hop,), record.integrity)
    out.verify()
    return out


@dataclass(frozen=True)
class Deny:
    reason: str


ALLOW = "Allow"

_RESTRICTION_FIELD = {
    ProcessingActivity.SELL_TO_THIRD_PARTY: "no_sell",
    ProcessingActivity.SHARE_WITH_THIRD_PARTY: "no_share",
    ProcessingActivity.CROSS_CONTEXT_AD_TARGETING: "no_cross_context_ads",
}


def enforce_downstream(record: TaggedRecord, requested: ProcessingActivity) -> Union[str, Deny]:
    """Return ``ALLOW`` or a :class:`Deny` for ``requested`` on this record."""
    record.verify()
    attr = _RESTRICTION_FIELD.get(requested)
    if attr is not None and getattr(record.tag, attr):
        return Deny(f"{requested.value} blocked by {attr} (origin {record.tag.origin_signal.value}, "
                    f"via {' -> '.join(record.provenance)})")
    return ALLOW


@dataclass
class HopResult:
    node: str
    depth: int
    requested: ProcessingActivity
    outcome: Union[str, Deny]


@dataclass
class PipelineRun:
    origin_signal: SignalState
    record: TaggedRecord
    hops: list[HopResult] = field(default_factory=list)


def simulate_pipeline(
    signal: SignalState,
    nodes: Sequence[str],
    requests: Sequence[Sequence[ProcessingActivity]],
    payload: bytes = b"record",
    issued_at: Optional[_dt.datetime] = None,
) -> PipelineRun:
    """Push one record from ``nodes[0]`` (the first party) down the chain.

    ``requests[i]`` lists what node ``i + 1`` tries to do with the record it
    received. Per-record hop order is preserved.
    """
    if len(requests) != len(nodes) - 1:
        raise ValueError("one request list per downstream node")
    record = tag_outbound(payload, signal, nodes[0], issued_at)
    run = PipelineRun(signal, record)
    for depth, (node, wanted) in enumerate(zip(nodes[1:], requests), start=1):
        record = forward(record, node)
        for activity in wanted:
            run.hops.append(HopResult(node, depth, activity, enforce_downstream(record, activity)))
    run.record = record
    return run

