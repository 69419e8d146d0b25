"""Parsing and emission of the ``Sec-GPC`` request header and the
``/.well-known/gpc.json`` support resource.

Everything here is a pure function over immutable values.
"""
from __future__ import annotations

import datetime as _dt
import enum
import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from typing import Any, Optional

SIGNAL_HEADER = "Sec-GPC"
SIGNAL_VALUE = "1"
WELL_KNOWN_PATH = "/.well-known/gpc.json"
WELL_KNOWN_CONTENT_TYPE = "application/json"

_BOM = b"\xef\xbb\xbf"


class EmitInvalid(ValueError):
    """Raised when asked to put an Invalid observation back on the wire."""


class MalformedRecord(ValueError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class SignalKind(str, enum.Enum):
    ACTIVE = "Active"
    ABSENT = "Absent"
    INVALID = "Invalid"


@dataclass(frozen=True)
class SignalState:
    """Tri-state observation of the signal on one request.

    ``raw`` is only set for Invalid observations and holds the offending
    field value(s) verbatim.
    """

    kind: SignalKind
    raw: Optional[str] = None

    def __post_init__(self):
        if (self.kind is SignalKind.INVALID) != (self.raw is not None):
            raise ValueError("raw is carried by Invalid observations only")

    @classmethod
    def invalid(cls, raw: str) -> "SignalState":
        return cls(SignalKind.INVALID, raw)

    @property
    def is_active(self) -> bool:
        return self.kind is SignalKind.ACTIVE

    def __str__(self) -> str:
        if self.kind is SignalKind.INVALID:
            return f"Invalid({self.raw!r})"
        return self.kind.value

    def to_json(self) -> dict:
        out: dict[str, Any] = {"signal": self.kind.value}
        if self.raw is not None:
            out["signal_raw"] = self.raw
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "SignalState":
        kind = SignalKind(obj["signal"])
        if kind is SignalKind.INVALID:
            return cls.invalid(obj["signal_raw"])
        return cls(kind)


ACTIVE = SignalState(SignalKind.ACTIVE)
ABSENT = SignalState(SignalKind.ABSENT)


def _field_items(request_fields) -> Iterable[tuple[Any, Any]]:
    if hasattr(request_fields, "get_all") and hasattr(request_fields, "keys"):
        # email.message.Message / http.client.HTTPMessage keep duplicates
        for name in dict.fromkeys(k.lower() for k in request_fields.keys()):
            for value in request_fields.get_all(name) or ():
                yield name, value
        return
    if hasattr(request_fields, "multi_items"):
        yield from request_fields.multi_items()
        return
    items = request_fields.items() if isinstance(request_fields, Mapping) else request_fields
    for name, value in items:
        if isinstance(value, (list, tuple)):
            for v in value:
                yield name, v
        else:
            yield name, value


def _as_text(value: Any) -> tuple[str, bool]:
    """Return (text, is_string). Only genuine text can ever be Active."""
    if isinstance(value, str):
        return value, True
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).decode("latin-1"), True
    return repr(value), False


def parse_signal(request_fields) -> SignalState:
    """Classify the signal carried by a complete set of request headers.

    Accepts a mapping, an iterable of ``(name, value)`` pairs, or a message
    object exposing ``get_all``. Never raises: anything unexpected is either
    Invalid (a field was seen) or Absent (no field could be read).
    """
    values: list[str] = []
    all_exact = True
    try:
        for name, value in _field_items(request_fields):
            name_text, _ = _as_text(name)
            if name_text.lower() != SIGNAL_HEADER.lower():
                continue
            text, is_string = _as_text(value)
            values.append(text)
            all_exact = all_exact and is_string and text == SIGNAL_VALUE
    except Exception:
        if not values:
            return ABSENT
        all_exact = False
    if not values:
        return ABSENT
    if all_exact:
        return ACTIVE
    return SignalState.invalid(", ".join(values))


def emit_signal(state: SignalState) -> dict[str, str]:
    if state.kind is SignalKind.ACTIVE:
        return {SIGNAL_HEADER: SIGNAL_VALUE}
    if state.kind is SignalKind.ABSENT:
        return {}
    raise EmitInvalid(f"cannot emit {state}")


def _is_iso8601(text: str) -> bool:
    try:
        _dt.date.fromisoformat(text)
        return True
    except ValueError:
        pass
    candidate = text[:-1] + "+00:00" if text.endswith(("Z", "z")) else text
    if "T" not in candidate and "t" not in candidate:
        return False
    try:
        _dt.datetime.fromisoformat(candidate)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class WellKnownRecord:
    gpc_supported: bool
    last_update: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.gpc_supported, bool):
            raise MalformedRecord("gpc not boolean")
        if self.last_update is not None and not (
            isinstance(self.last_update, str) and _is_iso8601(self.last_update)
        ):
            raise MalformedRecord("lastUpdate not ISO-8601")


def parse_well_known(body: bytes) -> WellKnownRecord:
    if isinstance(body, str):
        body = body.encode("utf-8")
    if body.startswith(_BOM):
        body = body[len(_BOM):]
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedRecord("undecodable text") from None
    try:
        obj = json.loads(text)
    except ValueError:
        raise MalformedRecord("invalid JSON") from None
    if not isinstance(obj, dict):
        raise MalformedRecord("not an object")
    if "gpc" not in obj:
        raise MalformedRecord("gpc missing")
    if not isinstance(obj["gpc"], bool):
        raise MalformedRecord("gpc not boolean")
    last_update = obj.get("lastUpdate")
    if last_update is not None and not isinstance(last_update, str):
        raise MalformedRecord("lastUpdate not ISO-8601")
    return WellKnownRecord(obj["gpc"], last_update)


def serialize_well_known(record: WellKnownRecord) -> bytes:
    out: dict[str, Any] = {"gpc": record.gpc_supported}
    if record.last_update is not None:
        out["lastUpdate"] = record.last_update
    return json.dumps(out, separators=(",", ":")).encode("utf-8")
