"""RFC 3339 timestamps, always timezone-aware."""
from __future__ import annotations

import datetime as _dt


def utcnow() -> _dt.datetime:
    return _dt.datetime.now(_dt.timezone.utc)


def format_ts(ts: _dt.datetime) -> str:
    if ts.tzinfo is None:
        raise ValueError("naive timestamp")
    return ts.astimezone(_dt.timezone.utc).isoformat().replace("+00:00", "Z")


def parse_ts(text: str) -> _dt.datetime:
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = _dt.datetime.fromisoformat(text)
    if ts.tzinfo is None:
        raise ValueError(f"timestamp without offset: {text!r}")
    return ts
