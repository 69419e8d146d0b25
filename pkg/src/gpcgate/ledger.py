"""Per-(subject, site) consent state machine with an append-only event log.

:func:`record_visit` is the pure transition function. :class:`LedgerStore`
persists events as newline-delimited JSON (the source of truth) and can
write derived-state snapshots to shorten startup replay.

Concurrency contract of :class:`LedgerStore`: updates are serialized per
:class:`SubjectSiteKey` (single writer per key), different keys proceed
concurrently, and reads never block on or mutate state.
"""
from __future__ import annotations

import datetime as _dt
import enum
import json
import logging
import os
import threading
from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .signal import ABSENT, SignalState
from .timefmt import format_ts, parse_ts

logger = logging.getLogger(__name__)

EVENT_LOG_NAME = "events.ndjson"
SNAPSHOT_DIR_NAME = "snapshots"


class StaleEvent(ValueError):
    pass


class CorruptState(ValueError):
    pass


class StorageUnavailable(OSError):
    pass


@dataclass(frozen=True)
class SubjectSiteKey:
    subject_id: str
    site_id: str

    def __post_init__(self):
        if not isinstance(self.subject_id, str) or not self.subject_id:
            raise ValueError("subject_id must be a non-empty string")
        if not isinstance(self.site_id, str) or not self.site_id.strip(". "):
            raise ValueError("site_id must be a non-empty domain")
        object.__setattr__(self, "site_id", self.site_id.strip().rstrip(".").lower())

    def to_json(self) -> dict:
        return {"subject_id": self.subject_id, "site_id": self.site_id}

    @classmethod
    def from_json(cls, obj: dict) -> "SubjectSiteKey":
        return cls(obj["subject_id"], obj["site_id"])


class ConsentKind(str, enum.Enum):
    NEVER_ASKED = "NeverAsked"
    GIVEN = "Given"
    WITHDRAWN = "Withdrawn"
    REFUSED_BY_USER = "RefusedByUser"


@dataclass(frozen=True)
class ConsentStatus:
    kind: ConsentKind
    at: Optional[_dt.datetime] = None

    def __post_init__(self):
        if (self.kind is ConsentKind.NEVER_ASKED) != (self.at is None):
            raise CorruptState(f"{self.kind.value} status with at={self.at!r}")

    def to_json(self) -> dict:
        out = {"kind": self.kind.value}
        if self.at is not None:
            out["at"] = format_ts(self.at)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ConsentStatus":
        at = obj.get("at")
        return cls(ConsentKind(obj["kind"]), parse_ts(at) if at else None)


NEVER_ASKED = ConsentStatus(ConsentKind.NEVER_ASKED)


class LedgerFlag(str, enum.Enum):
    WITHDRAWAL_INDICATED = "WithdrawalIndicated"
    AMBIGUOUS_CONSENT = "AmbiguousConsent"
    MAY_REQUEST_CONSENT_AGAIN = "MayRequestConsentAgain"


class ConsentClick(str, enum.Enum):
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"


@dataclass(frozen=True)
class VisitEvent:
    signal: SignalState
    at: _dt.datetime
    consent_click: Optional[ConsentClick] = None

    def to_json(self, key: SubjectSiteKey) -> dict:
        out = {"key": key.to_json(), **self.signal.to_json()}
        if self.consent_click is not None:
            out["consent_click"] = self.consent_click.value
        out["at"] = format_ts(self.at)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> tuple[SubjectSiteKey, "VisitEvent"]:
        click = obj.get("consent_click")
        event = cls(
            SignalState.from_json(obj),
            parse_ts(obj["at"]),
            ConsentClick(click) if click else None,
        )
        return SubjectSiteKey.from_json(obj["key"]), event


@dataclass(frozen=True)
class SubjectSiteState:
    last_signal: SignalState = ABSENT
    consent_status: ConsentStatus = NEVER_ASKED
    flags: frozenset = field(default_factory=frozenset)
    visit_count: int = 0
    updated_at: Optional[_dt.datetime] = None

    def to_json(self, key: Optional[SubjectSiteKey] = None) -> dict:
        out = {}
        if key is not None:
            out["key"] = key.to_json()
        out.update({
            "last_signal": self.last_signal.to_json(),
            "consent_status": self.consent_status.to_json(),
            "flags": sorted(f.value for f in self.flags),
            "visit_count": self.visit_count,
            "updated_at": format_ts(self.updated_at) if self.updated_at else None,
        })
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SubjectSiteState":
        updated = obj.get("updated_at")
        return cls(
            last_signal=SignalState.from_json(obj["last_signal"]),
            consent_status=ConsentStatus.from_json(obj["consent_status"]),
            flags=frozenset(LedgerFlag(f) for f in obj.get("flags", ())),
            visit_count=int(obj["visit_count"]),
            updated_at=parse_ts(updated) if updated else None,
        )


ZERO_STATE = SubjectSiteState()


def check_state(state: SubjectSiteState) -> None:
    """Raise CorruptState unless ``state`` is reachable by :func:`record_visit`."""
    flags = state.flags
    kind = state.consent_status.kind
    if not isinstance(state.visit_count, int) or state.visit_count < 0:
        raise CorruptState(f"visit_count {state.visit_count!r}")
    if (state.visit_count == 0) != (state.updated_at is None):
        raise CorruptState("updated_at must be set exactly when visits were recorded")
    if state.visit_count == 0 and (flags or kind is not ConsentKind.NEVER_ASKED
                                   or state.last_signal != ABSENT):
        raise CorruptState("zero-visit state carries history")
    if not all(isinstance(f, LedgerFlag) for f in flags):
        raise CorruptState(f"unknown flags {set(flags)!r}")
    if LedgerFlag.MAY_REQUEST_CONSENT_AGAIN in flags and state.last_signal.is_active:
        raise CorruptState("MayRequestConsentAgain while the signal is active")
    withdrawal = LedgerFlag.WITHDRAWAL_INDICATED in flags
    if withdrawal and kind not in (ConsentKind.WITHDRAWN, ConsentKind.REFUSED_BY_USER):
        raise CorruptState(f"WithdrawalIndicated with status {kind.value}")
    if kind is ConsentKind.WITHDRAWN and not withdrawal:
        raise CorruptState("Withdrawn without a withdrawal indication")
    at = state.consent_status.at
    if at is not None and state.updated_at is not None and at > state.updated_at:
        raise CorruptState("consent status is newer than the state")


def record_visit(key: SubjectSiteKey, prior: SubjectSiteState, event: VisitEvent) -> SubjectSiteState:
    """Fold one visit into the state for ``key``.

    A signal observation alone never moves the status toward Given; only an
    Accepted click without an active signal does.
    """
    if event.at.tzinfo is None:
        raise StaleEvent(f"{key}: naive timestamp {event.at!r}")
    if prior.updated_at is not None and not event.at > prior.updated_at:
        raise StaleEvent(f"{key}: event at {format_ts(event.at)} is not after "
                         f"{format_ts(prior.updated_at)}")
    check_state(prior)

    active = event.signal.is_active
    status = prior.consent_status
    flags = set(prior.flags)
    flags.discard(LedgerFlag.MAY_REQUEST_CONSENT_AGAIN)

    if active and status.kind is ConsentKind.GIVEN:
        status = ConsentStatus(ConsentKind.WITHDRAWN, event.at)
        flags.add(LedgerFlag.WITHDRAWAL_INDICATED)
    if active and event.consent_click is ConsentClick.ACCEPTED:
        # recorded, not resolved
        flags.add(LedgerFlag.AMBIGUOUS_CONSENT)
    if prior.last_signal.is_active and not active:
        flags.add(LedgerFlag.MAY_REQUEST_CONSENT_AGAIN)
    if event.consent_click is ConsentClick.ACCEPTED and not active:
        status = ConsentStatus(ConsentKind.GIVEN, event.at)
        flags.discard(LedgerFlag.AMBIGUOUS_CONSENT)
        flags.discard(LedgerFlag.WITHDRAWAL_INDICATED)
    elif event.consent_click is ConsentClick.REJECTED:
        status = ConsentStatus(ConsentKind.REFUSED_BY_USER, event.at)
        flags.discard(LedgerFlag.AMBIGUOUS_CONSENT)

    return SubjectSiteState(
        last_signal=event.signal,
        consent_status=status,
        flags=frozenset(flags),
        visit_count=prior.visit_count + 1,
        updated_at=event.at,
    )


def replay(key: SubjectSiteKey, events: Iterable[VisitEvent],
           start: SubjectSiteState = ZERO_STATE) -> SubjectSiteState:
    state = start
    for event in events:
        state = record_visit(key, state, event)
    return state


class LedgerStore:
    """Durable ledger backed by ``<directory>/events.ndjson``.

    ``keep_snapshots`` bounds how many snapshot files are retained; the
    event log itself is never pruned.
    """

    def __init__(self, directory, keep_snapshots: Optional[int] = None, use_snapshot: bool = True):
        if keep_snapshots is not None and keep_snapshots < 1:
            raise ValueError("keep_snapshots must be >= 1")
        self.directory = Path(directory)
        self.keep_snapshots = keep_snapshots
        self._states: dict[SubjectSiteKey, SubjectSiteState] = {}
        self._key_locks: dict[SubjectSiteKey, threading.Lock] = {}
        self._meta_lock = threading.Lock()
        self._append_lock = threading.Lock()
        self._log_lines = 0
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
            self._load(use_snapshot)
        except OSError as exc:
            raise StorageUnavailable(f"ledger at {self.directory}: {exc}") from exc

    @property
    def log_path(self) -> Path:
        return self.directory / EVENT_LOG_NAME

    @property
    def snapshot_dir(self) -> Path:
        return self.directory / SNAPSHOT_DIR_NAME

    def _snapshots(self) -> list[Path]:
        if not self.snapshot_dir.is_dir():
            return []
        return sorted(self.snapshot_dir.glob("snapshot-*.ndjson"))

    def _load(self, use_snapshot: bool) -> None:
        skip = 0
        snaps = self._snapshots() if use_snapshot else []
        if snaps:
            skip, self._states = read_snapshot(snaps[-1])
        if not self.log_path.exists():
            if skip:
                raise CorruptState(f"snapshot covers {skip} events but the log is missing")
            return
        with self.log_path.open("r", encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        # a crash mid-append leaves one unterminated trailing line
        if lines and lines[-1]:
            logger.warning("ignoring truncated trailing record in %s", self.log_path)
        lines = lines[:-1]
        if skip > len(lines):
            raise CorruptState("snapshot is ahead of the event log")
        for lineno, line in enumerate(lines[skip:], start=skip + 1):
            try:
                key, event = VisitEvent.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptState(f"{self.log_path}:{lineno}: {exc}") from exc
            self._states[key] = record_visit(key, self._states.get(key, ZERO_STATE), event)
        self._log_lines = len(lines)

    def _lock_for(self, key: SubjectSiteKey) -> threading.Lock:
        with self._meta_lock:
            lock = self._key_locks.get(key)
            if lock is None:
                lock = self._key_locks[key] = threading.Lock()
            return lock

    def current_status(self, key: SubjectSiteKey) -> SubjectSiteState:
        return self._states.get(key, ZERO_STATE)

    def keys(self) -> list[SubjectSiteKey]:
        return list(self._states)

    def record(self, key: SubjectSiteKey, event: VisitEvent) -> SubjectSiteState:
        with self._lock_for(key):
            state = record_visit(key, self.current_status(key), event)
            line = json.dumps(event.to_json(key), separators=(",", ":")) + "\n"
            try:
                with self._append_lock:
                    with self.log_path.open("a", encoding="utf-8") as fh:
                        fh.write(line)
                        fh.flush()
                        os.fsync(fh.fileno())
                    self._log_lines += 1
            except OSError as exc:
                raise StorageUnavailable(f"cannot append to {self.log_path}: {exc}") from exc
            self._states[key] = state
            return state

    def events(self, key: Optional[SubjectSiteKey] = None) -> list[tuple[SubjectSiteKey, VisitEvent]]:
        if not self.log_path.exists():
            return []
        out = []
        with self.log_path.open("r", encoding="utf-8") as fh:
            for line in fh:
                if not line.endswith("\n"):
                    break
                k, e = VisitEvent.from_json(json.loads(line))
                if key is None or k == key:
                    out.append((k, e))
        return out

    def write_snapshot(self) -> Path:
        with self._append_lock:
            states = dict(self._states)
            covered = self._log_lines
        try:
            self.snapshot_dir.mkdir(exist_ok=True)
            snaps = self._snapshots()
            seq = int(snaps[-1].stem.split("-")[1]) + 1 if snaps else 1
            path = self.snapshot_dir / f"snapshot-{seq:06d}.ndjson"
            tmp = path.with_suffix(".tmp")
            with tmp.open("w", encoding="utf-8") as fh:
                fh.write(json.dumps({"log_lines": covered}) + "\n")
                for key in sorted(states, key=lambda k: (k.site_id, k.subject_id)):
                    fh.write(json.dumps(states[key].to_json(key), separators=(",", ":")) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
            if self.keep_snapshots is not None:
                for old in self._snapshots()[:-self.keep_snapshots]:
                    old.unlink()
        except OSError as exc:
            raise StorageUnavailable(f"cannot write snapshot: {exc}") from exc
        return path


def read_snapshot(path) -> tuple[int, dict[SubjectSiteKey, SubjectSiteState]]:
    """Return (event-log lines covered, states) from a snapshot file."""
    states = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        for line in fh:
            obj = json.loads(line)
            key = SubjectSiteKey.from_json(obj["key"])
            state = SubjectSiteState.from_json(obj)
            check_state(state)
            states[key] = state
    return int(header["log_lines"]), states

