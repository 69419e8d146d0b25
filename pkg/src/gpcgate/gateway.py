"""HTTP decision gateway: evaluates each request against a site policy.

Decisions leave the gateway as response headers and as one audit record
per request; origin response bodies are never touched. Besides decisions
the gateway serves ``/.well-known/gpc.json``.

Request headers understood on top of ``Sec-GPC``:

``X-GPC-Gate-Subject``
    first-party-scoped subject id (session or account); enables the ledger.
``X-GPC-Gate-Consent``
    ``Accepted`` or ``Rejected`` when the request reports a popup click.
``X-Request-Id``
    echoed into the audit record; generated when missing.
"""
from __future__ import annotations

import datetime as _dt
import json
import logging
import threading
import uuid
from collections.abc import Mapping
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from .engine import (
    BannerAction,
    BannerPurpose,
    DecisionInput,
    Directive,
    Effect,
    GroundsAssessment,
    InvalidInput,
    LegalBasis,
    Note,
    ProcessingActivity,
    banner_decision,
    decide,
    detect_consent_conflict,
)
from .ledger import (
    ConsentClick,
    ConsentKind,
    LedgerStore,
    StorageUnavailable,
    SubjectSiteKey,
    SubjectSiteState,
    VisitEvent,
)
from .roles import EntityActivityBinding, InconsistentBinding, PartyRole, split_roles
from .signal import (
    WELL_KNOWN_CONTENT_TYPE,
    WELL_KNOWN_PATH,
    SignalState,
    WellKnownRecord,
    parse_signal,
    serialize_well_known,
)
from .timefmt import format_ts, utcnow

logger = logging.getLogger(__name__)

DECISION_HEADER = "X-GPC-Gate-Decision"
BANNER_HEADER = "X-GPC-Gate-Banner"
FLAGS_HEADER = "X-GPC-Gate-Flags"
SUBJECT_HEADER = "X-GPC-Gate-Subject"
CONSENT_HEADER = "X-GPC-Gate-Consent"
REQUEST_ID_HEADER = "X-Request-Id"

WARN_LEDGER_UNAVAILABLE = "LedgerUnavailable"
WARN_INVALID_SIGNAL = "InvalidSignal"


class PolicyInvalid(ValueError):
    pass


@dataclass(frozen=True)
class Purpose:
    purpose_id: str
    activity: ProcessingActivity
    counterparty_entity: str
    basis: LegalBasis
    grounds: Optional[GroundsAssessment] = None


@dataclass(frozen=True)
class PolicyOptions:
    confirm_withdrawal_popup: bool = False


@dataclass(frozen=True)
class SitePolicy:
    """One site's declared purposes and role facts.

    A binding's ``activity_id`` names the purpose it describes, so every
    purpose needs a binding for its counterparty with that id.
    """

    site: str
    policy_version: str
    purposes: tuple[Purpose, ...]
    bindings: tuple[EntityActivityBinding, ...] = ()
    options: PolicyOptions = field(default_factory=PolicyOptions)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.site or not isinstance(self.site, str):
            raise PolicyInvalid("site is required")
        if not self.policy_version or not isinstance(self.policy_version, str):
            raise PolicyInvalid("policy_version is required")
        if not self.purposes:
            raise PolicyInvalid("at least one purpose is required")
        ids = [p.purpose_id for p in self.purposes]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise PolicyInvalid(f"duplicate purpose ids: {', '.join(dupes)}")
        roles = self._roles()
        for p in self.purposes:
            if (p.counterparty_entity, p.purpose_id) not in roles:
                raise PolicyInvalid(
                    f"purpose {p.purpose_id!r}: no binding for {p.counterparty_entity!r}"
                )
            if p.grounds is not None and p.basis is not LegalBasis.LEGITIMATE_INTERESTS:
                raise PolicyInvalid(f"purpose {p.purpose_id!r}: grounds need legitimate interests")

    def _roles(self) -> dict[tuple[str, str], PartyRole]:
        by_entity: dict[str, list[EntityActivityBinding]] = {}
        for b in self.bindings:
            by_entity.setdefault(b.entity_id, []).append(b)
        out = {}
        for entity, bindings in by_entity.items():
            try:
                split = split_roles(entity, bindings)
            except (InconsistentBinding, ValueError) as exc:
                raise PolicyInvalid(f"entity {entity!r}: {exc}") from exc
            out.update({(entity, activity): role for activity, role in split.items()})
        return out

    def roles(self) -> dict[str, PartyRole]:
        """purpose_id -> the counterparty's role for that purpose."""
        by_pair = self._roles()
        return {p.purpose_id: by_pair[(p.counterparty_entity, p.purpose_id)] for p in self.purposes}

    @classmethod
    def from_json(cls, obj: Mapping) -> "SitePolicy":
        try:
            purposes = tuple(
                Purpose(
                    purpose_id=p["purpose_id"],
                    activity=ProcessingActivity(p["activity"]),
                    counterparty_entity=p["counterparty_entity"],
                    basis=LegalBasis(p["basis"]),
                    grounds=GroundsAssessment.from_json(p.get("grounds")),
                )
                for p in obj["purposes"]
            )
            bindings = tuple(EntityActivityBinding.from_json(b) for b in obj.get("bindings", ()))
            options = PolicyOptions(**obj.get("options", {}))
            return cls(
                site=obj["site"],
                policy_version=obj["policy_version"],
                purposes=purposes,
                bindings=bindings,
                options=options,
            )
        except PolicyInvalid:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise PolicyInvalid(f"malformed policy: {exc!r}") from exc

    def to_json(self) -> dict:
        return {
            "site": self.site,
            "policy_version": self.policy_version,
            "purposes": [
                {
                    "purpose_id": p.purpose_id,
                    "activity": p.activity.value,
                    "counterparty_entity": p.counterparty_entity,
                    "basis": p.basis.value,
                    **({"grounds": p.grounds.to_json()} if p.grounds else {}),
                }
                for p in self.purposes
            ],
            "bindings": [
                {
                    "entity_id": b.entity_id,
                    "activity_id": b.activity_id,
                    "determines_purposes_and_means": b.determines_purposes_and_means,
                    "acts_on_behalf_of_controller": b.acts_on_behalf_of_controller,
                    "is_intended_interaction_target": b.is_intended_interaction_target,
                }
                for b in self.bindings
            ],
            "options": {"confirm_withdrawal_popup": self.options.confirm_withdrawal_popup},
        }


def load_policy(path) -> SitePolicy:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise PolicyInvalid(f"cannot read policy {path}: {exc}") from exc
    return SitePolicy.from_json(obj)


class AuditLog:
    """Append-only newline-delimited audit sink, flushed per record.

    Without a path, records are kept in ``self.records`` unless
    ``keep_records`` is false, in which case they are only counted.
    """

    def __init__(self, path=None, keep_records: Optional[bool] = None):
        self.path = Path(path) if path is not None else None
        self.keep_records = self.path is None if keep_records is None else keep_records
        self.records: list[dict] = []
        self._lock = threading.Lock()
        self.count = 0

    def append(self, record: dict) -> None:
        line = json.dumps(record, separators=(",", ":"), sort_keys=False) + "\n"
        with self._lock:
            if self.keep_records:
                self.records.append(record)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line)
                    fh.flush()
            self.count += 1

    def read(self) -> list[dict]:
        if self.path is None:
            return list(self.records)
        with self.path.open("r", encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


@dataclass
class Evaluation:
    signal: SignalState
    directives: dict[str, Directive]
    banners: dict[str, BannerAction]
    ledger_state: Optional[SubjectSiteState]
    audit: dict
    response_headers: dict[str, str]


def decision_header(directives: Mapping[str, Directive]) -> str:
    return ";".join(f"{pid}={d.effect.value}" for pid, d in directives.items())


def parse_decision_header(value: str) -> dict[str, Effect]:
    out = {}
    for item in filter(None, value.split(";")):
        pid, _, token = item.partition("=")
        out[pid] = Effect(token)
    return out


def _parse_click(value) -> Optional[ConsentClick]:
    if value is None:
        return None
    if isinstance(value, ConsentClick):
        return value
    text = str(value).strip().lower()
    for click in ConsentClick:
        if click.value.lower() == text:
            return click
    return None


def engine_directives(signal: SignalState, policy: SitePolicy,
                      prior_consent_on_record: bool = False) -> dict[str, Directive]:
    """Direct engine composition for every purpose of ``policy``."""
    roles = policy.roles()
    return {
        p.purpose_id: decide(DecisionInput(
            signal, roles[p.purpose_id], p.basis, p.activity, prior_consent_on_record, p.grounds
        ))
        for p in policy.purposes
    }


def evaluate_request(
    headers,
    subject_key: Optional[SubjectSiteKey],
    policy: SitePolicy,
    ledger: Optional[LedgerStore] = None,
    audit: Optional[AuditLog] = None,
    consent_click=None,
    request_id: Optional[str] = None,
    now: Optional[_dt.datetime] = None,
) -> Evaluation:
    """Evaluate one request: signal, roles, per-purpose directives, banner
    verdicts, ledger update (when a ledger and subject are present) and a
    single audit record.

    A ledger failure degrades to stateless evaluation; the audit record
    carries a ``LedgerUnavailable`` warning.
    """
    signal = parse_signal(headers)
    click = _parse_click(consent_click)
    at = now or utcnow()
    warnings: list[str] = []
    if signal.raw is not None:
        warnings.append(WARN_INVALID_SIGNAL)

    prior: Optional[SubjectSiteState] = None
    if ledger is not None and subject_key is not None:
        prior = ledger.current_status(subject_key)
    prior_consent = prior is not None and prior.consent_status.kind is ConsentKind.GIVEN

    roles = policy.roles()
    directives = engine_directives(signal, policy, prior_consent)
    banners = banner_decision(
        signal,
        [BannerPurpose(p.purpose_id, p.activity, roles[p.purpose_id], p.basis, p.grounds)
         for p in policy.purposes],
        policy.options.confirm_withdrawal_popup,
    )
    notes: list[Note] = []
    conflict = detect_consent_conflict(signal, click is ConsentClick.ACCEPTED)
    if conflict is not None:
        notes.append(conflict)

    state: Optional[SubjectSiteState] = None
    if prior is not None:
        # keep per-key timestamps strictly increasing under clock ties
        if prior.updated_at is not None and at <= prior.updated_at:
            at = prior.updated_at + _dt.timedelta(microseconds=1)
        try:
            state = ledger.record(subject_key, VisitEvent(signal, at, click))
        except StorageUnavailable as exc:
            logger.warning("ledger unavailable, evaluating statelessly: %s", exc)
            warnings.append(WARN_LEDGER_UNAVAILABLE)
    ledger_flags = sorted(f.value for f in state.flags) if state is not None else []

    record = {
        "at": format_ts(at),
        "request_id": request_id or uuid.uuid4().hex,
        "policy_version": policy.policy_version,
        "site": policy.site,
        "subject": subject_key.to_json() if subject_key is not None else None,
        **signal.to_json(),
        "consent_click": click.value if click else None,
        "purposes": [
            {
                "purpose_id": p.purpose_id,
                "counterparty_entity": p.counterparty_entity,
                "role": roles[p.purpose_id].value,
                "basis": p.basis.value,
                "activity": p.activity.value,
                "grounds": p.grounds.to_json() if p.grounds else None,
                "prior_consent_on_record": prior_consent,
                "effect": directives[p.purpose_id].effect.value,
                "demonstration": directives[p.purpose_id].demonstration,
            }
            for p in policy.purposes
        ],
        "banner": {pid: action.value for pid, action in banners.items()},
        "confirm_withdrawal_popup": policy.options.confirm_withdrawal_popup,
        "notes": [n.value for n in notes],
        "ledger_flags": ledger_flags,
        "warnings": warnings,
    }
    if audit is not None:
        audit.append(record)

    response_headers = {
        DECISION_HEADER: decision_header(directives),
        BANNER_HEADER: ";".join(f"{pid}={a.value}" for pid, a in banners.items()),
    }
    flags = ledger_flags + [n.value for n in notes] + warnings
    if flags:
        response_headers[FLAGS_HEADER] = ";".join(flags)
    return Evaluation(signal, directives, banners, state, record, response_headers)


def replay_audit_record(record: Mapping) -> list[str]:
    """Re-derive a recorded request's decisions from the record alone.

    Returns human-readable mismatches; an empty list means the record
    reproduces.
    """
    signal = SignalState.from_json(record)
    problems = []
    purposes = []
    for p in record["purposes"]:
        role = PartyRole(p["role"])
        basis = LegalBasis(p["basis"])
        activity = ProcessingActivity(p["activity"])
        grounds = GroundsAssessment.from_json(p.get("grounds"))
        d = decide(DecisionInput(signal, role, basis, activity, p["prior_consent_on_record"], grounds))
        if d.effect.value != p["effect"] or d.demonstration != p.get("demonstration"):
            problems.append(f"{p['purpose_id']}: recorded {p['effect']}, replayed {d.effect.value}")
        purposes.append(BannerPurpose(p["purpose_id"], activity, role, basis, grounds))
    banners = banner_decision(signal, purposes, record.get("confirm_withdrawal_popup", False))
    for pid, action in banners.items():
        if record["banner"].get(pid) != action.value:
            problems.append(f"{pid}: banner recorded {record['banner'].get(pid)}, replayed {action.value}")
    click = _parse_click(record.get("consent_click"))
    conflict = detect_consent_conflict(signal, click is ConsentClick.ACCEPTED)
    replayed_notes = [conflict.value] if conflict else []
    if replayed_notes != record.get("notes", []):
        problems.append(f"notes recorded {record.get('notes')}, replayed {replayed_notes}")
    return problems


@dataclass(frozen=True)
class WellKnownResponse:
    status: int
    headers: dict[str, str]
    body: bytes


def serve_well_known(record: WellKnownRecord, method: str = "GET") -> WellKnownResponse:
    body = serialize_well_known(record)
    headers = {"Content-Type": WELL_KNOWN_CONTENT_TYPE, "Content-Length": str(len(body))}
    if method.upper() == "HEAD":
        return WellKnownResponse(200, headers, b"")
    return WellKnownResponse(200, headers, body)


class Gateway:
    """Everything one running gateway needs; shared by handler threads."""

    def __init__(self, policy: SitePolicy, ledger: Optional[LedgerStore] = None,
                 audit: Optional[AuditLog] = None,
                 well_known: Optional[WellKnownRecord] = WellKnownRecord(True)):
        self.policy = policy
        self.ledger = ledger
        self.audit = audit if audit is not None else AuditLog()
        self.well_known = well_known

    def handle(self, method: str, path: str, headers) -> tuple[int, dict[str, str], bytes]:
        if path.split("?", 1)[0] == WELL_KNOWN_PATH and method in ("GET", "HEAD"):
            if self.well_known is None:
                return 404, {"Content-Length": "0"}, b""
            r = serve_well_known(self.well_known, method)
            return r.status, r.headers, r.body
        subject = headers.get(SUBJECT_HEADER)
        key = None
        if subject:
            try:
                key = SubjectSiteKey(subject, self.policy.site)
            except ValueError:
                key = None
        ev = evaluate_request(
            headers, key, self.policy, self.ledger, self.audit,
            consent_click=headers.get(CONSENT_HEADER),
            request_id=headers.get(REQUEST_ID_HEADER),
        )
        return 204, ev.response_headers, b""


def make_handler(gateway: Gateway):
    class GatewayHandler(BaseHTTPRequestHandler):
        server_version = "gpcgate"
        protocol_version = "HTTP/1.1"

        def _respond(self):
            length = int(self.headers.get("Content-Length") or 0)
            if length:
                self.rfile.read(length)
            try:
                status, headers, body = gateway.handle(self.command, self.path, self.headers)
            except InvalidInput as exc:
                status, headers, body = 500, {}, str(exc).encode()
            self.send_response(status)
            for name, value in headers.items():
                self.send_header(name, value)
            if "Content-Length" not in headers and status != 204:
                self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            if body and self.command != "HEAD":
                self.wfile.write(body)

        do_GET = do_HEAD = do_POST = do_PUT = do_DELETE = do_PATCH = do_OPTIONS = _respond

        def log_message(self, fmt, *args):
            logger.debug("%s %s", self.address_string(), fmt % args)

    return GatewayHandler


def make_server(gateway: Gateway, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    server = ThreadingHTTPServer((host, port), make_handler(gateway))
    server.daemon_threads = True
    return server
