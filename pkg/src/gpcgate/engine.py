"""Decision core mapping a GPC observation onto GDPR consequences.

All functions are pure and stateless. The only history-dependent output
(re-asking for consent after the signal disappears) lives in
:mod:`gpcgate.ledger`, never here.
"""
from __future__ import annotations

import csv
import enum
import io
import itertools
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .roles import PartyRole
from .signal import ABSENT, ACTIVE, SignalState


class InvalidInput(ValueError):
    pass


class IoFailure(OSError):
    pass


class LegalBasis(str, enum.Enum):
    CONSENT = "Consent"
    CONTRACT_PERFORMANCE = "ContractPerformance"
    LEGITIMATE_INTERESTS = "LegitimateInterests"
    LEGAL_OBLIGATION = "LegalObligation"
    VITAL_INTERESTS = "VitalInterests"
    PUBLIC_INTEREST_OR_AUTHORITY = "PublicInterestOrAuthority"


class ProcessingActivity(str, enum.Enum):
    SELL_TO_THIRD_PARTY = "SellToThirdParty"
    SHARE_WITH_THIRD_PARTY = "ShareWithThirdParty"
    CROSS_CONTEXT_AD_TARGETING = "CrossContextAdTargeting"
    FIRST_PARTY_OWN_PROCESSING = "FirstPartyOwnProcessing"
    COLLECTION_FROM_SUBJECT = "CollectionFromSubject"


# Activities the signal speaks to: selling, sharing, cross-context ads.
RESTRICTED_ACTIVITIES = frozenset({
    ProcessingActivity.SELL_TO_THIRD_PARTY,
    ProcessingActivity.SHARE_WITH_THIRD_PARTY,
    ProcessingActivity.CROSS_CONTEXT_AD_TARGETING,
})

NON_COMMERCIAL_BASES = frozenset({
    LegalBasis.LEGAL_OBLIGATION,
    LegalBasis.VITAL_INTERESTS,
    LegalBasis.PUBLIC_INTEREST_OR_AUTHORITY,
})


class Effect(str, enum.Enum):
    NO_EFFECT = "NoEffect"
    HALT_SHARING_CONSENT_WITHDRAWAL = "HaltSharing_ConsentWithdrawal"
    HALT_SHARING_OBJECTION = "HaltSharing_Objection"
    OBJECTION_REFUSED_DEMONSTRATION_REQUIRED = "ObjectionRefused_DemonstrationRequired"
    OUT_OF_SCOPE = "OutOfScope"

    @property
    def halts_sharing(self) -> bool:
        return self in (Effect.HALT_SHARING_CONSENT_WITHDRAWAL, Effect.HALT_SHARING_OBJECTION)


class Note(str, enum.Enum):
    MAY_REQUEST_CONSENT_AGAIN = "MayRequestConsentAgain"
    AMBIGUOUS_CONSENT_DETECTED = "AmbiguousConsentDetected"


class BannerAction(str, enum.Enum):
    SUPPRESS_BANNER = "SuppressBanner"
    SHOW_BANNER = "ShowBanner"


@dataclass(frozen=True)
class GroundsAssessment:
    """The controller's own verdict on the legitimate-interests balancing
    test. The engine never computes this; it only enforces what follows.
    """

    compelling: bool
    demonstration: str = ""

    def __post_init__(self):
        if not isinstance(self.compelling, bool):
            raise InvalidInput("compelling must be a boolean")
        if self.compelling and not (self.demonstration or "").strip():
            raise InvalidInput("compelling grounds require a demonstration")

    @classmethod
    def from_json(cls, obj: Optional[dict]) -> Optional["GroundsAssessment"]:
        if obj is None:
            return None
        return cls(obj["compelling"], obj.get("demonstration", ""))

    def to_json(self) -> dict:
        return {"compelling": self.compelling, "demonstration": self.demonstration}


@dataclass(frozen=True)
class DecisionInput:
    signal: SignalState
    role: PartyRole
    basis: LegalBasis
    activity: ProcessingActivity
    prior_consent_on_record: bool = False
    grounds: Optional[GroundsAssessment] = None

    def validate(self) -> None:
        if not isinstance(self.signal, SignalState):
            raise InvalidInput(f"signal must be a SignalState, got {self.signal!r}")
        for value, kind in ((self.role, PartyRole), (self.basis, LegalBasis),
                            (self.activity, ProcessingActivity)):
            if not isinstance(value, kind):
                raise InvalidInput(f"expected {kind.__name__}, got {value!r}")
        if self.grounds is not None:
            if self.basis is not LegalBasis.LEGITIMATE_INTERESTS:
                raise InvalidInput("grounds apply to legitimate interests only")
            if not isinstance(self.grounds, GroundsAssessment):
                raise InvalidInput(f"grounds must be a GroundsAssessment, got {self.grounds!r}")


@dataclass(frozen=True)
class Directive:
    """What the evaluated flow must do from now on. Never retroactive."""

    effect: Effect
    notes: tuple[Note, ...] = ()
    demonstration: Optional[str] = None

    def __post_init__(self):
        refused = self.effect is Effect.OBJECTION_REFUSED_DEMONSTRATION_REQUIRED
        if refused and not (self.demonstration or "").strip():
            raise ValueError("a refused objection must carry its demonstration")
        if not refused and self.demonstration is not None:
            raise ValueError("demonstration only accompanies a refused objection")


def in_gpc_scope(activity: ProcessingActivity, role: PartyRole) -> bool:
    # Inapplicable to the first party's own processing, indiscriminate
    # toward third parties; processors are not third parties.
    return activity in RESTRICTED_ACTIVITIES and role is PartyRole.THIRD_PARTY


def decide(input: DecisionInput) -> Directive:
    input.validate()
    if not input.signal.is_active:
        # Absent or malformed: no preference is ever inferred.
        return Directive(Effect.NO_EFFECT)
    basis = input.basis
    if basis is LegalBasis.CONTRACT_PERFORMANCE or basis in NON_COMMERCIAL_BASES:
        # No right for the signal to exercise, whoever the counterparty is.
        return Directive(Effect.NO_EFFECT)
    if not in_gpc_scope(input.activity, input.role):
        return Directive(Effect.OUT_OF_SCOPE)
    if basis is LegalBasis.CONSENT:
        # Withdrawal even without prior consent on record: a standing
        # refusal, and withdrawing nothing is idempotent.
        return Directive(Effect.HALT_SHARING_CONSENT_WITHDRAWAL)
    if basis is LegalBasis.LEGITIMATE_INTERESTS:
        if input.grounds is not None and input.grounds.compelling:
            return Directive(Effect.OBJECTION_REFUSED_DEMONSTRATION_REQUIRED,
                             demonstration=input.grounds.demonstration)
        return Directive(Effect.HALT_SHARING_OBJECTION)
    raise InvalidInput(f"unhandled basis {basis!r}")  # pragma: no cover


@dataclass(frozen=True)
class BannerPurpose:
    purpose_id: str
    activity: ProcessingActivity
    role: PartyRole
    basis: LegalBasis
    grounds: Optional[GroundsAssessment] = None


def _as_purpose(p) -> BannerPurpose:
    if isinstance(p, BannerPurpose):
        return p
    try:
        return BannerPurpose(*p)
    except TypeError as exc:
        raise InvalidInput(f"bad purpose tuple {p!r}: {exc}") from None


def banner_decision(
    signal: SignalState,
    purposes: Iterable,
    confirm_withdrawal_popup: bool = False,
) -> dict[str, BannerAction]:
    """Per-purpose verdict on whether the consent popup still needs showing.

    A purpose is suppressed only when the signal already settled it (consent
    withdrawn, or objection honoured). With ``confirm_withdrawal_popup`` the
    site asks the subject to confirm a withdrawal, so those stay visible.
    """
    items = [_as_purpose(p) for p in purposes]
    if not items:
        raise InvalidInput("banner_decision needs at least one purpose")
    out: dict[str, BannerAction] = {}
    for p in items:
        if p.purpose_id in out:
            raise InvalidInput(f"duplicate purpose id {p.purpose_id!r}")
        d = decide(DecisionInput(signal, p.role, p.basis, p.activity, grounds=p.grounds))
        suppress = d.effect.halts_sharing and not (
            confirm_withdrawal_popup and d.effect is Effect.HALT_SHARING_CONSENT_WITHDRAWAL
        )
        out[p.purpose_id] = BannerAction.SUPPRESS_BANNER if suppress else BannerAction.SHOW_BANNER
    return out


def detect_consent_conflict(signal: SignalState, consent_click: bool) -> Optional[Note]:
    # Flagged only; the two expressions of will are never ranked.
    if signal.is_active and consent_click:
        return Note.AMBIGUOUS_CONSENT_DETECTED
    return None


# Canonical demonstration text for the enumerated table.
TABLE_DEMONSTRATION = "compelling legitimate grounds demonstrated"

GROUNDS_VARIANTS: tuple[tuple[str, Optional[GroundsAssessment]], ...] = (
    ("absent", None),
    ("compelling", GroundsAssessment(True, TABLE_DEMONSTRATION)),
    ("not_compelling", GroundsAssessment(False)),
)


def grounds_label(basis: LegalBasis, grounds: Optional[GroundsAssessment]) -> str:
    if basis is not LegalBasis.LEGITIMATE_INTERESTS:
        return ""
    if grounds is None:
        return "absent"
    return "compelling" if grounds.compelling else "not_compelling"


def _basis_variants() -> list[tuple[LegalBasis, Optional[GroundsAssessment]]]:
    out = []
    for basis in LegalBasis:
        if basis is LegalBasis.LEGITIMATE_INTERESTS:
            out.extend((basis, g) for _, g in GROUNDS_VARIANTS)
        else:
            out.append((basis, None))
    return out


def enumerate_decision_table() -> list[tuple[DecisionInput, Directive]]:
    """Every canonical input with its directive, in a fixed order:
    signal, role, basis (with grounds variants), activity."""
    rows = []
    for signal, role, (basis, grounds), activity in itertools.product(
        (ACTIVE, ABSENT), PartyRole, _basis_variants(), ProcessingActivity
    ):
        inp = DecisionInput(signal, role, basis, activity, grounds=grounds)
        rows.append((inp, decide(inp)))
    return rows


TABLE_COLUMNS = ("signal", "role", "basis", "activity", "grounds", "effect", "notes")


def table_row(inp: DecisionInput, directive: Directive) -> tuple[str, ...]:
    return (
        inp.signal.kind.value,
        inp.role.value,
        inp.basis.value,
        inp.activity.value,
        grounds_label(inp.basis, inp.grounds),
        directive.effect.value,
        ";".join(n.value for n in directive.notes),
    )


def decision_table_csv(rows: Optional[Sequence[tuple[DecisionInput, Directive]]] = None) -> str:
    if rows is None:
        rows = enumerate_decision_table()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    writer.writerows(table_row(i, d) for i, d in rows)
    return buf.getvalue()


def write_decision_table(path) -> Path:
    path = Path(path)
    try:
        path.write_text(decision_table_csv(), encoding="utf-8", newline="")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path
