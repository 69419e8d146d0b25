"""Global Privacy Control enforcement toolkit for EU data protection law."""
from .engine import (
    BannerAction,
    DecisionInput,
    Directive,
    Effect,
    GroundsAssessment,
    LegalBasis,
    Note,
    ProcessingActivity,
    banner_decision,
    decide,
    detect_consent_conflict,
    enumerate_decision_table,
    in_gpc_scope,
)
from .roles import EntityActivityBinding, PartyRole, classify, split_roles
from .signal import (
    ABSENT,
    ACTIVE,
    SignalState,
    WellKnownRecord,
    emit_signal,
    parse_signal,
    parse_well_known,
    serialize_well_known,
)

__version__ = "0.1.0"
