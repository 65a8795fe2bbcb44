from .chain import (
    ZERO_HASH,
    Action,
    LogChain,
    LogEntry,
    Violation,
    canonical_bytes,
    verify_chain,
    verify_jsonl,
)
from .policy import (
    AccessRequest,
    Decision,
    Policy,
    PolicyDecision,
    Role,
    Rule,
    RuleChange,
    consent_update,
    default_policy,
    evaluate_policy,
    redact_view,
)
from .service import record_access, record_consent, replay_audit

__all__ = [
    "ZERO_HASH",
    "AccessRequest",
    "Action",
    "Decision",
    "LogChain",
    "LogEntry",
    "Policy",
    "PolicyDecision",
    "Role",
    "Rule",
    "RuleChange",
    "Violation",
    "canonical_bytes",
    "consent_update",
    "default_policy",
    "evaluate_policy",
    "record_access",
    "record_consent",
    "redact_view",
    "replay_audit",
    "verify_chain",
    "verify_jsonl",
]
