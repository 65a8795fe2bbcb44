"""Field-level access policy, enforcement decisions and consent changes.

A rule is keyed by ``(role, field)`` and optionally scoped to a single
record. Lookup tries the record-scoped rule first, then the global rule,
and falls back to deny. Patients may only read their own record (record id
equal to their actor id) and may only change rules scoped to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from ..dataset import PatientRecord
from ..errors import Unauthorized

RECORD_FIELDS = ("age", "sex", "bmi", "children", "smoker", "region", "charges", "ssn")
CLINICAL_FIELDS = ("age", "sex", "bmi", "children", "smoker", "region")


class Role(str, Enum):
    PATIENT = "patient"
    PHYSICIAN = "physician"
    INSURER = "insurer"
    PHARMACY = "pharmacy"
    ADMIN = "admin"
    VERIFIER = "verifier"


class Decision(str, Enum):
    ALLOW = "allow"
    DENY = "deny"


@dataclass(frozen=True)
class Rule:
    decision: Decision
    obligations: tuple[str, ...] = ()


DEFAULT_RULE = Rule(Decision.DENY)

RuleKey = tuple  # (role, field, record_id or None)


@dataclass(frozen=True)
class Policy:
    rules: Mapping[RuleKey, Rule] = field(default_factory=dict)

    def rule_for(self, role: str, field_name: str, record_id: str | None = None) -> Rule:
        if record_id is not None:
            scoped = self.rules.get((role, field_name, record_id))
            if scoped is not None:
                return scoped
        return self.rules.get((role, field_name, None), DEFAULT_RULE)

    def with_rule(self, role: str, field_name: str, rule: Rule, record_id: str | None = None) -> Policy:
        return Policy({**self.rules, (role, field_name, record_id): rule})

    def to_json(self) -> str:
        out = {}
        for (role, fname, rec), rule in sorted(self.rules.items(), key=lambda kv: _sort_key(kv[0])):
            name = f"{role}.{fname}" + (f"@{rec}" if rec is not None else "")
            out[name] = {"decision": rule.decision.value, "obligations": list(rule.obligations)}
        return json.dumps(out, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Policy:
        rules = {}
        for name, body in json.loads(text).items():
            target, _, rec = name.partition("@")
            role, dot, fname = target.partition(".")
            if not dot or not role or not fname:
                raise ValueError(f"policy key {name!r} is not 'role.field' or 'role.field@record'")
            rules[(role, fname, rec or None)] = Rule(
                Decision(body["decision"]), tuple(body.get("obligations", ()))
            )
        return cls(rules)


def _sort_key(key: RuleKey):
    role, fname, rec = key
    return (role, fname, "" if rec is None else rec)


def default_policy() -> Policy:
    """Least-privilege matrix: insurers see billing identity (SSN, charges),
    physicians see clinical fields only, pharmacies see smoker status,
    patients see their whole own record, everything else is denied."""
    rules = {}
    for f in ("ssn", "charges"):
        rules[(Role.INSURER.value, f, None)] = Rule(Decision.ALLOW, ("billing-purpose-only",))
    for f in CLINICAL_FIELDS:
        rules[(Role.PHYSICIAN.value, f, None)] = Rule(Decision.ALLOW)
    rules[(Role.PHARMACY.value, "smoker", None)] = Rule(Decision.ALLOW)
    for f in RECORD_FIELDS:
        rules[(Role.PATIENT.value, f, None)] = Rule(Decision.ALLOW)
    return Policy(rules)


@dataclass(frozen=True)
class AccessRequest:
    actor_id: str
    role: str
    record_id: str
    fields: tuple[str, ...]
    purpose: str = ""
    timestamp: int = 0

    def __post_init__(self):
        object.__setattr__(self, "role", str(getattr(self.role, "value", self.role)))
        object.__setattr__(self, "fields", tuple(self.fields))
        if not self.fields:
            raise ValueError("an access request names at least one field")


@dataclass(frozen=True)
class PolicyDecision:
    allowed: bool
    obligations: tuple[str, ...] = ()
    denied_fields: tuple[str, ...] = ()


def evaluate_policy(policy: Policy, req: AccessRequest) -> PolicyDecision:
    """Allow only when every requested field is individually allowed."""
    if req.role == Role.PATIENT.value and req.actor_id != req.record_id:
        return PolicyDecision(False, (), req.fields)
    obligations: list[str] = []
    denied = []
    for f in req.fields:
        rule = policy.rule_for(req.role, f, req.record_id)
        if rule.decision is Decision.ALLOW:
            obligations += [o for o in rule.obligations if o not in obligations]
        else:
            denied.append(f)
    if denied:
        return PolicyDecision(False, (), tuple(denied))
    return PolicyDecision(True, tuple(obligations))


def _record_dict(rec) -> dict:
    if isinstance(rec, PatientRecord):
        return {f: getattr(rec, f) for f in RECORD_FIELDS}
    return {k.lower(): v for k, v in rec.items()}


def redact_view(rec, role: str, policy: Policy, record_id: str | None = None) -> dict:
    """Only the fields ``role`` may see; denied fields are left out entirely."""
    role = str(getattr(role, "value", role))
    values = _record_dict(rec)
    return {
        f: v for f, v in values.items()
        if policy.rule_for(role, f, record_id).decision is Decision.ALLOW
    }


@dataclass(frozen=True)
class RuleChange:
    role: str
    field: str
    decision: Decision
    obligations: tuple[str, ...] = ()
    record_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "role", str(getattr(self.role, "value", self.role)))
        object.__setattr__(self, "decision", Decision(self.decision))
        object.__setattr__(self, "obligations", tuple(self.obligations))

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "field": self.field,
            "decision": self.decision.value,
            "obligations": list(self.obligations),
            "record_id": self.record_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> RuleChange:
        return cls(d["role"], d["field"], d["decision"], tuple(d.get("obligations", ())), d.get("record_id"))


def consent_update(policy: Policy, actor_role: str, actor_id: str, change: RuleChange) -> Policy:
    """Apply a consent change on behalf of a patient (own record only) or an admin.

    A patient change without a record id is scoped to the patient's record.
    """
    actor_role = str(getattr(actor_role, "value", actor_role))
    if actor_role == Role.PATIENT.value:
        record_id = actor_id if change.record_id is None else change.record_id
        if record_id != actor_id:
            raise Unauthorized(f"patient {actor_id!r} cannot change rules for record {record_id!r}")
    elif actor_role == Role.ADMIN.value:
        record_id = change.record_id
    else:
        raise Unauthorized(f"role {actor_role!r} cannot change the policy")
    return policy.with_rule(change.role, change.field, Rule(change.decision, change.obligations), record_id)


def normalize_fields(fields: Sequence[str]) -> tuple[str, ...]:
    return tuple(f.strip().lower() for f in fields if f.strip())
