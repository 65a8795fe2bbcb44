"""Policy enforcement with logging, and replay-based audit of the log.

Every access decision and every consent change is written to the chain with
a JSON ``detail`` payload that is sufficient to re-derive the decision from
the initial policy. :func:`replay_audit` does exactly that.
"""

from __future__ import annotations

import json

from ..errors import Unauthorized
from .chain import Action, LogChain, LogEntry, Violation, verify_chain
from .policy import AccessRequest, Policy, PolicyDecision, RuleChange, consent_update, evaluate_policy


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def access_detail(req: AccessRequest, decision: PolicyDecision) -> str:
    return _dumps({
        "role": req.role,
        "record_id": req.record_id,
        "fields": list(req.fields),
        "purpose": req.purpose,
        "denied_fields": list(decision.denied_fields),
    })


def record_access(chain: LogChain, policy: Policy, req: AccessRequest) -> tuple[PolicyDecision, LogEntry]:
    """Decide ``req`` and append exactly one granted/denied entry."""
    decision = evaluate_policy(policy, req)
    action = Action.ACCESS_GRANTED if decision.allowed else Action.ACCESS_DENIED
    entry = chain.append(req.timestamp, req.actor_id, action, access_detail(req, decision))
    return decision, entry


def record_consent(
    chain: LogChain, policy: Policy, actor_role: str, actor_id: str, change: RuleChange, timestamp: int
) -> Policy:
    """Apply a consent change and log it. Unauthorized attempts are not logged
    as policy changes and leave the policy untouched."""
    actor_role = str(getattr(actor_role, "value", actor_role))
    updated = consent_update(policy, actor_role, actor_id, change)
    scoped = change.to_dict()
    if actor_role == "patient" and scoped["record_id"] is None:
        scoped["record_id"] = actor_id
    chain.append(timestamp, actor_id, Action.POLICY_CHANGED, _dumps({"actor_role": actor_role, "change": scoped}))
    return updated


def replay_audit(chain: LogChain, initial_policy: Policy) -> list[Violation]:
    """Re-run every logged decision against the policy history.

    Returns all discrepancies: a broken chain (reported alone), an access
    entry whose logged outcome differs from the replayed decision, or a
    policy change the logged actor was not entitled to make.
    """
    broken = verify_chain(chain)
    if broken is not None:
        return [broken]
    policy = initial_policy
    problems = []
    for e in chain:
        try:
            detail = json.loads(e.detail) if e.detail else {}
        except json.JSONDecodeError:
            problems.append(Violation(e.index, "detail-not-json"))
            continue
        if e.action is Action.POLICY_CHANGED:
            try:
                policy = consent_update(
                    policy, detail["actor_role"], e.actor_id, RuleChange.from_dict(detail["change"])
                )
            except (KeyError, ValueError, Unauthorized):
                problems.append(Violation(e.index, "unauthorized-policy-change"))
        elif e.action in (Action.ACCESS_GRANTED, Action.ACCESS_DENIED):
            try:
                req = AccessRequest(e.actor_id, detail["role"], detail["record_id"], tuple(detail["fields"]),
                                    detail.get("purpose", ""), e.timestamp)
            except (KeyError, ValueError):
                problems.append(Violation(e.index, "detail-incomplete"))
                continue
            allowed = evaluate_policy(policy, req).allowed
            if allowed != (e.action is Action.ACCESS_GRANTED):
                problems.append(Violation(e.index, "replay-mismatch"))
    return problems
