import dataclasses
import hashlib
import itertools
import json
import struct

import pytest

from fedehr.dataset import PatientRecord
from fedehr.ehr_audit import (
    ZERO_HASH,
    AccessRequest,
    Action,
    Decision,
    LogChain,
    Policy,
    Role,
    RuleChange,
    canonical_bytes,
    consent_update,
    default_policy,
    evaluate_policy,
    record_access,
    record_consent,
    redact_view,
    replay_audit,
    verify_chain,
    verify_jsonl,
)
from fedehr.ehr_audit.policy import RECORD_FIELDS
from fedehr.errors import MalformedEntry, Unauthorized

from .sha256_ref import sha256_hex

REC = PatientRecord(45, "female", 25.175, 2, "no", "northeast", 9095.06825, "999-76-6866")


def _req(role, fields, record="7", actor="u1"):
    return AccessRequest(actor, role, record, tuple(fields), "care", 1_700_000_000)


def _chain(n, detail="d"):
    chain = LogChain()
    actions = itertools.cycle(list(Action))
    for i in range(n):
        chain.append(1_700_000_000 + (i * 7919) % 13, f"actor-{i % 3}", next(actions), f"{detail}{i}")
    return chain


# --- policy ----------------------------------------------------------------

def test_insurer_may_see_ssn_and_charges():
    d = evaluate_policy(default_policy(), _req("insurer", ["ssn", "charges"]))
    assert d.allowed and d.obligations == ("billing-purpose-only",)


def test_physician_may_not_see_ssn():
    d = evaluate_policy(default_policy(), _req("physician", ["ssn"]))
    assert not d.allowed and d.denied_fields == ("ssn",)


def test_unknown_role_is_denied():
    assert not evaluate_policy(default_policy(), _req("auditor", ["age"])).allowed
    assert not evaluate_policy(Policy(), _req("insurer", ["charges"])).allowed


def test_policy_is_total_and_deny_dominates():
    policy = default_policy()
    for role in list(Role) + ["stranger"]:
        role = getattr(role, "value", role)
        singles = {}
        for f in RECORD_FIELDS:
            rule = policy.rule_for(role, f)
            assert rule.decision in (Decision.ALLOW, Decision.DENY)
            singles[f] = evaluate_policy(policy, _req(role, [f], record="u1")).allowed
        for a, b in itertools.combinations(RECORD_FIELDS, 2):
            both = evaluate_policy(policy, _req(role, [a, b], record="u1")).allowed
            assert both == (singles[a] and singles[b])


def test_patient_only_reads_own_record():
    policy = default_policy()
    assert evaluate_policy(policy, _req("patient", ["ssn"], record="u1", actor="u1")).allowed
    assert not evaluate_policy(policy, _req("patient", ["age"], record="u2", actor="u1")).allowed


def test_access_request_needs_fields():
    with pytest.raises(ValueError):
        _req("insurer", [])


def test_redacted_views():
    policy = default_policy()
    insurer = redact_view(REC, Role.INSURER, policy)
    assert set(insurer) == {"ssn", "charges"}
    physician = redact_view(REC, Role.PHYSICIAN, policy)
    assert "ssn" not in physician and "charges" not in physician
    assert {"age", "bmi", "smoker"} <= set(physician)
    assert redact_view(REC, Role.VERIFIER, policy) == {}


def test_policy_json_roundtrip():
    policy = default_policy().with_rule("physician", "charges", default_policy().rule_for("insurer", "charges"), "7")
    back = Policy.from_json(policy.to_json())
    assert back.rules == policy.rules
    assert "physician.charges@7" in json.loads(policy.to_json())


# --- consent ---------------------------------------------------------------

def test_patient_grant_is_read_your_write():
    policy = default_policy()
    req = _req("physician", ["charges"], record="u1")
    assert not evaluate_policy(policy, req).allowed
    policy = consent_update(policy, "patient", "u1", RuleChange("physician", "charges", "allow"))
    assert evaluate_policy(policy, req).allowed
    # scoped to the patient's own record
    assert not evaluate_policy(policy, _req("physician", ["charges"], record="u2")).allowed


def test_patient_cannot_touch_other_records():
    with pytest.raises(Unauthorized):
        consent_update(default_policy(), "patient", "u1", RuleChange("physician", "charges", "allow", record_id="u2"))


def test_pharmacy_cannot_change_policy():
    with pytest.raises(Unauthorized):
        consent_update(default_policy(), "pharmacy", "p1", RuleChange("pharmacy", "ssn", "allow"))


def test_admin_changes_global_rules():
    policy = consent_update(default_policy(), "admin", "root", RuleChange("pharmacy", "age", "allow"))
    assert evaluate_policy(policy, _req("pharmacy", ["age"], record="anything")).allowed


def test_consent_is_logged():
    chain = LogChain()
    policy = record_consent(chain, default_policy(), "patient", "u1", RuleChange("physician", "charges", "allow"), 5)
    assert len(chain) == 1 and chain[0].action is Action.POLICY_CHANGED
    assert evaluate_policy(policy, _req("physician", ["charges"], record="u1")).allowed
    with pytest.raises(Unauthorized):
        record_consent(chain, policy, "insurer", "i1", RuleChange("insurer", "age", "allow"), 6)
    assert len(chain) == 1


# --- chain -----------------------------------------------------------------

def test_genesis_entry():
    e = LogChain().append(1, "a", "access_granted", "x")
    assert e.index == 0 and e.prev_hash == ZERO_HASH
    assert json.loads(e.to_json())["prev_hash"] == "0" * 64


def test_links_and_hashes_match_independent_oracle():
    chain = _chain(3)
    prev = bytes(32)
    for e in chain:
        assert e.prev_hash == prev
        fields = [str(e.index).encode(), str(e.timestamp).encode(), e.actor_id.encode(),
                  e.action.value.encode(), e.detail.encode(), e.prev_hash]
        blob = b"".join(struct.pack(">I", len(f)) + f for f in fields)
        assert blob == canonical_bytes(e.index, e.timestamp, e.actor_id, e.action.value, e.detail, e.prev_hash)
        assert e.entry_hash.hex() == sha256_hex(blob)
        prev = e.entry_hash


def test_non_monotonic_timestamps_accepted():
    chain = LogChain()
    chain.append(100, "a", "access_granted")
    chain.append(50, "a", "access_denied")
    assert verify_chain(chain) is None


def test_fresh_chain_verifies():
    chain = _chain(10)
    assert verify_chain(chain) is None
    assert verify_jsonl(chain.to_jsonl()) == (10, None)


def test_bit_flip_in_detail_is_hash_mismatch():
    entries = list(_chain(10).entries)
    raw = bytearray(entries[4].detail.encode())
    raw[0] ^= 0x01
    entries[4] = dataclasses.replace(entries[4], detail=raw.decode())
    v = verify_chain(entries)
    assert (v.index, v.reason) == (4, "hash-mismatch")


def test_deleted_entry_is_detected_at_its_index():
    entries = list(_chain(10).entries)
    del entries[2]
    v = verify_chain(entries)
    assert v.index == 2


def test_every_single_bit_flip_is_detected():
    data = _chain(20, detail='{"k":"v\\u00e9"}').to_jsonl().encode()
    assert verify_jsonl(data)[1] is None
    missed = []
    buf = bytearray(data)
    for pos in range(len(buf)):
        for bit in range(8):
            buf[pos] ^= 1 << bit
            if verify_jsonl(bytes(buf))[1] is None:
                missed.append((pos, bit))
            buf[pos] ^= 1 << bit
    assert missed == []


def test_strict_parsing():
    line = _chain(1).entries[0].to_json()
    with pytest.raises(MalformedEntry):
        LogChain.from_jsonl(line.replace('"index":0', '"index":0.0') + "\n")
    with pytest.raises(MalformedEntry):
        LogChain.from_jsonl(line + "\n" + line)  # no final newline
    n, v = verify_jsonl(b"not json\n")
    assert n == 0 and v.reason.startswith("malformed")


def test_forged_chain_with_rehashed_entries_fails_replay():
    chain = LogChain()
    policy = default_policy()
    record_access(chain, policy, _req("physician", ["ssn"]))
    record_access(chain, policy, _req("insurer", ["charges"]))
    assert [e.action for e in chain] == [Action.ACCESS_DENIED, Action.ACCESS_GRANTED]
    assert replay_audit(chain, policy) == []
    # an attacker who rewrites and rehashes the log flips the first decision
    forged = LogChain()
    for e in chain:
        action = Action.ACCESS_GRANTED if e.index == 0 else e.action
        forged.append(e.timestamp, e.actor_id, action, e.detail)
    assert verify_chain(forged) is None
    problems = replay_audit(forged, policy)
    assert [(p.index, p.reason) for p in problems] == [(0, "replay-mismatch")]


def test_replay_follows_consent_history():
    chain = LogChain()
    policy = default_policy()
    req = _req("physician", ["charges"], record="u1")
    record_access(chain, policy, req)
    policy = record_consent(chain, policy, "patient", "u1", RuleChange("physician", "charges", "allow"), 2)
    record_access(chain, policy, req)
    assert [e.action for e in chain] == [Action.ACCESS_DENIED, Action.POLICY_CHANGED, Action.ACCESS_GRANTED]
    assert replay_audit(chain, default_policy()) == []


def test_replay_flags_unauthorized_policy_change():
    chain = LogChain()
    detail = json.dumps({"actor_role": "pharmacy", "change": RuleChange("pharmacy", "ssn", "allow").to_dict()})
    chain.append(1, "p1", Action.POLICY_CHANGED, detail)
    assert [p.reason for p in replay_audit(chain, default_policy())] == ["unauthorized-policy-change"]


def test_replay_reports_broken_chain_alone():
    entries = list(_chain(3).entries)
    entries[1] = dataclasses.replace(entries[1], timestamp=entries[1].timestamp + 1)
    problems = replay_audit(LogChain(entries), default_policy())
    assert [(p.index, p.reason) for p in problems] == [(1, "hash-mismatch")]


def test_hash_depends_on_every_field():
    base = dict(index=3, timestamp=10, actor_id="a", action="access_granted", detail="x", prev_hash=bytes(32))
    ref = hashlib.sha256(canonical_bytes(**base)).digest()
    for k, v in [("index", 4), ("timestamp", 11), ("actor_id", "b"), ("action", "access_denied"),
                 ("detail", "y"), ("prev_hash", b"\x01" * 32)]:
        assert hashlib.sha256(canonical_bytes(**{**base, k: v})).digest() != ref
    # length prefixes make field boundaries unambiguous
    assert canonical_bytes(**{**base, "actor_id": "ab", "action": "c"}) != canonical_bytes(
        **{**base, "actor_id": "a", "action": "bc"})
