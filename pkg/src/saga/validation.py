"""Independent validation: intra-agent output checks, inter-agent message
checks, plan checks, and the verdict/response protocol.

Validators are pure: they see only the candidate output or message, a state
snapshot, and declarative rules -- never agent-private state. Verdict
classification is a function of failed-rule severities alone: any hard
failure rejects; soft failures with patches augment; patchless soft failures
become recorded feedback.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import planning
from .agents import AGENT_SCHEMAS
from .errors import RetryExhausted, SchemaUnknown, UnresolvableAtom
from .state import Condition, StateSnapshot, evaluate_condition

INTRA_CATEGORIES = ("syntactic", "semantic", "factual", "constraint", "reasoning")
INTER_CATEGORIES = ("contract", "dependency", "consistency", "temporal", "mutual-agreement", "boundary")

OUTCOME_PASS = "pass"
OUTCOME_REJECT = "reject"
OUTCOME_AUGMENT = "augment"
OUTCOME_FEEDBACK = "feedback"

RESPONSE_COMMIT = "commit"
RESPONSE_COMPENSATE = "compensate"
RESPONSE_AUGMENT = "augment-and-revalidate"
RESPONSE_FEEDBACK = "record-feedback"

DEFAULT_MAX_AUGMENT_ROUNDS = 3


@dataclass(frozen=True)
class ValidationRule:
    rule_id: str
    tier: str  # "intra" | "inter"
    category: str
    check: Mapping[str, Any]
    severity: str = "hard"
    applies_to: tuple[str, ...] = ("*",)
    description: str = ""
    patch: Mapping[str, Any] | None = None

    def __post_init__(self):
        allowed = INTRA_CATEGORIES if self.tier == "intra" else INTER_CATEGORIES
        if self.category not in allowed:
            raise ValueError(f"category {self.category!r} not legal for tier {self.tier}")

    def applies(self, op: str) -> bool:
        return "*" in self.applies_to or op in self.applies_to

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ValidationRule":
        return cls(
            rule_id=data["rule_id"],
            tier=data["tier"],
            category=data["category"],
            check=dict(data["check"]),
            severity=data.get("severity", "hard"),
            applies_to=tuple(data.get("applies_to", ("*",))),
            description=data.get("description", ""),
            patch=dict(data["patch"]) if data.get("patch") else None,
        )

    def to_dict(self) -> dict:
        out = {
            "rule_id": self.rule_id,
            "tier": self.tier,
            "category": self.category,
            "check": dict(self.check),
            "severity": self.severity,
            "applies_to": list(self.applies_to),
        }
        if self.description:
            out["description"] = self.description
        if self.patch:
            out["patch"] = dict(self.patch)
        return out


def load_rules(path: str | Path) -> list[ValidationRule]:
    """Load a declarative rule file (JSON list of rule objects)."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return [ValidationRule.from_dict(r) for r in data]


@dataclass(frozen=True)
class RuleFailure:
    rule_id: str
    category: str
    severity: str
    evidence: str

    def to_dict(self) -> dict:
        return {"rule_id": self.rule_id, "category": self.category,
                "severity": self.severity, "evidence": self.evidence}


@dataclass(frozen=True)
class ValidationVerdict:
    outcome: str
    failed: tuple[RuleFailure, ...] = ()
    augmentation: Mapping[str, Any] | None = None
    recorded_at: int | None = None

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "failed": [f.to_dict() for f in self.failed],
            "augmentation": dict(self.augmentation) if self.augmentation else None,
            "recorded_at": self.recorded_at,
        }


def classify(failures: Sequence[RuleFailure], patches: Mapping[str, Any] | None) -> str:
    """Outcome as a pure function of failed-rule severities."""
    if not failures:
        return OUTCOME_PASS
    if any(f.severity == "hard" for f in failures):
        return OUTCOME_REJECT
    if patches:
        return OUTCOME_AUGMENT
    return OUTCOME_FEEDBACK


@dataclass(frozen=True)
class MessageEnvelope:
    from_agent: str
    to_agent: str
    payload: Mapping[str, Any]
    declared_schema: str
    depends_on: tuple[str, ...] = ()
    send_time: int = 0


# ---------------------------------------------------------------------------
# Schema registry
# ---------------------------------------------------------------------------

def default_schemas() -> dict[str, list[str]]:
    schemas = {f"{kind}-output": spec["output"] for kind, spec in AGENT_SCHEMAS.items()}
    schemas.update({f"{kind}-input": spec["input"] for kind, spec in AGENT_SCHEMAS.items()})
    schemas["failure-notice"] = ["op", "transaction_id", "reason"]
    schemas["handoff"] = ["op", "transaction_id"]
    return schemas


def _lookup(value: Any, path: str) -> Any:
    current = value
    for part in path.split("."):
        if not isinstance(current, Mapping) or part not in current:
            raise KeyError(path)
        current = current[part]
    return current


def _candidate_snapshot(snap: StateSnapshot, candidate: Mapping[str, Any]) -> StateSnapshot:
    # Conditions address the value under validation as entity:candidate.*
    return snap.with_app(snap.app.with_entity("candidate", dict(candidate)))


# ---------------------------------------------------------------------------
# Check dispatch
# ---------------------------------------------------------------------------

def _check_required_fields(rule, value, snap, env) -> str | None:
    missing = []
    for path in rule.check["fields"]:
        try:
            _lookup(value, path)
        except KeyError:
            missing.append(path)
    if missing:
        return f"missing fields: {', '.join(missing)}"
    return None


def _check_condition(rule, value, snap, env) -> str | None:
    cond = Condition.from_dict(rule.check["condition"])
    try:
        ok = evaluate_condition(cond, _candidate_snapshot(snap, value))
    except UnresolvableAtom as exc:
        return str(exc)
    return None if ok else rule.check.get("message", "condition not satisfied")


def _check_trip_coverage(rule, value, snap, env) -> str | None:
    # Accommodation must span the leg it was booked for, with no gap nights.
    want_in = rule.check["checkin"]
    want_out = rule.check["checkout"]
    try:
        got_in = _lookup(value, "hotel_details.checkin_date")
        got_out = _lookup(value, "hotel_details.checkout_date")
    except KeyError as exc:
        return f"missing {exc}"
    if got_in > want_in or got_out < want_out:
        return (
            f"stay {got_in}..{got_out} leaves a gap in required coverage "
            f"{want_in}..{want_out}"
        )
    return None


def _check_fact_equals(rule, value, snap, env) -> str | None:
    facts = env.get("facts", {})
    key = rule.check["fact_key"]
    if key not in facts:
        return f"no such fact {key!r} in world model"
    try:
        got = _lookup(value, rule.check["path"])
    except KeyError:
        return f"missing {rule.check['path']}"
    if got != facts[key]:
        return f"{rule.check['path']}={got!r} contradicts {key}={facts[key]!r}"
    return None


def _check_preconditions_cited(rule, value, snap, env) -> str | None:
    # Each "requires:<op>" token in the decision reasoning must be satisfied.
    cited = [r.split(":", 1)[1] for r in env.get("reasoning", ()) if r.startswith("requires:")]
    unmet = []
    for op in cited:
        entry = snap.op_status.get(op)
        if entry is None or entry.get("status") != "completed":
            unmet.append(op)
    if unmet:
        return f"cited preconditions not satisfied: {', '.join(unmet)}"
    return None


def _check_schema_contract(rule, msg, snap, env) -> str | None:
    schemas = env["schemas"]
    if msg.declared_schema not in schemas:
        raise SchemaUnknown(msg.declared_schema)
    missing = [f for f in schemas[msg.declared_schema] if f not in msg.payload]
    if missing:
        return f"payload misses declared fields: {', '.join(missing)}"
    return None


def _check_dependency_complete(rule, msg, snap, env) -> str | None:
    unmet = []
    for op in msg.depends_on:
        entry = snap.op_status.get(op)
        if entry is None or entry.get("status") != "completed":
            unmet.append(op)
    if unmet:
        return f"depends on incomplete operations: {', '.join(unmet)}"
    return None


def _check_temporal_order(rule, msg, snap, env) -> str | None:
    late = []
    for op in msg.depends_on:
        entry = snap.op_status.get(op) or {}
        tick = entry.get("tick")
        if tick is not None and msg.send_time < tick:
            late.append(f"{op}@{tick}")
    if late:
        return f"sent at {msg.send_time} before dependency completion: {', '.join(late)}"
    return None


def _check_location_format(rule, msg, snap, env) -> str | None:
    canonical = rule.check.get("canonical", {})
    bad = []
    for fld in rule.check.get("fields", ()):
        try:
            value = _lookup(msg.payload, fld)
        except KeyError:
            continue
        if value in canonical and canonical[value] != value:
            bad.append(f"{fld}={value!r} (canonical {canonical[value]!r})")
        elif value not in canonical and value not in canonical.values():
            bad.append(f"{fld}={value!r} not a canonical location")
    if bad:
        return "non-canonical location data: " + ", ".join(bad)
    return None


def _check_mutual_agreement(rule, msg, snap, env) -> str | None:
    # Both sides must declare identical values for shared keys.
    shared = msg.payload.get("shared", {})
    record = snap.app.get("shared") or {}
    disagreements = []
    for key, value in shared.items():
        if key in record and record[key] != value:
            disagreements.append(f"{key}: {value!r} vs {record[key]!r}")
    if disagreements:
        return "shared-state disagreement: " + "; ".join(disagreements)
    return None


def _check_transaction_tag(rule, msg, snap, env) -> str | None:
    tag = msg.payload.get("transaction_id")
    if tag is None:
        return "message lacks a transaction_id"
    known = set(snap.op_status) | set(msg.depends_on)
    if tag not in known:
        return f"transaction_id {tag!r} does not reference a known operation"
    return None


_OUTPUT_CHECKS = {
    "required-fields": _check_required_fields,
    "condition": _check_condition,
    "trip-coverage": _check_trip_coverage,
    "fact-equals": _check_fact_equals,
    "preconditions-cited": _check_preconditions_cited,
}

_MESSAGE_CHECKS = {
    "schema-contract": _check_schema_contract,
    "dependency-complete": _check_dependency_complete,
    "temporal-order": _check_temporal_order,
    "location-format": _check_location_format,
    "mutual-agreement": _check_mutual_agreement,
    "transaction-tag": _check_transaction_tag,
    "condition": _check_condition,
}


def validate_output(
    op: str,
    output: Mapping[str, Any],
    snap: StateSnapshot,
    rules: Sequence[ValidationRule],
    *,
    schemas: Mapping[str, list[str]] | None = None,
    facts: Mapping[str, Any] | None = None,
    reasoning: Sequence[str] = (),
) -> ValidationVerdict:
    """Check one agent output against every applicable intra-tier rule."""
    env = {"schemas": schemas or default_schemas(), "facts": facts or {}, "reasoning": reasoning}
    failures: list[RuleFailure] = []
    patches: dict[str, Any] = {}
    for rule in rules:
        if rule.tier != "intra" or not rule.applies(op):
            continue
        checker = _OUTPUT_CHECKS.get(rule.check["type"])
        if checker is None:
            raise ValueError(f"unknown intra check type {rule.check['type']!r}")
        evidence = checker(rule, output, snap, env)
        if evidence is not None:
            failures.append(RuleFailure(rule.rule_id, rule.category, rule.severity, evidence))
            if rule.severity == "soft" and rule.patch:
                patches.update(rule.patch)
    return ValidationVerdict(
        outcome=classify(failures, patches),
        failed=tuple(failures),
        augmentation=patches or None,
    )


def validate_message(
    msg: MessageEnvelope,
    snap: StateSnapshot,
    rules: Sequence[ValidationRule],
    *,
    schemas: Mapping[str, list[str]] | None = None,
) -> ValidationVerdict:
    """Check an inter-agent message before delivery; a hard failure means the
    recipient never sees it (the coordinator enforces the block)."""
    env = {"schemas": schemas or default_schemas()}
    failures: list[RuleFailure] = []
    patches: dict[str, Any] = {}
    for rule in rules:
        if rule.tier != "inter" or not rule.applies(msg.to_agent):
            continue
        checker = _MESSAGE_CHECKS.get(rule.check["type"])
        if checker is None:
            raise ValueError(f"unknown inter check type {rule.check['type']!r}")
        evidence = checker(rule, msg, snap, env)
        if evidence is not None:
            failures.append(RuleFailure(rule.rule_id, rule.category, rule.severity, evidence))
            if rule.severity == "soft" and rule.patch:
                patches.update(rule.patch)
    return ValidationVerdict(
        outcome=classify(failures, patches),
        failed=tuple(failures),
        augmentation=patches or None,
    )


def validate_plan(
    plan: Sequence[planning.TimedAction],
    world: planning.WorldModel,
    rules: Sequence[Mapping[str, Any]],
    disruptions: Sequence[planning.DisruptionEvent] = (),
) -> list[planning.Violation]:
    """Run the full plan checker; violations come back ordered by action time."""
    return planning.check_plan_constraints(plan, world, rules, disruptions)


def decide_response(verdict: ValidationVerdict, *, attempts: int = 0,
                    max_rounds: int = DEFAULT_MAX_AUGMENT_ROUNDS) -> str:
    """Map a verdict to the coordinator's next move. RESPONSE_FEEDBACK means
    commit and record the feedback entries."""
    if verdict.outcome == OUTCOME_PASS:
        return RESPONSE_COMMIT
    if verdict.outcome == OUTCOME_REJECT:
        return RESPONSE_COMPENSATE
    if verdict.outcome == OUTCOME_FEEDBACK:
        return RESPONSE_FEEDBACK
    if attempts >= max_rounds:
        raise RetryExhausted(f"augmentation exceeded {max_rounds} rounds")
    return RESPONSE_AUGMENT


def apply_augmentation(
    output: Mapping[str, Any],
    patch: Mapping[str, Any],
    allowed_fields: Iterable[str],
) -> dict:
    """Field-level merge restricted to the declared output schema; validators
    may clarify fields, never invent new structure."""
    allowed = set(allowed_fields)
    merged = dict(output)
    for key, value in patch.items():
        if key.split(".")[0] in allowed:
            merged[key] = value
    return merged


def validation_loop(
    op: str,
    output: Mapping[str, Any],
    snap: StateSnapshot,
    rules: Sequence[ValidationRule],
    *,
    allowed_fields: Iterable[str] = (),
    max_rounds: int = DEFAULT_MAX_AUGMENT_ROUNDS,
    **env: Any,
) -> tuple[dict, list[ValidationVerdict], str]:
    """Validate, augmenting and revalidating up to the round bound.

    Returns (final output, verdicts in order, final response). Raises
    RetryExhausted if augmentation keeps failing past the bound.
    """
    current = dict(output)
    verdicts: list[ValidationVerdict] = []
    for attempt in range(max_rounds + 1):
        verdict = validate_output(op, current, snap, rules, **env)
        verdicts.append(verdict)
        response = decide_response(verdict, attempts=attempt, max_rounds=max_rounds)
        if response != RESPONSE_AUGMENT:
            return current, verdicts, response
        current = apply_augmentation(current, verdict.augmentation or {}, allowed_fields)
    raise RetryExhausted(f"augmentation exceeded {max_rounds} rounds")
