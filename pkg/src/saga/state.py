"""Three-dimensional transaction state and pure operations over it.

The engine tracks state along three axes: application entities (the domain
objects a run creates), the operation log (what ran, with which inputs and
outcomes), and dependency satisfaction (which inter-operation conditions
hold). A StateSnapshot bundles one consistent view of all three.

Everything in this module is an immutable value with pure functions over it;
the single mutable artifact in the engine is the append-only log in
saga.store.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from .errors import (
    CycleDetected,
    StatusTransitionError,
    UnknownOperation,
    UnresolvableAtom,
)


def canonical_json(obj: Any) -> str:
    """Deterministic JSON: sorted keys, compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Statuses
# ---------------------------------------------------------------------------

class OpStatus(str, Enum):
    STARTED = "started"
    COMPLETED = "completed"
    FAILED = "failed"
    COMPENSATED = "compensated"


# Allowed operation-record transitions; None means "no record yet".
OP_STATUS_TRANSITIONS: dict[OpStatus | None, set[OpStatus]] = {
    None: {OpStatus.STARTED},
    OpStatus.STARTED: {OpStatus.COMPLETED, OpStatus.FAILED},
    OpStatus.COMPLETED: {OpStatus.COMPENSATED},
    OpStatus.FAILED: set(),
    OpStatus.COMPENSATED: set(),
}


class EntityStatus(str, Enum):
    PENDING = "pending"
    ACTIVE = "active"
    COMMITTED = "committed"
    COMPENSATED = "compensated"


ENTITY_STATUS_TRANSITIONS: dict[EntityStatus, set[EntityStatus]] = {
    EntityStatus.PENDING: {EntityStatus.ACTIVE},
    EntityStatus.ACTIVE: {EntityStatus.COMMITTED, EntityStatus.COMPENSATED},
    EntityStatus.COMMITTED: set(),
    EntityStatus.COMPENSATED: set(),
}


@dataclass(frozen=True)
class OperationId:
    """Opaque unique token plus a human-readable name.

    Most engine APIs accept the bare label string; this type exists for
    callers that need to carry both.
    """

    id: str
    label: str

    @classmethod
    def make(cls, label: str) -> "OperationId":
        return cls(id=label, label=label)


def op_label(op: "OperationId | str") -> str:
    return op.label if isinstance(op, OperationId) else op


# ---------------------------------------------------------------------------
# Application state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AppState:
    """Domain entities keyed by entity-key, plus a monotone snapshot counter.

    Entity records are plain dicts; a record may carry a "status" field whose
    updates must follow the entity automaton (pending -> active -> committed,
    or active -> compensated).
    """

    entities: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    snapshot_id: int = 0

    def get(self, key: str) -> Mapping[str, Any] | None:
        return self.entities.get(key)

    def with_entity(self, key: str, record: Mapping[str, Any]) -> "AppState":
        old = self.entities.get(key)
        if old is not None:
            _check_entity_transition(key, old.get("status"), record.get("status"))
        entities = dict(self.entities)
        entities[key] = dict(record)
        return AppState(entities=entities, snapshot_id=self.snapshot_id + 1)

    def without_entity(self, key: str) -> "AppState":
        entities = dict(self.entities)
        entities.pop(key, None)
        return AppState(entities=entities, snapshot_id=self.snapshot_id + 1)

    def to_dict(self) -> dict:
        return {
            "entities": {k: dict(v) for k, v in sorted(self.entities.items())},
            "snapshot_id": self.snapshot_id,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AppState":
        return cls(
            entities={k: dict(v) for k, v in data.get("entities", {}).items()},
            snapshot_id=int(data.get("snapshot_id", 0)),
        )

    def entity_digest(self) -> str:
        """Digest of the entity map only; snapshot counters do not count for
        entity-wise equality."""
        return digest({k: dict(v) for k, v in sorted(self.entities.items())})


def _check_entity_transition(key: str, old: Any, new: Any) -> None:
    if old is None or new is None or old == new:
        return
    old_s = EntityStatus(old)
    new_s = EntityStatus(new)
    if new_s not in ENTITY_STATUS_TRANSITIONS[old_s]:
        raise StatusTransitionError(
            f"entity {key}: illegal status transition {old_s.value} -> {new_s.value}"
        )


# ---------------------------------------------------------------------------
# Operation records (rows of the execution log)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OperationRecord:
    """One operation's execution record: inputs, outputs, status, reasoning."""

    op: str
    inputs: Mapping[str, Any]
    timestamp: int
    status: OpStatus
    outputs: Mapping[str, Any] | None = None
    reasoning: tuple[str, ...] = ()
    alternatives: tuple[str, ...] = ()

    def __post_init__(self):
        has_outputs = self.outputs is not None
        needs_outputs = self.status in (OpStatus.COMPLETED, OpStatus.COMPENSATED)
        if has_outputs != needs_outputs:
            raise ValueError(
                f"record for {self.op}: outputs must be present iff status is "
                f"completed/compensated (status={self.status.value})"
            )

    def to_dict(self) -> dict:
        return {
            "op": self.op,
            "inputs": dict(self.inputs),
            "timestamp": self.timestamp,
            "status": self.status.value,
            "outputs": dict(self.outputs) if self.outputs is not None else None,
            "reasoning": list(self.reasoning),
            "alternatives": list(self.alternatives),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "OperationRecord":
        return cls(
            op=data["op"],
            inputs=dict(data.get("inputs", {})),
            timestamp=int(data["timestamp"]),
            status=OpStatus(data["status"]),
            outputs=dict(data["outputs"]) if data.get("outputs") is not None else None,
            reasoning=tuple(data.get("reasoning", ())),
            alternatives=tuple(data.get("alternatives", ())),
        )


def fold_op_statuses(records: Iterable[OperationRecord]) -> dict[str, OpStatus]:
    """Replay records into per-op status, enforcing the transition automaton.

    Raises StatusTransitionError on any illegal transition, and ValueError on
    non-increasing timestamps.
    """
    statuses: dict[str, OpStatus] = {}
    last_ts: int | None = None
    for rec in records:
        if last_ts is not None and rec.timestamp < last_ts:
            raise ValueError(f"record timestamps must not decrease (op {rec.op})")
        last_ts = rec.timestamp
        allowed = OP_STATUS_TRANSITIONS[statuses.get(rec.op)]
        if rec.status not in allowed:
            raise StatusTransitionError(
                f"op {rec.op}: illegal transition {statuses.get(rec.op)} -> {rec.status.value}"
            )
        statuses[rec.op] = rec.status
    return statuses


# ---------------------------------------------------------------------------
# Conditions (Boolean composites over state atoms)
# ---------------------------------------------------------------------------

ATOM_KINDS = frozenset({"op-completed", "numeric-compare", "deadline", "location-equals"})
NODE_KINDS = frozenset({"and", "or", "not"})

_COMPARATORS = {
    "<=": lambda a, b: a <= b,
    "<": lambda a, b: a < b,
    ">=": lambda a, b: a >= b,
    ">": lambda a, b: a > b,
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}


@dataclass(frozen=True)
class Condition:
    """Expression tree over a closed set of atoms.

    Atoms: op-completed(op), numeric-compare(key, cmp, bound),
    deadline(key, by), location-equals(key, location). Internal nodes are
    and/or/not. Key references follow "entity:<key>.<field>" or
    "op:<label>.<field>"; a bound of the form "@<key>" compares against
    another resolved key.
    """

    kind: str
    children: tuple["Condition", ...] = ()
    params: tuple[tuple[str, Any], ...] = ()

    def param(self, name: str, default: Any = None) -> Any:
        for k, v in self.params:
            if k == name:
                return v
        return default

    def atoms(self) -> list["Condition"]:
        if self.kind in ATOM_KINDS:
            return [self]
        out: list[Condition] = []
        for child in self.children:
            out.extend(child.atoms())
        return out

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind}
        d.update({k: v for k, v in self.params})
        if self.children:
            d["children"] = [c.to_dict() for c in self.children]
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Condition":
        kind = data["kind"]
        children = tuple(cls.from_dict(c) for c in data.get("children", ()))
        params = tuple(
            sorted((k, v) for k, v in data.items() if k not in ("kind", "children"))
        )
        return cls(kind=kind, children=children, params=params)


def all_of(*children: Condition) -> Condition:
    return Condition(kind="and", children=tuple(children))


def any_of(*children: Condition) -> Condition:
    return Condition(kind="or", children=tuple(children))


def negate(child: Condition) -> Condition:
    return Condition(kind="not", children=(child,))


def op_completed(op: "OperationId | str") -> Condition:
    return Condition(kind="op-completed", params=(("op", op_label(op)),))


def numeric_compare(key: str, cmp: str, bound: Any) -> Condition:
    if cmp not in _COMPARATORS:
        raise ValueError(f"unknown comparator {cmp!r}")
    return Condition(
        kind="numeric-compare", params=(("bound", bound), ("cmp", cmp), ("key", key))
    )


def before_deadline(key: str, by: int) -> Condition:
    return Condition(kind="deadline", params=(("by", by), ("key", key)))


def location_equals(key: str, location: str) -> Condition:
    return Condition(kind="location-equals", params=(("key", key), ("location", location)))


# ---------------------------------------------------------------------------
# Snapshot triple
# ---------------------------------------------------------------------------

DEP_UNKNOWN = "unknown"
DEP_SATISFIED = "satisfied"
DEP_VIOLATED = "violated"


@dataclass(frozen=True)
class StateSnapshot:
    """Checkpointable triple: entities, log cursor + op statuses, dependency
    satisfaction map keyed "src->dst"."""

    app: AppState = field(default_factory=AppState)
    log_cursor: int = 0
    op_status: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    dependencies: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)

    def with_app(self, app: AppState) -> "StateSnapshot":
        return StateSnapshot(app, self.log_cursor, self.op_status, self.dependencies)

    def at_cursor(self, cursor: int) -> "StateSnapshot":
        return StateSnapshot(self.app, cursor, self.op_status, self.dependencies)

    def with_op_status(self, op: str, status: OpStatus | None, tick: int | None = None) -> "StateSnapshot":
        table = {k: dict(v) for k, v in self.op_status.items()}
        table[op] = {"status": status.value if status else None, "tick": tick}
        return StateSnapshot(self.app, self.log_cursor, table, self.dependencies)

    def with_dependency(self, src: str, dst: str, state: str, tick: int | None = None) -> "StateSnapshot":
        deps = {k: dict(v) for k, v in self.dependencies.items()}
        deps[f"{src}->{dst}"] = {"state": state, "tick": tick}
        return StateSnapshot(self.app, self.log_cursor, self.op_status, deps)

    def to_dict(self) -> dict:
        return {
            "app": self.app.to_dict(),
            "log_cursor": self.log_cursor,
            "op_status": {k: dict(v) for k, v in sorted(self.op_status.items())},
            "dependencies": {k: dict(v) for k, v in sorted(self.dependencies.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StateSnapshot":
        return cls(
            app=AppState.from_dict(data.get("app", {})),
            log_cursor=int(data.get("log_cursor", 0)),
            op_status={k: dict(v) for k, v in data.get("op_status", {}).items()},
            dependencies={k: dict(v) for k, v in data.get("dependencies", {}).items()},
        )

    def digest(self) -> str:
        return digest(self.to_dict())


def resolve_key(key: str, snap: StateSnapshot) -> Any:
    """Resolve "entity:<key>.<field>[...]" or "op:<label>.<field>" in a snapshot."""
    if key.startswith("entity:"):
        path = key[len("entity:"):].split(".")
        record = snap.app.get(path[0])
        if record is None:
            raise UnresolvableAtom(key)
        value: Any = record
        for part in path[1:]:
            if not isinstance(value, Mapping) or part not in value:
                raise UnresolvableAtom(key)
            value = value[part]
        return value
    if key.startswith("op:"):
        path = key[len("op:"):].split(".")
        entry = snap.op_status.get(path[0])
        if entry is None:
            raise UnresolvableAtom(key)
        field_name = path[1] if len(path) > 1 else "status"
        if field_name not in entry:
            raise UnresolvableAtom(key)
        return entry[field_name]
    raise UnresolvableAtom(key)


def _resolve_bound(bound: Any, snap: StateSnapshot) -> Any:
    if isinstance(bound, str) and bound.startswith("@"):
        return resolve_key(bound[1:], snap)
    return bound


def evaluate_condition(cond: Condition, snap: StateSnapshot) -> bool:
    """Evaluate a condition tree against a snapshot. Deterministic and total
    over resolvable atoms; raises UnresolvableAtom otherwise."""
    if cond.kind == "and":
        return all(evaluate_condition(c, snap) for c in cond.children)
    if cond.kind == "or":
        return any(evaluate_condition(c, snap) for c in cond.children)
    if cond.kind == "not":
        return not evaluate_condition(cond.children[0], snap)
    if cond.kind == "op-completed":
        op = cond.param("op")
        entry = snap.op_status.get(op)
        if entry is None:
            raise UnresolvableAtom(f"op:{op}")
        return entry.get("status") == OpStatus.COMPLETED.value
    if cond.kind == "numeric-compare":
        value = resolve_key(cond.param("key"), snap)
        bound = _resolve_bound(cond.param("bound"), snap)
        return _COMPARATORS[cond.param("cmp")](value, bound)
    if cond.kind == "deadline":
        value = resolve_key(cond.param("key"), snap)
        return value <= cond.param("by")
    if cond.kind == "location-equals":
        value = resolve_key(cond.param("key"), snap)
        return value == cond.param("location")
    raise ValueError(f"unknown condition kind {cond.kind!r}")


# ---------------------------------------------------------------------------
# Invariants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InvariantSpec:
    name: str
    severity: str  # "hard" | "soft"
    cond: Condition
    description: str = ""


@dataclass(frozen=True)
class InvariantViolation:
    name: str
    severity: str
    keys: tuple[str, ...]
    detail: str = ""


def check_invariants(
    invariants: Iterable[InvariantSpec], state: AppState
) -> list[InvariantViolation]:
    """Return every invariant predicate that evaluates false over the state.

    Total: an unresolvable predicate counts as a violation rather than an
    error, since a missing entity can never witness the invariant.
    """
    snap = StateSnapshot(app=state)
    violations: list[InvariantViolation] = []
    for inv in invariants:
        keys = tuple(
            str(atom.param("key")) for atom in inv.cond.atoms() if atom.param("key")
        )
        try:
            ok = evaluate_condition(inv.cond, snap)
            detail = "" if ok else "predicate false"
        except UnresolvableAtom as exc:
            ok = False
            detail = str(exc)
        if not ok:
            violations.append(
                InvariantViolation(inv.name, inv.severity, keys, detail)
            )
    return violations


# ---------------------------------------------------------------------------
# Dependency graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DepEdge:
    src: str
    dst: str
    cond: Condition | None = None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"src": self.src, "dst": self.dst}
        if self.cond is not None:
            d["cond"] = self.cond.to_dict()
        return d


@dataclass(frozen=True)
class DependencyGraph:
    """Directed acyclic graph of operation dependencies with edge conditions."""

    nodes: tuple[str, ...]
    edges: tuple[DepEdge, ...]

    @classmethod
    def build(
        cls,
        nodes: Iterable[OperationId | str],
        edges: Iterable[tuple | DepEdge],
    ) -> "DependencyGraph":
        node_labels = tuple(op_label(n) for n in nodes)
        seen = set(node_labels)
        dep_edges = []
        for e in edges:
            edge = e if isinstance(e, DepEdge) else DepEdge(op_label(e[0]), op_label(e[1]), e[2] if len(e) > 2 else None)
            if edge.src not in seen or edge.dst not in seen:
                raise UnknownOperation(f"edge {edge.src}->{edge.dst} references unknown node")
            dep_edges.append(edge)
        graph = cls(nodes=node_labels, edges=tuple(dep_edges))
        topological_order(graph)  # raises CycleDetected on a bad graph
        return graph

    def successors(self, label: str) -> list[str]:
        return sorted({e.dst for e in self.edges if e.src == label})

    def predecessors(self, label: str) -> list[str]:
        return sorted({e.src for e in self.edges if e.dst == label})

    def edges_into(self, label: str) -> list[DepEdge]:
        return [e for e in self.edges if e.dst == label]

    def dependents(self, label: str) -> set[str]:
        """Strict transitive downstream set of a node."""
        if label not in self.nodes:
            raise UnknownOperation(label)
        out: set[str] = set()
        frontier = [label]
        while frontier:
            current = frontier.pop()
            for nxt in self.successors(current):
                if nxt not in out:
                    out.add(nxt)
                    frontier.append(nxt)
        return out


def topological_order(graph: DependencyGraph) -> list[str]:
    """Kahn's algorithm with a lexical tie-break on label, so identical graphs
    always order identically. Raises CycleDetected with one witness cycle."""
    import heapq

    indegree = {n: 0 for n in graph.nodes}
    for e in graph.edges:
        indegree[e.dst] += 1
    ready = [n for n, d in sorted(indegree.items()) if d == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for nxt in graph.successors(node):
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(order) < len(graph.nodes):
        remaining = {n for n in graph.nodes if n not in order}
        raise CycleDetected(_find_cycle(graph, remaining))
    return order


def _find_cycle(graph: DependencyGraph, candidates: set[str]) -> list[str]:
    start = sorted(candidates)[0]
    path: list[str] = []
    seen: set[str] = set()
    node = start
    while node not in seen:
        seen.add(node)
        path.append(node)
        nexts = [n for n in graph.successors(node) if n in candidates]
        if not nexts:
            return path
        node = nexts[0]
    return path[path.index(node):] + [node]


def affected_set(
    graph: DependencyGraph,
    failed: OperationId | str,
    log: Iterable[OperationRecord],
) -> list[str]:
    """Completed operations affected by a failure: the failed op itself (if it
    completed) plus its transitive dependents, ordered for compensation as the
    reverse of their completion order."""
    label = op_label(failed)
    if label not in graph.nodes:
        raise UnknownOperation(label)
    affected = graph.dependents(label) | {label}
    completion: list[str] = []
    for rec in log:
        if rec.status == OpStatus.COMPLETED and rec.op not in completion:
            completion.append(rec.op)
    return [op for op in reversed(completion) if op in affected]


# ---------------------------------------------------------------------------
# Saga structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompensationSpec:
    """How to undo one operation: inverse actions, preconditions, and the
    recovery patch applied to application state."""

    for_op: str
    inverse_actions: tuple[str, ...] = ()
    preconditions: Condition | None = None
    recovery_patch: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Saga:
    """Ordered forward transactions plus one compensation spec per operation.

    The forward order must be a topological order of the dependency graph
    restricted to the saga's operations.
    """

    forward: tuple[str, ...]
    compensations: Mapping[str, CompensationSpec] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        forward: Iterable[OperationId | str],
        compensations: Mapping[str, CompensationSpec] | None = None,
        graph: DependencyGraph | None = None,
    ) -> "Saga":
        order = tuple(op_label(o) for o in forward)
        if len(set(order)) != len(order):
            raise ValueError("saga forward order repeats an operation")
        if graph is not None:
            position = {label: i for i, label in enumerate(order)}
            for e in graph.edges:
                if e.src in position and e.dst in position:
                    if position[e.src] >= position[e.dst]:
                        raise ValueError(
                            f"forward order violates dependency {e.src}->{e.dst}"
                        )
        return cls(forward=order, compensations=dict(compensations or {}))
