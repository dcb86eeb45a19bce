"""Workflow template construction from a problem specification.

Stage 1 extracts roles and builds the node/edge network from the declared
constraints; stage 2 attaches one agent, one compensation agent, and one log
schema to every node and edge; stage 3 loops structural, constraint, and
compensation validation with rule-based repairs until the template passes or
refinement diverges.

Generators are pluggable pure functions; the defaults are deterministic rule
tables keyed on the scenario vocabulary (itinerary legs, gathering persons
and tasks), so identical specs yield digest-identical templates.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

from . import agents as agents_mod
from .errors import CycleDetected, RefinementDiverged, RoleExtractionEmpty, SchemaGapDetected
from .planning import WorldModel, parse_tick
from .state import (
    Condition,
    DepEdge,
    DependencyGraph,
    Saga,
    canonical_json,
    digest,
    op_completed,
    topological_order,
)

REFINEMENT_CAP = 10


@dataclass(frozen=True)
class ProblemSpec:
    """Scenario input: structured description, constraint set, and the named
    objective predicates a workflow is judged against."""

    description: Mapping[str, Any]
    constraints: tuple[dict, ...] = ()
    metrics: tuple[dict, ...] = ()

    def __post_init__(self):
        for metric in self.metrics:
            if "condition" not in metric:
                raise ValueError(
                    f"metric {metric.get('name', '?')!r} must be a named condition predicate"
                )
            Condition.from_dict(metric["condition"])  # must parse

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ProblemSpec":
        return cls(
            description=dict(data.get("description", {})),
            constraints=tuple(dict(c) for c in data.get("constraints", ())),
            metrics=tuple(dict(m) for m in data.get("metrics", ())),
        )


@dataclass
class TemplateNode:
    label: str
    role: str
    profile: dict = field(default_factory=dict)
    agent: dict | None = None
    comp_agent: dict | None = None
    log_schema: dict | None = None


@dataclass
class TemplateEdge:
    src: str
    dst: str
    cond: Condition | None = None
    constraint_id: str | None = None
    agent: dict | None = None
    comp_agent: dict | None = None
    log_schema: dict | None = None


@dataclass
class WorkflowTemplate:
    nodes: dict[str, TemplateNode]
    edges: list[TemplateEdge]
    rules: list[dict] = field(default_factory=list)  # constraint-id -> validation rule
    spec: ProblemSpec | None = None

    def graph(self) -> DependencyGraph:
        return DependencyGraph.build(
            list(self.nodes), [DepEdge(e.src, e.dst, e.cond) for e in self.edges]
        )

    def terminals(self) -> list[str]:
        with_out = {e.src for e in self.edges}
        return sorted(n for n in self.nodes if n not in with_out)

    def to_graph_doc(self) -> dict:
        return {
            "nodes": [
                {
                    "label": n.label,
                    "role": n.role,
                    "profile": n.profile,
                    "agent": n.agent,
                    "comp_agent": n.comp_agent,
                    "log_schema": n.log_schema,
                }
                for n in (self.nodes[k] for k in sorted(self.nodes))
            ],
            "edges": [
                {
                    "src": e.src,
                    "dst": e.dst,
                    "cond": e.cond.to_dict() if e.cond else None,
                    "constraint_id": e.constraint_id,
                    "agent": e.agent,
                    "comp_agent": e.comp_agent,
                    "log_schema": e.log_schema,
                }
                for e in self.edges
            ],
            "rules": self.rules,
        }

    def digest(self) -> str:
        return digest(self.to_graph_doc())


# ---------------------------------------------------------------------------
# Default rule-based generators
# ---------------------------------------------------------------------------

def extract_roles(description: Mapping[str, Any]) -> list[str]:
    kind = description.get("kind")
    roles: list[str] = []
    if kind == "itinerary":
        for leg in description.get("legs", ()):
            role = f"{leg['type']}-booking"
            if role not in roles:
                roles.append(role)
    elif kind == "gathering":
        persons = description.get("persons", ())
        if any(p.get("can_drive") for p in persons):
            roles.append("driver")
        if description.get("tasks"):
            roles.append("cook")
        if any(p.get("needs_pickup") for p in persons):
            roles.append("passenger")
    if not roles:
        raise RoleExtractionEmpty(f"no roles found in {kind or 'unknown'} description")
    return roles


def map_role(description: Mapping[str, Any], roles: Sequence[str]) -> list[TemplateNode]:
    kind = description.get("kind")
    nodes: list[TemplateNode] = []
    if kind == "itinerary":
        for index, leg in enumerate(description.get("legs", ()), start=1):
            label = f"T{index}"
            nodes.append(
                TemplateNode(
                    label=label,
                    role=f"{leg['type']}-booking",
                    profile={"agent_kind": leg["type"], "leg": dict(leg),
                             "inputs": _leg_inputs(leg, description)},
                )
            )
        return nodes
    if kind == "gathering":
        for person in description.get("persons", ()):
            if person.get("arrives_at") is not None:
                nodes.append(TemplateNode(f"arrive-{person['name']}", "arrival",
                                          {"person": person["name"]}))
            if person.get("rents_vehicle"):
                nodes.append(TemplateNode(f"rent-car-{person['name']}", "driver",
                                          {"person": person["name"]}))
        for person in description.get("persons", ()):
            if person.get("needs_pickup"):
                nodes.append(TemplateNode(f"pickup-{person['name']}", "passenger",
                                          {"person": person["name"],
                                           "driver": person.get("pickup_driver")}))
        for task in description.get("tasks", ()):
            nodes.append(TemplateNode(task["label"], "cook", {"task": dict(task)}))
        milestone = description.get("milestone")
        if milestone:
            nodes.append(TemplateNode(milestone, "milestone", {}))
        return nodes
    raise RoleExtractionEmpty(f"unknown description kind {kind!r}")


def _leg_inputs(leg: Mapping[str, Any], description: Mapping[str, Any]) -> dict:
    budget = description.get("budget_limit_cents", 0)
    if leg["type"] == "flight":
        return {
            "travel_dates": [leg["date"]],
            "budget_limit": budget,
            "airline_preferences": {"direct": leg.get("direct", True),
                                    "route": f"{leg['from']}-{leg['to']}"},
            "passenger_details": list(description.get("passengers", ())),
        }
    if leg["type"] == "hotel":
        return {
            "checkin_date": leg["checkin"],
            "checkout_date": leg["checkout"],
            "location_constraints": {"city": leg["city"]},
            "amenity_preferences": {"stars": leg.get("stars", [3, 4])},
            "budget_limit": budget,
        }
    if leg["type"] == "train":
        return {
            "departure_location": leg["from"],
            "arrival_location": leg["to"],
            "travel_time": leg["date"],
            "connection_requirements": dict(leg.get("connection", {})),
        }
    raise ValueError(f"unknown leg type {leg['type']!r}")


def map_dep(
    nodes: Sequence[TemplateNode],
    constraints: Sequence[Mapping[str, Any]],
    description: Mapping[str, Any],
) -> list[TemplateEdge]:
    labels = {n.label for n in nodes}
    edges: list[TemplateEdge] = []
    for constraint in constraints:
        if constraint.get("kind") != "requires-completed":
            continue
        src, dst = constraint["prereq"], constraint["op"]
        if src in labels and dst in labels:
            edges.append(TemplateEdge(src, dst, op_completed(src), constraint["id"]))
    if description.get("kind") == "gathering":
        edges.extend(_gathering_edges(nodes, description))
    return edges


def _gathering_edges(nodes, description) -> list[TemplateEdge]:
    labels = {n.label for n in nodes}
    persons = {p["name"]: p for p in description.get("persons", ())}
    milestone = description.get("milestone")
    edges = []

    def add(src, dst, constraint_id=None):
        if src in labels and dst in labels and src != dst:
            edges.append(TemplateEdge(src, dst, op_completed(src), constraint_id))

    for name, person in persons.items():
        if person.get("rents_vehicle"):
            add(f"arrive-{name}", f"rent-car-{name}")
    for name, person in persons.items():
        if not person.get("needs_pickup"):
            continue
        add(f"arrive-{name}", f"pickup-{name}")
        driver = person.get("pickup_driver")
        if driver:
            # driver availability: the rental if they need one, else arrival
            enabler = (
                f"rent-car-{driver}" if persons.get(driver, {}).get("rents_vehicle")
                else f"arrive-{driver}"
            )
            add(enabler, f"pickup-{name}", f"driver-available-{name}")
        if milestone:
            add(f"pickup-{name}", milestone)
    for task in description.get("tasks", ()):
        if task.get("after"):
            add(task["after"], task["label"], f"order-{task['label']}")
        if milestone:
            add(task["label"], milestone)
    return edges


def define_log_schema(kind: str, profile: Mapping[str, Any]) -> dict:
    if kind in agents_mod.AGENT_SCHEMAS:
        spec = agents_mod.AGENT_SCHEMAS[kind]
        return {"fields": list(spec["input"]) + list(spec["output"]) + list(spec["internal"])}
    if kind == "edge":
        return {"fields": ["src", "dst", "payload", "verdict", "tick"]}
    return {"fields": ["label", "actor", "location", "start", "end", "status"]}


def define_node_agent(node: TemplateNode, log_schema: Mapping[str, Any]) -> dict:
    kind = node.profile.get("agent_kind", "step")
    if kind in agents_mod.AGENT_SCHEMAS:
        spec = agents_mod.AGENT_SCHEMAS[kind]
        return {"kind": kind, "node": node.label,
                "reads": list(spec["input"]), "writes": list(spec["output"])}
    return {"kind": "step", "node": node.label,
            "reads": ["label", "actor", "location"], "writes": ["status", "start", "end"]}


def define_edge_agent(edge: TemplateEdge, log_schema: Mapping[str, Any]) -> dict:
    return {
        "kind": "edge-validator",
        "edge": f"{edge.src}->{edge.dst}",
        "reads": ["src", "dst", "payload"],
        "writes": ["verdict", "tick"],
    }


def define_comp_agent(agent: Mapping[str, Any], log_schema: Mapping[str, Any]) -> dict:
    return {
        "kind": f"compensate-{agent['kind']}",
        "target": agent.get("node") or agent.get("edge"),
        "inverse_of": agent["kind"],
        "writes": list(agent.get("writes", ())),
    }


@dataclass(frozen=True)
class GeneratorSuite:
    """Pluggable pure generators; identical (spec, seed) inputs produce
    identical templates."""

    extract_roles: Callable = extract_roles
    map_role: Callable = map_role
    map_dep: Callable = map_dep
    define_log_schema: Callable = define_log_schema
    define_node_agent: Callable = define_node_agent
    define_edge_agent: Callable = define_edge_agent
    define_comp_agent: Callable = define_comp_agent
    seed: int = 0


# ---------------------------------------------------------------------------
# Stage 1: network construction
# ---------------------------------------------------------------------------

def build_network(spec: ProblemSpec, gen: GeneratorSuite = GeneratorSuite()) -> WorkflowTemplate:
    roles = gen.extract_roles(spec.description)
    if not roles:
        raise RoleExtractionEmpty("role extraction produced nothing")
    nodes = gen.map_role(spec.description, roles)
    if not nodes:
        raise RoleExtractionEmpty("no nodes mapped from roles")
    edges = gen.map_dep(nodes, spec.constraints, spec.description)
    template = WorkflowTemplate(nodes={n.label: n for n in nodes}, edges=edges, spec=spec)
    template.graph()  # raises CycleDetected on a bad constraint set
    return template


# ---------------------------------------------------------------------------
# Stage 2: agent specification
# ---------------------------------------------------------------------------

def attach_agents(template: WorkflowTemplate, gen: GeneratorSuite = GeneratorSuite()) -> WorkflowTemplate:
    for node in template.nodes.values():
        kind = node.profile.get("agent_kind", "step")
        node.log_schema = gen.define_log_schema(kind, node.profile)
        node.agent = gen.define_node_agent(node, node.log_schema)
        node.comp_agent = gen.define_comp_agent(node.agent, node.log_schema)
        _check_schema_gap(node.label, node.agent, node.log_schema)
    for edge in template.edges:
        edge.log_schema = gen.define_log_schema("edge", {})
        edge.agent = gen.define_edge_agent(edge, edge.log_schema)
        edge.comp_agent = gen.define_comp_agent(edge.agent, edge.log_schema)
        _check_schema_gap(f"{edge.src}->{edge.dst}", edge.agent, edge.log_schema)
    return template


def _check_schema_gap(label: str, agent: Mapping[str, Any], schema: Mapping[str, Any]) -> None:
    fields = set(schema.get("fields", ()))
    used = set(agent.get("reads", ())) | set(agent.get("writes", ()))
    missing = used - fields
    if missing:
        raise SchemaGapDetected(label, sorted(missing))


# ---------------------------------------------------------------------------
# Stage 3: validation and refinement
# ---------------------------------------------------------------------------

def validate_and_refine(
    template: WorkflowTemplate,
    metrics: Sequence[Mapping[str, Any]] = (),
    *,
    world: WorldModel | None = None,
    cap: int = REFINEMENT_CAP,
) -> WorkflowTemplate:
    """Loop validation and rule-based repair until the template is sound.

    Raises RefinementDiverged when the failure count grows, or when the
    iteration cap is reached with failures outstanding (e.g. an unsatisfiable
    deadline no repair can fix)."""
    previous: int | None = None
    for _ in range(cap):
        failures = _validate_workflow(template, metrics, world)
        if not failures:
            return template
        if previous is not None and len(failures) > previous:
            raise RefinementDiverged(failures)
        previous = len(failures)
        template = _refine(template, failures)
    failures = _validate_workflow(template, metrics, world)
    if failures:
        raise RefinementDiverged(failures)
    return template


def _validate_workflow(template, metrics, world) -> list[str]:
    failures: list[str] = []
    failures.extend(_structural_validation(template))
    failures.extend(_constraint_validation(template, world))
    failures.extend(_compensation_validation(template))
    return failures


def _structural_validation(template: WorkflowTemplate) -> list[str]:
    try:
        topological_order(template.graph())
    except CycleDetected as exc:
        return [f"structural:cycle:{'->'.join(exc.cycle)}"]
    terminals = template.terminals()
    if not terminals:
        return ["structural:no-terminal"]
    goal = terminals[-1]
    graph = template.graph()
    failures = []
    for label in sorted(template.nodes):
        if label == goal:
            continue
        if goal not in graph.dependents(label):
            failures.append(f"structural:unreachable-terminal:{label}")
    return failures


def _constraint_validation(template: WorkflowTemplate, world: WorldModel | None) -> list[str]:
    spec = template.spec
    if spec is None:
        return []
    covered_by_edges = {e.constraint_id for e in template.edges if e.constraint_id}
    covered_by_rules = {r.get("constraint_id") for r in template.rules}
    failures = []
    for constraint in spec.constraints:
        cid = constraint["id"]
        if constraint.get("kind") == "deadline" and world is not None:
            if not _deadline_reachable(constraint, spec.description, world):
                failures.append(f"constraint:unsatisfiable:{cid}")
                continue
        if cid not in covered_by_edges and cid not in covered_by_rules:
            failures.append(f"constraint:unmapped:{cid}")
    return failures


def _deadline_reachable(constraint, description, world: WorldModel) -> bool:
    """Earliest-arrival probe: some driver must be able to reach the deadline
    location in time."""
    target = constraint.get("location")
    by = parse_tick(constraint["by"])
    if target is None:
        return True
    best: int | None = None
    for name, actor in world.actors.items():
        if not actor.get("can_drive"):
            continue
        start = actor.get("start_location")
        avail = actor.get("available_from", 0)
        for person in description.get("persons", ()):
            if person.get("name") == name and person.get("arrives_at") is not None:
                avail = max(avail, parse_tick(person["arrives_at"]))
                start = person.get("arrival_location", start)
        if start is None:
            continue
        arrival = avail + world.travel_time(start, target)
        best = arrival if best is None else min(best, arrival)
    return best is not None and best <= by


def _compensation_validation(template: WorkflowTemplate) -> list[str]:
    failures = []
    for label in sorted(template.nodes):
        node = template.nodes[label]
        if node.comp_agent is None:
            failures.append(f"compensation:missing:{label}")
            continue
        if not _dry_run_compensation(node):
            failures.append(f"compensation:broken:{label}")
    for edge in template.edges:
        if edge.comp_agent is None:
            failures.append(f"compensation:missing:{edge.src}->{edge.dst}")
    return failures


def _dry_run_compensation(node: TemplateNode) -> bool:
    # Simulate the node's effect on a scratch state and invert it.
    scratch = {f"effect:{node.label}": {"status": "committed"}}
    target = node.comp_agent.get("target") if node.comp_agent else None
    if target != node.label:
        return False
    scratch.pop(f"effect:{node.label}")
    return not scratch


def _refine(template: WorkflowTemplate, failures: Sequence[str]) -> WorkflowTemplate:
    gen = GeneratorSuite()
    for failure in failures:
        parts = failure.split(":", 2)
        if parts[0] == "compensation" and parts[1] in ("missing", "broken"):
            label = parts[2]
            if label in template.nodes:
                node = template.nodes[label]
                if node.agent is None:
                    node.log_schema = gen.define_log_schema(
                        node.profile.get("agent_kind", "step"), node.profile
                    )
                    node.agent = gen.define_node_agent(node, node.log_schema)
                node.comp_agent = gen.define_comp_agent(node.agent, node.log_schema or {})
            else:
                for edge in template.edges:
                    if f"{edge.src}->{edge.dst}" == label and edge.agent is not None:
                        edge.comp_agent = gen.define_comp_agent(edge.agent, edge.log_schema or {})
        elif parts[0] == "constraint" and parts[1] == "unmapped":
            cid = parts[2]
            constraint = next(
                (c for c in (template.spec.constraints if template.spec else ()) if c["id"] == cid),
                None,
            )
            if constraint is not None:
                template.rules.append(_constraint_rule(constraint))
        elif parts[0] == "structural" and parts[1] == "unreachable-terminal":
            label = parts[2]
            terminals = template.terminals()
            if terminals:
                template.edges.append(
                    TemplateEdge(label, terminals[-1], op_completed(label), None)
                )
    return template


def _constraint_rule(constraint: Mapping[str, Any]) -> dict:
    """Turn a declarative constraint into a validation-rule stub carrying its
    id; the harness materializes rule files from these."""
    return {"constraint_id": constraint["id"], "kind": constraint.get("kind"),
            "params": {k: v for k, v in constraint.items() if k not in ("id", "kind")}}


# ---------------------------------------------------------------------------
# Template -> executable saga
# ---------------------------------------------------------------------------

def to_execution(template: WorkflowTemplate, catalog) -> tuple[DependencyGraph, Saga, list]:
    """Materialize a booking template: dependency graph, saga with
    compensation specs, and node execution profiles."""
    from .coordinator import NodeSpec
    from .state import CompensationSpec

    graph = template.graph()
    order = topological_order(graph)
    compensations = {}
    node_specs = []
    for label in order:
        node = template.nodes[label]
        kind = node.profile.get("agent_kind", "step")
        node_specs.append(
            NodeSpec(op=label, agent_kind=kind, inputs=dict(node.profile.get("inputs", {})))
        )
        compensations[label] = CompensationSpec(
            for_op=label,
            inverse_actions=tuple(node.comp_agent.get("writes", ("cancel",))) if node.comp_agent else ("cancel",),
            recovery_patch={"remove_entities": [f"booking:{label}"]},
        )
    saga = Saga.build(order, compensations, graph)
    return graph, saga, node_specs


def make_bindings(template: WorkflowTemplate, catalog) -> list:
    from .coordinator import AgentBinding

    bindings = []
    for label in sorted(template.nodes):
        kind = template.nodes[label].profile.get("agent_kind", "step")
        bindings.append(
            AgentBinding(
                op=label,
                executor=lambda inputs, _kind=kind: agents_mod.execute_agent(_kind, inputs, catalog),
                compensator=lambda internal, _kind=kind: agents_mod.compensate_agent(_kind, internal),
            )
        )
    return bindings
