"""Saga execution: five-phase per-operation protocol, failure detection,
reverse-order compensation, crash recovery, and replanning guards.

Every operation runs pre-validation, execution, output-validation, state
commitment, and compensation registration, each phase logged as an explicit
marker so a crash can resume at the exact sub-phase boundary. Application
state changes happen only at commitment and compensation, through the same
pure patch-application helpers the recovery path replays, so a resumed run
reconstructs the live state exactly.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

from . import planning, validation
from .agents import track_budget
from .errors import (
    BindingMissing,
    CompensationFailed,
    RetryExhausted,
    RewriteOfPast,
    SagaError,
    UnknownOperation,
    ValidatorUnavailable,
)
from .state import (
    AppState,
    CompensationSpec,
    DEP_SATISFIED,
    DEP_UNKNOWN,
    DEP_VIOLATED,
    DependencyGraph,
    OperationRecord,
    OpStatus,
    Saga,
    StateSnapshot,
    check_invariants,
    evaluate_condition,
    op_completed,
)
from .store import ContextStore, LogKind

PHASES = (
    "pre-validation",
    "execution",
    "output-validation",
    "commit",
    "compensation-registration",
)

MODE_FORWARD = "forward"
MODE_COMPENSATING = "compensating"
MODE_COMMITTED = "committed"
MODE_COMPENSATED = "compensated"
MODE_ABORTED = "aborted"

OUTCOME_COMMITTED = "committed"
OUTCOME_COMPENSATED = "compensated-to-checkpoint"
OUTCOME_ABORTED = "aborted"

BUDGET_KEY = "budget"


class _StepFailure(SagaError):
    def __init__(self, op: str, phase: str, reason: str):
        super().__init__(f"{op} failed at {phase}: {reason}")
        self.op = op
        self.phase = phase
        self.reason = reason


@dataclass
class NodeSpec:
    """Execution profile of one operation: which agent runs it, its static
    inputs, and where its committed effects land."""

    op: str
    agent_kind: str
    inputs: dict
    entity_key: str = ""
    expense_item: str = ""

    def __post_init__(self):
        if not self.entity_key:
            self.entity_key = f"booking:{self.op}"
        if not self.expense_item:
            self.expense_item = self.op


@dataclass
class AgentBinding:
    op: str
    executor: Callable[[Mapping[str, Any]], tuple[dict, dict]]
    compensator: Callable[[Mapping[str, Any]], dict]


@dataclass
class SagaRun:
    saga: Saga
    run_id: str
    checkpoint_id: str
    mode: str = MODE_FORWARD
    cursor: int = 0
    compensation_queue: list[str] = field(default_factory=list)
    snapshot: StateSnapshot = field(default_factory=StateSnapshot)
    outputs: dict[str, dict] = field(default_factory=dict)
    internals: dict[str, dict] = field(default_factory=dict)
    registered: dict[str, CompensationSpec] = field(default_factory=dict)
    completion_order: list[str] = field(default_factory=list)
    records: list[OperationRecord] = field(default_factory=list)
    tick: int = 0

    def next_tick(self) -> int:
        self.tick += 1
        return self.tick


# -- pure patch application (shared by live execution and recovery) ----------

def apply_commit_patch(app: AppState, patch: Mapping[str, Any]) -> AppState:
    for key, record in patch.get("entities", {}).items():
        app = app.with_entity(key, record)
    expense = patch.get("expense")
    if expense and app.get(BUDGET_KEY) is not None:
        ledger, _ = track_budget(app.get(BUDGET_KEY), expense)
        app = app.with_entity(BUDGET_KEY, ledger)
    return app


def apply_compensation_patch(app: AppState, patch: Mapping[str, Any]) -> AppState:
    for key in patch.get("remove_entities", ()):
        app = app.without_entity(key)
    refund = patch.get("refund")
    if refund and app.get(BUDGET_KEY) is not None:
        ledger, _ = track_budget(app.get(BUDGET_KEY), refund)
        app = app.with_entity(BUDGET_KEY, ledger)
    return app


class Coordinator:
    """Owns the store's single writer role and drives saga runs end to end."""

    def __init__(
        self,
        store: ContextStore,
        graph: DependencyGraph,
        node_specs: Sequence[NodeSpec],
        *,
        intra_rules: Sequence[validation.ValidationRule] = (),
        inter_rules: Sequence[validation.ValidationRule] = (),
        invariants: Sequence = (),
        facts: Mapping[str, Any] | None = None,
        failure_hook: Callable[[str, str], None] | None = None,
        envelope_hook: Callable[[validation.MessageEnvelope], validation.MessageEnvelope] | None = None,
        max_augment_rounds: int = validation.DEFAULT_MAX_AUGMENT_ROUNDS,
    ):
        if intra_rules is None or inter_rules is None:
            raise ValidatorUnavailable("validation rule sets must be provided")
        self.store = store
        self.graph = graph
        self.specs = {s.op: s for s in node_specs}
        self.intra_rules = list(intra_rules)
        self.inter_rules = list(inter_rules)
        self.invariants = list(invariants)
        self.facts = dict(facts or {})
        self.failure_hook = failure_hook
        self.envelope_hook = envelope_hook
        self.max_augment_rounds = max_augment_rounds

    # -- run lifecycle -------------------------------------------------------

    def start(self, saga: Saga, initial_app: AppState, run_id: str = "run-1") -> SagaRun:
        snapshot = StateSnapshot(app=initial_app, log_cursor=self.store.last_seq)
        for op in saga.forward:
            snapshot = snapshot.with_op_status(op, None)
        for edge in self.graph.edges:
            snapshot = snapshot.with_dependency(edge.src, edge.dst, DEP_UNKNOWN)
        checkpoint_id = self.store.checkpoint(snapshot)
        self.store.append(
            LogKind.CONTROL,
            {
                "event": "saga-start",
                "run_id": run_id,
                "forward": list(saga.forward),
                "checkpoint_id": checkpoint_id,
            },
        )
        return SagaRun(saga=saga, run_id=run_id, checkpoint_id=checkpoint_id, snapshot=snapshot)

    def execute(
        self,
        run: SagaRun,
        bindings: Sequence[AgentBinding],
        *,
        schedule: Sequence[str] | None = None,
        _resume: dict | None = None,
    ) -> tuple[StateSnapshot, str]:
        """Run the saga forward, compensating on failure.

        `schedule` overrides the execution order (it must stay consistent with
        the dependency graph); used for interleaving independent branches.
        Returns (final snapshot, outcome).
        """
        by_op = {b.op: b for b in bindings}
        missing = [op for op in run.saga.forward if op not in by_op]
        if missing:
            raise BindingMissing(f"no bindings for {missing}")
        order = list(schedule) if schedule is not None else list(run.saga.forward)
        if sorted(order) != sorted(run.saga.forward):
            raise UnknownOperation("schedule must cover exactly the saga's operations")
        position = {op: i for i, op in enumerate(order)}
        for edge in self.graph.edges:
            if edge.src in position and edge.dst in position and position[edge.src] > position[edge.dst]:
                raise UnknownOperation(f"schedule violates dependency {edge.src}->{edge.dst}")

        skip_phases: dict[str, dict] = (_resume or {}).get("phases", {})
        start_index = (_resume or {}).get("start_index", 0)

        if run.mode == MODE_COMPENSATING:
            return self._compensate(run, by_op, run.compensation_queue)

        for index in range(start_index, len(order)):
            op = order[index]
            run.cursor = index
            try:
                self._run_op(run, op, by_op[op], skip_phases.get(op, {}))
            except _StepFailure as failure:
                self.store.append(
                    LogKind.PHASE,
                    {"op": op, "phase": failure.phase, "status": "failed",
                     "reason": failure.reason, "tick": run.next_tick()},
                )
                plan = self.on_failure(run, op)
                if not plan:
                    run.mode = MODE_ABORTED
                    self.store.append(
                        LogKind.CONTROL,
                        {"event": "saga-aborted", "run_id": run.run_id, "op": op,
                         "reason": failure.reason},
                    )
                    return run.snapshot, OUTCOME_ABORTED
                return self._compensate(run, by_op, plan)

        run.mode = MODE_COMMITTED
        self.store.append(LogKind.CONTROL, {"event": "saga-committed", "run_id": run.run_id})
        return run.snapshot, OUTCOME_COMMITTED

    # -- the five phases -----------------------------------------------------

    def _hook(self, op: str, phase: str) -> None:
        if self.failure_hook is not None:
            self.failure_hook(op, phase)

    def _run_op(self, run: SagaRun, op: str, binding: AgentBinding, done: dict) -> None:
        spec = self.specs.get(op) or NodeSpec(op=op, agent_kind="generic", inputs={})

        # 1. pre-execution validation: dependencies and the incoming message
        if "pre-validation" not in done:
            try:
                self._hook(op, "pre-validation")
            except Exception as exc:  # injected failure
                raise _StepFailure(op, "pre-validation", str(exc))
            self._pre_validate(run, op, spec)
        # 2. transaction execution
        if "execution" in done:
            outputs, internal = done["execution"]["outputs"], done["execution"]["internal"]
            run.outputs[op], run.internals[op] = outputs, internal
        else:
            try:
                self._hook(op, "execution")
                outputs, internal = binding.executor(spec.inputs)
            except _StepFailure:
                raise
            except Exception as exc:
                raise _StepFailure(op, "execution", str(exc))
            run.outputs[op], run.internals[op] = outputs, internal
            self.store.append(
                LogKind.PHASE,
                {"op": op, "phase": "execution", "status": "ok", "tick": run.next_tick(),
                 "outputs": outputs, "internal": internal},
            )
        # 3. output validation (with bounded augmentation)
        if "output-validation" in done:
            run.outputs[op] = done["output-validation"]["outputs"]
        else:
            try:
                self._hook(op, "output-validation")
            except Exception as exc:
                raise _StepFailure(op, "output-validation", str(exc))
            self._validate_output(run, op, spec)
        # 4. state commitment
        if "commit" in done:
            pass  # already applied during log replay
        else:
            try:
                self._hook(op, "commit")
            except Exception as exc:
                raise _StepFailure(op, "commit", str(exc))
            self._commit(run, op, spec)
        # 5. compensation registration
        if "compensation-registration" not in done:
            try:
                self._hook(op, "compensation-registration")
            except Exception as exc:
                raise _StepFailure(op, "compensation-registration", str(exc))
            self._register_compensation(run, op, spec)

    def _pre_validate(self, run: SagaRun, op: str, spec: NodeSpec) -> None:
        for edge in self.graph.edges_into(op):
            cond = edge.cond or op_completed(edge.src)
            ok = evaluate_condition(cond, run.snapshot)
            run.snapshot = run.snapshot.with_dependency(
                edge.src, op, DEP_SATISFIED if ok else DEP_VIOLATED, run.tick
            )
            if not ok:
                raise _StepFailure(op, "pre-validation", f"dependency {edge.src}->{op} unsatisfied")

        envelope = validation.MessageEnvelope(
            from_agent="coordinator",
            to_agent=op,
            payload={**spec.inputs, "transaction_id": op},
            declared_schema=f"{spec.agent_kind}-input",
            depends_on=tuple(self.graph.predecessors(op)),
            send_time=run.tick,
        )
        if self.envelope_hook is not None:
            envelope = self.envelope_hook(envelope)
        verdict = validation.validate_message(envelope, run.snapshot, self.inter_rules)
        self.store.append(
            LogKind.VERDICT,
            {"op": op, "stage": "pre-validation", **verdict.to_dict(), "tick": run.next_tick()},
        )
        if verdict.outcome == validation.OUTCOME_REJECT:
            raise _StepFailure(op, "pre-validation", _verdict_reason(verdict))
        self.store.append(
            LogKind.PHASE,
            {"op": op, "phase": "pre-validation", "status": "ok", "tick": run.next_tick()},
        )

    def _validate_output(self, run: SagaRun, op: str, spec: NodeSpec) -> None:
        reasoning = self._reasoning(op)
        try:
            final_output, verdicts, response = validation.validation_loop(
                op,
                run.outputs[op],
                run.snapshot,
                self.intra_rules,
                allowed_fields=validation.default_schemas().get(f"{spec.agent_kind}-output", ()),
                max_rounds=self.max_augment_rounds,
                facts=self.facts,
                reasoning=reasoning,
            )
        except RetryExhausted as exc:
            raise _StepFailure(op, "output-validation", str(exc))
        for verdict in verdicts:
            self.store.append(
                LogKind.VERDICT,
                {"op": op, "stage": "output-validation", **verdict.to_dict(), "tick": run.next_tick()},
            )
        if response == validation.RESPONSE_COMPENSATE:
            raise _StepFailure(op, "output-validation", _verdict_reason(verdicts[-1]))
        if response == validation.RESPONSE_FEEDBACK:
            self.store.append(
                LogKind.CONTROL,
                {"event": "feedback-recorded", "op": op,
                 "failed": [f.to_dict() for f in verdicts[-1].failed]},
                category="reasoning",
            )
        run.outputs[op] = final_output
        self.store.append(
            LogKind.PHASE,
            {"op": op, "phase": "output-validation", "status": "ok", "tick": run.next_tick(),
             "outputs": final_output, "rounds": len(verdicts)},
        )

    def _commit(self, run: SagaRun, op: str, spec: NodeSpec) -> None:
        outputs = run.outputs[op]
        patch = _commit_patch(op, spec, outputs)
        new_app = apply_commit_patch(run.snapshot.app, patch)
        hard = [v for v in check_invariants(self.invariants, new_app) if v.severity == "hard"]
        if hard:
            raise _StepFailure(op, "commit", f"invariants violated: {[v.name for v in hard]}")
        tick = run.next_tick()
        run.snapshot = run.snapshot.with_app(new_app).with_op_status(op, OpStatus.COMPLETED, tick)
        run.completion_order.append(op)
        record = OperationRecord(
            op=op, inputs=dict(spec.inputs), timestamp=tick, status=OpStatus.COMPLETED,
            outputs=outputs, reasoning=tuple(self._reasoning(op)),
        )
        run.records.append(record)
        self.store.append(
            LogKind.PHASE,
            {"op": op, "phase": "commit", "status": "ok", "tick": tick, "state_patch": patch},
        )
        self.store.append(LogKind.OP_RECORD, record.to_dict())
        run.snapshot = run.snapshot.at_cursor(self.store.last_seq)

    def _register_compensation(self, run: SagaRun, op: str, spec: NodeSpec) -> None:
        comp = run.saga.compensations.get(op) or CompensationSpec(
            for_op=op,
            inverse_actions=("cancel-reservation", "refund-payment"),
            recovery_patch={"remove_entities": [spec.entity_key]},
        )
        run.registered[op] = comp
        self.store.append(
            LogKind.PHASE,
            {"op": op, "phase": "compensation-registration", "status": "ok",
             "tick": run.next_tick(),
             "inverse_actions": list(comp.inverse_actions),
             "recovery_patch": dict(comp.recovery_patch)},
        )

    def _reasoning(self, op: str) -> list[str]:
        return [f"requires:{dep}" for dep in self.graph.predecessors(op)]

    # -- failure and compensation ----------------------------------------------

    def on_failure(self, run: SagaRun, failed: str) -> list[str]:
        """Compensation plan per the recovery protocol: every completed
        operation, in reverse completion order."""
        if failed not in run.saga.forward:
            raise UnknownOperation(failed)
        plan = [op for op in reversed(run.completion_order)]
        run.compensation_queue = plan
        run.mode = MODE_COMPENSATING if plan else MODE_ABORTED
        return plan

    def _compensate(
        self, run: SagaRun, by_op: Mapping[str, AgentBinding], plan: Sequence[str]
    ) -> tuple[StateSnapshot, str]:
        self.store.append(
            LogKind.CONTROL,
            {"event": "compensation-start", "run_id": run.run_id, "plan": list(plan)},
        )
        snapshot = self.run_compensation(run, plan, by_op)
        self.store.append(
            LogKind.CONTROL, {"event": "saga-compensated", "run_id": run.run_id},
        )
        run.mode = MODE_COMPENSATED
        return snapshot, OUTCOME_COMPENSATED

    def run_compensation(
        self,
        run: SagaRun,
        plan: Sequence[str],
        bindings: Mapping[str, AgentBinding] | Sequence[AgentBinding],
        *,
        already_done: set[str] = frozenset(),
    ) -> StateSnapshot:
        """Execute compensations in order, applying recovery patches and
        flagging downstream dependencies for re-evaluation."""
        by_op = bindings if isinstance(bindings, Mapping) else {b.op: b for b in bindings}
        for op in plan:
            if op in already_done:
                continue
            spec = self.specs.get(op) or NodeSpec(op=op, agent_kind="generic", inputs={})
            comp = run.registered.get(op)
            if comp is not None and comp.preconditions is not None:
                if not evaluate_condition(comp.preconditions, run.snapshot):
                    return self._halt_compensation(run, op, "preconditions not met")
            try:
                agent_patch = by_op[op].compensator(run.internals.get(op, {}))
            except KeyError:
                return self._halt_compensation(run, op, "no compensator bound")
            except Exception as exc:
                return self._halt_compensation(run, op, str(exc))
            patch = _compensation_patch(op, spec, run, agent_patch)
            run.snapshot = run.snapshot.with_app(
                apply_compensation_patch(run.snapshot.app, patch)
            )
            tick = run.next_tick()
            run.snapshot = run.snapshot.with_op_status(op, OpStatus.COMPENSATED, tick)
            for dst in self.graph.successors(op):
                run.snapshot = run.snapshot.with_dependency(op, dst, DEP_UNKNOWN, tick)
            record = OperationRecord(
                op=op, inputs={}, timestamp=tick, status=OpStatus.COMPENSATED,
                outputs=agent_patch,
            )
            run.records.append(record)
            self.store.append(
                LogKind.COMPENSATION,
                {"op": op, "tick": tick, "patch": patch,
                 "reevaluate": self.graph.successors(op)},
            )
            self.store.append(LogKind.OP_RECORD, record.to_dict())
        # state verification before declaring recovery complete
        violations = [v.name for v in check_invariants(self.invariants, run.snapshot.app)
                      if v.severity == "hard"]
        self.store.append(
            LogKind.CONTROL,
            {"event": "compensation-verified", "run_id": run.run_id,
             "invariant_violations": violations,
             "entity_digest": run.snapshot.app.entity_digest()},
        )
        return run.snapshot

    def _halt_compensation(self, run: SagaRun, op: str, reason: str):
        run.mode = MODE_ABORTED
        self.store.append(
            LogKind.CONTROL,
            {"event": "manual-intervention-required", "op": op, "reason": reason},
        )
        raise CompensationFailed(op, reason)


def _verdict_reason(verdict: validation.ValidationVerdict) -> str:
    return "; ".join(f"{f.rule_id}: {f.evidence}" for f in verdict.failed) or "rejected"


def _commit_patch(op: str, spec: NodeSpec, outputs: Mapping[str, Any]) -> dict:
    cost = outputs.get("total_cost")
    confirmation = outputs.get("confirmation_number") or outputs.get("seat_res")
    entity = {
        "kind": "booking",
        "agent_kind": spec.agent_kind,
        "status": "committed",
        "op": op,
    }
    if confirmation is not None:
        entity["confirmation"] = confirmation
    if cost is not None:
        entity["total_cost_cents"] = cost
    patch: dict[str, Any] = {"entities": {spec.entity_key: entity}}
    if cost is not None:
        patch["expense"] = {
            "transaction_id": op,
            "expense_item": spec.expense_item,
            "cost": cost,
            "category": spec.agent_kind,
        }
    return patch


def _compensation_patch(op: str, spec: NodeSpec, run: SagaRun, agent_patch: Mapping[str, Any]) -> dict:
    patch: dict[str, Any] = {"remove_entities": [spec.entity_key], "agent_patch": dict(agent_patch)}
    refund = agent_patch.get("refund_cents")
    if refund:
        patch["refund"] = {
            "transaction_id": op,
            "expense_item": f"refund-{spec.expense_item}",
            "cost": -int(refund),
            "category": spec.agent_kind,
        }
    return patch


# ---------------------------------------------------------------------------
# Crash recovery
# ---------------------------------------------------------------------------

def resume_after_crash(
    store: ContextStore,
    coordinator_factory: Callable[[ContextStore], Coordinator],
    saga: Saga,
    bindings: Sequence[AgentBinding],
) -> tuple[StateSnapshot, str]:
    """Reconstruct the interrupted run from the durable log and drive it to a
    terminal outcome. Deterministic agents make the result identical to an
    uninterrupted run."""
    coordinator = coordinator_factory(store)
    entries = store.entries()

    start_entry = next(
        (e for e in reversed(entries)
         if e.kind == LogKind.CONTROL and e.payload.get("event") == "saga-start"),
        None,
    )
    if start_entry is None:
        run = coordinator.start(saga, AppState())
        return coordinator.execute(run, bindings)

    checkpoint_id = start_entry.payload["checkpoint_id"]
    checkpoint = next(
        e for e in entries
        if e.kind == LogKind.CHECKPOINT and e.payload["checkpoint_id"] == checkpoint_id
    )
    snapshot = StateSnapshot.from_dict(checkpoint.payload["snapshot"])
    run = SagaRun(
        saga=saga,
        run_id=start_entry.payload.get("run_id", "run-1"),
        checkpoint_id=checkpoint_id,
        snapshot=snapshot,
    )

    tail = [e for e in entries if e.seq > start_entry.seq]
    phases: dict[str, dict] = {}
    compensation_plan: list[str] | None = None
    compensated: set[str] = set()
    finished: str | None = None
    max_tick = 0

    for e in tail:
        payload = e.payload
        max_tick = max(max_tick, payload.get("tick", 0) or 0)
        if e.kind == LogKind.PHASE and payload.get("status") == "ok":
            op, phase = payload["op"], payload["phase"]
            phases.setdefault(op, {})[phase] = payload
            if phase == "execution":
                run.outputs[op] = payload["outputs"]
                run.internals[op] = payload["internal"]
            elif phase == "output-validation":
                run.outputs[op] = payload["outputs"]
            elif phase == "commit":
                run.snapshot = run.snapshot.with_app(
                    apply_commit_patch(run.snapshot.app, payload["state_patch"])
                ).with_op_status(op, OpStatus.COMPLETED, payload.get("tick"))
                run.completion_order.append(op)
            elif phase == "compensation-registration":
                run.registered[op] = CompensationSpec(
                    for_op=op,
                    inverse_actions=tuple(payload.get("inverse_actions", ())),
                    recovery_patch=dict(payload.get("recovery_patch", {})),
                )
        elif e.kind == LogKind.COMPENSATION:
            op = payload["op"]
            compensated.add(op)
            run.snapshot = run.snapshot.with_app(
                apply_compensation_patch(run.snapshot.app, payload["patch"])
            ).with_op_status(op, OpStatus.COMPENSATED, payload.get("tick"))
        elif e.kind == LogKind.CONTROL:
            event = payload.get("event")
            if event == "compensation-start":
                compensation_plan = list(payload.get("plan", ()))
            elif event in ("saga-committed", "saga-compensated", "saga-aborted"):
                finished = event

    run.tick = max_tick
    run.snapshot = run.snapshot.at_cursor(store.last_seq)

    if finished is not None:
        outcome = {
            "saga-committed": OUTCOME_COMMITTED,
            "saga-compensated": OUTCOME_COMPENSATED,
            "saga-aborted": OUTCOME_ABORTED,
        }[finished]
        run.mode = {
            "saga-committed": MODE_COMMITTED,
            "saga-compensated": MODE_COMPENSATED,
            "saga-aborted": MODE_ABORTED,
        }[finished]
        return run.snapshot, outcome

    by_op = {b.op: b for b in bindings}
    if compensation_plan is not None:
        remaining = [op for op in compensation_plan if op not in compensated]
        run.mode = MODE_COMPENSATING
        run.compensation_queue = remaining
        snapshot = coordinator.run_compensation(run, remaining, by_op)
        store.append(LogKind.CONTROL, {"event": "saga-compensated", "run_id": run.run_id})
        run.mode = MODE_COMPENSATED
        return snapshot, OUTCOME_COMPENSATED

    # a phase marker for a failed step means the failure decision was already
    # durable; resume goes straight to compensation of everything completed
    failed_phase = next(
        (e for e in tail if e.kind == LogKind.PHASE and e.payload.get("status") == "failed"),
        None,
    )
    if failed_phase is not None:
        plan = coordinator.on_failure(run, failed_phase.payload["op"])
        if not plan:
            store.append(LogKind.CONTROL, {"event": "saga-aborted", "run_id": run.run_id,
                                           "op": failed_phase.payload["op"], "reason": "resume"})
            return run.snapshot, OUTCOME_ABORTED
        return coordinator._compensate(run, by_op, plan)

    start_index = 0
    for index, op in enumerate(saga.forward):
        if "compensation-registration" in phases.get(op, {}):
            start_index = index + 1
            continue
        start_index = index
        break
    store.append(LogKind.CONTROL, {"event": "resumed", "run_id": run.run_id,
                                   "at_op_index": start_index})
    return coordinator.execute(
        run, bindings, _resume={"phases": phases, "start_index": start_index}
    )


# ---------------------------------------------------------------------------
# Replanning guard
# ---------------------------------------------------------------------------

def guard_rewrite_of_past(
    world: planning.WorldModel,
    fixed: Sequence[planning.TimedAction],
    candidate: Sequence[planning.TimedAction],
    tick: int,
) -> None:
    """Reject plans that contradict executed history.

    A replanned action must not start before its actor's last committed
    moment (including the spliced remainder of an in-flight segment), must
    not sit entirely in the past, and its origin must match where history
    actually left the actor.
    """
    frozen: dict[str, dict[str, Any]] = {}
    for name, rec in world.actors.items():
        frozen[name] = {
            "available": rec.get("available_from", 0),
            "location": rec.get("start_location"),
            "history": None,
        }
    for action in sorted(fixed, key=lambda a: (a.end, a.start)):
        for person in action.involved():
            entry = frozen.setdefault(
                person, {"available": 0, "location": None, "history": None}
            )
            entry["available"] = max(entry["available"], action.end)
            loc = action.to_loc if action.kind == "travel" else action.location
            entry["location"] = loc or entry["location"]
            entry["history"] = action

    from .state import canonical_json

    fixed_set = {canonical_json(a.to_dict()) for a in fixed}
    new_actions = [a for a in candidate if canonical_json(a.to_dict()) not in fixed_set]
    firsts: dict[str, planning.TimedAction] = {}
    for action in sorted(new_actions, key=lambda a: (a.start, a.end)):
        for person in action.involved():
            firsts.setdefault(person, action)
        if action.end <= tick and action.kind != "arrive":
            raise RewriteOfPast(
                f"replanned action {action.label or action.kind} at "
                f"{planning.fmt_tick(action.start)} lies entirely before the "
                f"disruption at {planning.fmt_tick(tick)}"
            )

    for person in sorted(firsts, key=lambda p: (firsts[p].start, p)):
        state = frozen.get(person)
        if state is None:
            continue
        action = firsts[person]
        if action.kind == "arrive":
            continue
        if action.start < state["available"]:
            last = state["history"]
            evidence = ""
            if last is not None:
                place = last.to_loc if last.kind == "travel" else last.location
                evidence = (
                    f"; log shows {person} {last.label or last.kind} ending "
                    f"{planning.fmt_tick(last.end)} at {place}"
                )
            raise RewriteOfPast(
                f"{person} rescheduled at {planning.fmt_tick(action.start)} before "
                f"their committed timeline ends ({planning.fmt_tick(state['available'])})"
                + evidence
            )
        origin = action.from_loc if action.kind == "travel" else action.location
        if origin is not None and state["location"] is not None and origin != state["location"]:
            raise RewriteOfPast(
                f"{person} restarts from {origin} but executed history leaves "
                f"them at {state['location']}"
            )


def replan_actions(
    store: ContextStore,
    scenario: planning.Scenario,
    plan: Sequence[planning.TimedAction],
    disruption: planning.DisruptionEvent,
    planner: Callable[
        [planning.Scenario, Sequence[planning.TimedAction], planning.DisruptionEvent],
        Sequence[planning.TimedAction],
    ],
    *,
    extra_disruptions: Sequence[planning.DisruptionEvent] = (),
) -> list[planning.TimedAction]:
    """Run a replanning hook under the engine's history guarantees: the
    disruption is logged, the planner's output is checked against executed
    history, and the accepted plan is logged. The pre-disruption log prefix is
    never rewritten (appends only)."""
    world = scenario.world
    assert world is not None
    committed, spliced, _ = planning.split_plan_at(plan, disruption, world)
    store.append(
        LogKind.DISRUPTION,
        {"tick": disruption.at_tick, **disruption.to_dict()},
    )
    candidate = list(planner(scenario, plan, disruption))
    guard_rewrite_of_past(world, committed + spliced, candidate, disruption.at_tick)
    store.append(
        LogKind.CONTROL,
        {"event": "replanned", "at": disruption.at_tick,
         "actions": [a.to_dict() for a in candidate]},
    )
    return candidate
