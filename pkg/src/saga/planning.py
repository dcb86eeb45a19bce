"""Temporal-spatial world model and reactive compensation for scheduling runs.

Time is integer minutes from midnight. Plans are lists of TimedAction; the
constraint checker is total over well-formed plans and reports violations
instead of raising. Disrupted travel scales only the unelapsed portion of a
segment: T_new = T_elapsed + M * max(0, T_total - T_elapsed).

The rescheduler is feasibility-first: it preserves executed history verbatim,
resumes every actor from their last known position, prefers keeping the
original assignment, and enumerates alternative task/driver assignments only
as needed.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

from .errors import Infeasible, NegativeInput, UnknownLocation, UnknownPerson

ACTION_KINDS = ("arrive", "travel", "pickup", "task", "wait")


def parse_tick(value: Any) -> int:
    """Accept minutes-from-midnight ints or "HH:MM" strings."""
    if isinstance(value, int):
        return value
    if isinstance(value, str) and ":" in value:
        hours, minutes = value.split(":")
        return int(hours) * 60 + int(minutes)
    raise ValueError(f"not a tick: {value!r}")


def fmt_tick(tick: int) -> str:
    return f"{tick // 60:02d}:{tick % 60:02d}"


# ---------------------------------------------------------------------------
# World model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WorldModel:
    """Locations, symmetric travel-time matrix, actors, and shared resources.

    Location records may carry "tags" (e.g. airport) and an opening "window"
    {open, close}. Actor records: can_drive, vehicle_seats, start_location,
    available_from, needs_pickup, person (default true).
    """

    locations: Mapping[str, Mapping[str, Any]]
    travel_minutes: Mapping[tuple[str, str], int]
    actors: Mapping[str, Mapping[str, Any]]
    resources: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "WorldModel":
        matrix: dict[tuple[str, str], int] = {}
        for row in data.get("travel_minutes", ()):
            a, b, minutes = row[0], row[1], int(row[2])
            if minutes <= 0:
                raise ValueError(f"travel time {a}-{b} must be positive")
            matrix[_pair(a, b)] = minutes
        locations = {name: dict(rec or {}) for name, rec in data.get("locations", {}).items()}
        for a, b in matrix:
            if a not in locations or b not in locations:
                raise UnknownLocation(f"matrix references undeclared location {a}-{b}")
        actors = {}
        for name, rec in data.get("actors", {}).items():
            rec = dict(rec or {})
            if "available_from" in rec:
                rec["available_from"] = parse_tick(rec["available_from"])
            actors[name] = rec
        return cls(
            locations=locations,
            travel_minutes=matrix,
            actors=actors,
            resources={k: dict(v or {}) for k, v in data.get("resources", {}).items()},
        )

    def require_location(self, name: str) -> None:
        if name not in self.locations:
            raise UnknownLocation(name)

    def require_person(self, name: str) -> None:
        if name not in self.actors:
            raise UnknownPerson(name)

    def travel_time(self, frm: str, to: str) -> int:
        self.require_location(frm)
        self.require_location(to)
        if frm == to:
            return 0
        minutes = self.travel_minutes.get(_pair(frm, to))
        if minutes is None:
            raise UnknownLocation(f"no travel time between {frm} and {to}")
        return minutes

    def location_tags(self, name: str) -> tuple[str, ...]:
        return tuple(self.locations.get(name, {}).get("tags", ()))

    def window(self, name: str) -> dict | None:
        win = self.locations.get(name, {}).get("window")
        if not win:
            return None
        out = {}
        if "open" in win:
            out["open"] = parse_tick(win["open"])
        if "close" in win:
            out["close"] = parse_tick(win["close"])
        return out

    def persons(self) -> list[str]:
        return sorted(n for n, rec in self.actors.items() if rec.get("person", True))


def _pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


# ---------------------------------------------------------------------------
# Actions, disruptions, segment math
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimedAction:
    """One scheduled step: an arrival, a travel leg, a pickup, a task, or a
    wait. Passengers ride along on travel/pickup and act as co-participants
    on tasks. attrs carries free-form markers (vehicle grants, splice notes)."""

    kind: str
    start: int
    end: int
    actor: str | None = None
    location: str | None = None
    from_loc: str | None = None
    to_loc: str | None = None
    passengers: tuple[str, ...] = ()
    uses_resource: str | None = None
    label: str = ""
    attrs: Mapping[str, Any] = field(default_factory=dict)

    def involved(self) -> tuple[str, ...]:
        people = [self.actor] if self.actor else []
        people.extend(self.passengers)
        return tuple(people)

    @property
    def duration(self) -> int:
        return self.end - self.start

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "kind": self.kind,
            "start": self.start,
            "end": self.end,
            "label": self.label,
        }
        if self.actor:
            out["actor"] = self.actor
        if self.location:
            out["location"] = self.location
        if self.from_loc:
            out["from"] = self.from_loc
        if self.to_loc:
            out["to"] = self.to_loc
        if self.passengers:
            out["passengers"] = list(self.passengers)
        if self.uses_resource:
            out["uses_resource"] = self.uses_resource
        if self.attrs:
            out["attrs"] = dict(self.attrs)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TimedAction":
        return cls(
            kind=data["kind"],
            start=parse_tick(data["start"]),
            end=parse_tick(data["end"]),
            actor=data.get("actor"),
            location=data.get("location"),
            from_loc=data.get("from"),
            to_loc=data.get("to"),
            passengers=tuple(data.get("passengers", ())),
            uses_resource=data.get("uses_resource"),
            label=data.get("label", ""),
            attrs=dict(data.get("attrs", {})),
        )


@dataclass(frozen=True)
class DisruptionEvent:
    """Timestamped world change: a travel-time multiplier over a segment
    scope, or a delay moving one labelled action to a new start."""

    at_tick: int
    kind: str  # "travel-multiplier" | "delay"
    multiplier: Fraction = Fraction(1)
    scope: Mapping[str, Any] = field(default_factory=dict)
    actor: str | None = None
    target_label: str | None = None
    new_start: int | None = None
    description: str = ""

    def __post_init__(self):
        if self.multiplier <= 0:
            raise NegativeInput(f"multiplier must be positive, got {self.multiplier}")

    def in_scope(self, frm: str | None, to: str | None) -> bool:
        if self.kind != "travel-multiplier":
            return False
        if self.scope.get("all"):
            return True
        endpoint = self.scope.get("endpoint")
        if endpoint is not None:
            return endpoint in (frm, to)
        segments = self.scope.get("segments")
        if segments:
            return any({frm, to} == {a, b} for a, b in segments)
        return False

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "at": self.at_tick,
            "kind": self.kind,
            "description": self.description,
        }
        if self.kind == "travel-multiplier":
            out["multiplier"] = str(self.multiplier)
            out["scope"] = dict(self.scope)
        else:
            out.update(
                {"actor": self.actor, "target_label": self.target_label, "new_start": self.new_start}
            )
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DisruptionEvent":
        mult = data.get("multiplier", 1)
        if isinstance(mult, str):
            mult = Fraction(mult)
        return cls(
            at_tick=parse_tick(data["at"]),
            kind=data["kind"],
            multiplier=Fraction(mult),
            scope=dict(data.get("scope", {})),
            actor=data.get("actor"),
            target_label=data.get("target_label"),
            new_start=parse_tick(data["new_start"]) if data.get("new_start") is not None else None,
            description=data.get("description", ""),
        )


@dataclass(frozen=True)
class SegmentProgress:
    """Progress of one travel segment when a disruption lands: scheduled total
    minutes, minutes already travelled, and whether the hazard point is
    already behind the traveller."""

    total: int
    elapsed: int
    passed_hazard: bool = False


def compensate_segment(progress: SegmentProgress, multiplier: Fraction | int) -> int | Fraction:
    """New total duration of a disrupted segment.

    Only the unelapsed portion scales: new = elapsed + M * max(0, total -
    elapsed). Exact for integer minutes and rational multipliers; monotone in
    the multiplier. A traveller already past the hazard is unaffected.
    """
    if progress.total < 0 or progress.elapsed < 0:
        raise NegativeInput("segment durations must be non-negative")
    multiplier = Fraction(multiplier)
    if multiplier <= 0:
        raise NegativeInput("multiplier must be positive")
    if progress.passed_hazard:
        return max(progress.total, progress.elapsed)
    affected = max(0, progress.total - progress.elapsed)
    new_total = progress.elapsed + multiplier * affected
    return int(new_total) if new_total.denominator == 1 else new_total


def effective_travel_time(
    world: WorldModel,
    frm: str,
    to: str,
    depart_tick: int,
    disruptions: Sequence[DisruptionEvent] = (),
) -> int:
    """Minutes for a segment departing at a given tick: distance accrues at
    rate 1 before any in-scope disruption and at the multiplier after it.
    Fractional totals round up to whole minutes."""
    base = world.travel_time(frm, to)
    if base == 0:
        return 0
    active = [d for d in disruptions if d.kind == "travel-multiplier" and d.in_scope(frm, to)]
    if not active:
        return base
    wall = Fraction(depart_tick)
    for _ in range(base):
        rate = Fraction(1)
        for d in active:
            if wall >= d.at_tick:
                rate *= d.multiplier
        wall += rate
    return math.ceil(wall - depart_tick)


# ---------------------------------------------------------------------------
# Position timelines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    code: str
    at_tick: int
    detail: str
    actions: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "code": self.code,
            "at": self.at_tick,
            "detail": self.detail,
            "actions": list(self.actions),
        }


def _action_name(action: TimedAction) -> str:
    who = action.actor or "-"
    return f"{action.label or action.kind}@{fmt_tick(action.start)}:{who}"


MOVEMENT_KINDS = ("arrive", "travel", "pickup", "wait")


def _intervals_by_actor(
    plan: Sequence[TimedAction], kinds: tuple[str, ...] | None = None
) -> dict[str, list[tuple[int, int, TimedAction]]]:
    table: dict[str, list[tuple[int, int, TimedAction]]] = {}
    for action in sorted(plan, key=lambda a: (a.start, a.end)):
        if kinds is not None and action.kind not in kinds:
            continue
        for person in action.involved():
            table.setdefault(person, []).append((action.start, action.end, action))
    return table


def _place_at_start(action: TimedAction) -> str | None:
    return action.from_loc if action.kind == "travel" else action.location


def _place_at_end(action: TimedAction) -> str | None:
    return action.to_loc if action.kind == "travel" else action.location


class PositionIndex:
    """Where each person is over time, derived from movement actions only
    (arrive/travel/pickup/wait). Tasks assert presence but do not relocate."""

    def __init__(self, world: WorldModel, plan: Sequence[TimedAction]):
        self.world = world
        self.table = _intervals_by_actor(plan, MOVEMENT_KINDS)

    def at(self, person: str, tick: int) -> str | None:
        self.world.require_person(person)
        location = self.world.actors[person].get("start_location")
        for start, end, action in self.table.get(person, ()):
            if tick < start:
                break
            if start <= tick < end:
                return None if action.kind == "travel" else action.location
            location = _place_at_end(action) or location
        return location


def position_at(
    world: WorldModel, plan: Sequence[TimedAction], person: str, tick: int
) -> str | None:
    """Location of a person at a tick; None while in transit (or before any
    known placement of an externally-arriving person)."""
    return PositionIndex(world, plan).at(person, tick)


# ---------------------------------------------------------------------------
# Constraint checking
# ---------------------------------------------------------------------------

def check_plan_constraints(
    plan: Sequence[TimedAction],
    world: WorldModel,
    rules: Sequence[Mapping[str, Any]],
    disruptions: Sequence[DisruptionEvent] = (),
) -> list[Violation]:
    """Validate a plan against the world and scenario rules.

    Structural checks always run: malformed actions, travel-time
    understatement, missing vehicles, seat capacity, bilocation and position
    discontinuities. Rule-driven checks cover opening windows, gathering
    deadlines, minimum task durations, supervision, and persons who must not
    drive themselves. Raises UnknownLocation/UnknownPerson for names outside
    the world; everything else is reported as a violation.
    """
    for action in plan:
        for person in action.involved():
            world.require_person(person)
        for loc in (action.location, action.from_loc, action.to_loc):
            if loc is not None:
                world.require_location(loc)

    violations: list[Violation] = []
    positions = PositionIndex(world, plan)
    violations.extend(_check_structure(plan, world, disruptions))
    for rule in rules:
        kind = rule.get("kind")
        if kind == "window":
            violations.extend(_check_window(plan, world, rule))
        elif kind == "gathering-deadline":
            violations.extend(_check_gathering(plan, world, rule, positions))
        elif kind == "task-duration":
            violations.extend(_check_task_duration(plan, rule))
        elif kind == "supervision":
            violations.extend(_check_supervision(plan, world, rule, positions))
        elif kind == "needs-pickup":
            violations.extend(_check_needs_pickup(plan, rule))
        # "travel-time" rules declare matrix facts; the structural check
        # enforces them for every travel action.
    return sorted(violations, key=lambda v: (v.at_tick, v.code, v.detail))


def _check_structure(
    plan: Sequence[TimedAction], world: WorldModel, disruptions: Sequence[DisruptionEvent]
) -> list[Violation]:
    out: list[Violation] = []
    for action in plan:
        if action.end < action.start:
            out.append(Violation("malformed-action", action.start, f"{_action_name(action)} ends before it starts"))
        if action.kind == "travel" and (action.from_loc is None or action.to_loc is None):
            out.append(Violation("malformed-action", action.start, f"{_action_name(action)} lacks endpoints"))

    # Travel timing, vehicle possession, seat capacity.
    for action in plan:
        if action.kind != "travel" or action.from_loc is None or action.to_loc is None:
            continue
        required = effective_travel_time(world, action.from_loc, action.to_loc, action.start, disruptions)
        if action.attrs.get("passed_hazard"):
            required = world.travel_time(action.from_loc, action.to_loc)
        if action.duration < required:
            out.append(
                Violation(
                    "travel-time",
                    action.start,
                    f"{_action_name(action)} allots {action.duration} min for "
                    f"{action.from_loc}-{action.to_loc}, needs {required}",
                    (_action_name(action),),
                )
            )
        if action.actor is not None:
            seats = _seats_available(plan, world, action.actor, action.start)
            if seats is None:
                out.append(
                    Violation("no-vehicle", action.start, f"{action.actor} drives without a vehicle",
                              (_action_name(action),))
                )
            elif 1 + len(action.passengers) > seats:
                out.append(
                    Violation(
                        "vehicle-capacity",
                        action.start,
                        f"{1 + len(action.passengers)} riders in a {seats}-seater",
                        (_action_name(action),),
                    )
                )

    # Bilocation and continuity per person.
    for person, intervals in sorted(_intervals_by_actor(plan).items()):
        last_loc = world.actors.get(person, {}).get("start_location")
        last_end = None
        for start, end, action in intervals:
            here = _place_at_start(action)
            if last_end is not None and start < last_end:
                out.append(
                    Violation(
                        "bilocation",
                        start,
                        f"{person} has overlapping commitments at {fmt_tick(start)}",
                        (_action_name(action),),
                    )
                )
            elif here is not None and last_loc is not None and here != last_loc:
                out.append(
                    Violation(
                        "teleport",
                        start,
                        f"{person} is at {last_loc} but {_action_name(action)} starts at {here}",
                        (_action_name(action),),
                    )
                )
            last_loc = _place_at_end(action) or last_loc
            last_end = end if last_end is None else max(last_end, end)
    return out


def _seats_available(
    plan: Sequence[TimedAction], world: WorldModel, actor: str, tick: int
) -> int | None:
    rec = world.actors.get(actor, {})
    seats = rec.get("vehicle_seats") if rec.get("has_vehicle") else None
    for action in plan:
        if action.actor == actor and action.end <= tick:
            granted = action.attrs.get("grants_vehicle_seats")
            if granted:
                seats = max(seats or 0, int(granted))
    return seats


def _check_window(plan, world: WorldModel, rule) -> list[Violation]:
    location = rule["location"]
    window = world.window(location) or {}
    opens = parse_tick(rule["open"]) if "open" in rule else window.get("open")
    closes = parse_tick(rule["close"]) if "close" in rule else window.get("close")
    out = []
    for action in plan:
        if action.kind not in ("task", "pickup") or action.location != location:
            continue
        if opens is not None and action.start < opens:
            out.append(Violation(rule["id"], action.start,
                                 f"{_action_name(action)} before {location} opens at {fmt_tick(opens)}",
                                 (_action_name(action),)))
        if closes is not None and (action.start >= closes or action.end > closes):
            out.append(Violation(rule["id"], action.start,
                                 f"{_action_name(action)} after {location} closes at {fmt_tick(closes)}",
                                 (_action_name(action),)))
    return out


def _check_gathering(plan, world: WorldModel, rule, positions: PositionIndex) -> list[Violation]:
    by = parse_tick(rule["by"])
    location = rule["location"]
    out = []
    label = rule.get("task_label")
    if label:
        for action in plan:
            if action.label == label and action.start > by:
                out.append(Violation(rule["id"], action.start,
                                     f"{label} at {fmt_tick(action.start)} misses {fmt_tick(by)}",
                                     (_action_name(action),)))
    missing = [p for p in world.persons() if positions.at(p, by) != location]
    if missing:
        out.append(Violation(rule["id"], by,
                             f"not at {location} by {fmt_tick(by)}: {', '.join(missing)}"))
    return out


def _check_task_duration(plan, rule) -> list[Violation]:
    label = rule["task_label"]
    need = int(rule["min_minutes"])
    matches = [a for a in plan if a.label == label]
    if not matches:
        return [Violation(rule["id"], 0, f"required task {label} missing from plan")]
    out = []
    for action in matches:
        if action.duration < need:
            out.append(Violation(rule["id"], action.start,
                                 f"{label} allotted {action.duration} min, needs {need}",
                                 (_action_name(action),)))
    return out


def _check_supervision(plan, world: WorldModel, rule, positions: PositionIndex) -> list[Violation]:
    location = rule["location"]
    persons = world.persons()
    out = []
    for action in plan:
        if action.uses_resource != rule["resource"]:
            continue
        gaps: list[int] = []
        for minute in range(action.start, action.end):
            if not any(positions.at(p, minute) == location for p in persons):
                gaps.append(minute)
        if gaps:
            spans = _merge_minutes(gaps)
            detail = ", ".join(f"{fmt_tick(a)}-{fmt_tick(b + 1)}" for a, b in spans)
            out.append(Violation(rule["id"], gaps[0],
                                 f"{action.uses_resource} unattended at {location}: {detail}",
                                 (_action_name(action),)))
    return out


def _merge_minutes(minutes: list[int]) -> list[tuple[int, int]]:
    spans: list[tuple[int, int]] = []
    for m in minutes:
        if spans and m == spans[-1][1] + 1:
            spans[-1] = (spans[-1][0], m)
        else:
            spans.append((m, m))
    return spans


def _check_needs_pickup(plan, rule) -> list[Violation]:
    person = rule["person"]
    out = []
    for action in plan:
        if action.kind == "travel" and action.actor == person:
            out.append(Violation(rule["id"], action.start,
                                 f"{person} cannot drive themselves",
                                 (_action_name(action),)))
    return out


# ---------------------------------------------------------------------------
# Common-sense augmentation
# ---------------------------------------------------------------------------

def augment_common_sense(
    plan: Sequence[TimedAction],
    rules: Sequence[Mapping[str, Any]],
    world: WorldModel,
) -> list[TimedAction]:
    """Insert reviewed common-sense steps (e.g. a terminal-exit delay after an
    airport arrival) and shift downstream actions consistently.

    Each rule fires at most once per matched action, and an arrival already
    followed by the inserted step is left alone, so the operation is
    idempotent.
    """
    ordered = sorted(plan, key=lambda a: (a.start, a.end))
    insertions: list[tuple[int, TimedAction]] = []
    for idx, action in enumerate(ordered):
        for rule in rules:
            match = rule.get("match", {})
            if action.kind != match.get("kind", "arrive"):
                continue
            tag = match.get("location_tag")
            if tag and (action.location is None or tag not in world.location_tags(action.location)):
                continue
            label = rule["insert"]["label"]
            if _already_inserted(ordered, idx, action, label):
                continue
            duration = int(rule["insert"].get("duration", 0))
            insertions.append(
                (idx, TimedAction(
                    kind=rule["insert"].get("kind", "task"),
                    start=action.end,
                    end=action.end + duration,
                    actor=action.actor,
                    location=action.location,
                    label=label,
                    attrs={"augmented_by": rule.get("id", label)},
                ))
            )
            break
    if not insertions:
        return list(ordered)

    merged: list[TimedAction] = []
    inserted_after = {idx: act for idx, act in insertions}
    for idx, action in enumerate(ordered):
        merged.append(action)
        if idx in inserted_after:
            merged.append(inserted_after[idx])
    return reschedule_by_availability(merged)


def _already_inserted(ordered, idx, arrival, label) -> bool:
    for later in ordered[idx + 1:]:
        if arrival.actor and arrival.actor in later.involved():
            return later.label == label and later.location == arrival.location
    return False


def reschedule_by_availability(plan: Sequence[TimedAction]) -> list[TimedAction]:
    """Push actions later (never earlier) so nobody acts before finishing
    their previous commitment. Arrivals are external events and never move;
    durations are preserved."""
    available: dict[str, int] = {}
    out: list[TimedAction] = []
    for action in plan:
        people = action.involved()
        if action.kind == "arrive" or not people:
            start = action.start
        else:
            start = max([action.start] + [available.get(p, 0) for p in people])
        shifted = replace(action, start=start, end=start + action.duration)
        out.append(shifted)
        for p in people:
            available[p] = max(available.get(p, 0), shifted.end)
    return sorted(out, key=lambda a: (a.start, a.end, a.actor or ""))


# ---------------------------------------------------------------------------
# Reactive rescheduling
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    """One planning problem: world, declared tasks, rules, goal, base plan,
    scripted disruptions, and augmentation rules."""

    problem_id: str
    kind: str
    world: WorldModel | None = None
    tasks: tuple[dict, ...] = ()
    rules: tuple[dict, ...] = ()
    goal: dict = field(default_factory=dict)
    base_plan: tuple[TimedAction, ...] = ()
    augmentation: tuple[dict, ...] = ()
    disruptions: tuple[DisruptionEvent, ...] = ()
    fixtures: tuple[dict, ...] = ()
    raw: dict = field(default_factory=dict)

    def errands(self) -> list[dict]:
        return [t for t in self.tasks if t.get("kind", "errand") == "errand"]


def split_plan_at(
    plan: Sequence[TimedAction],
    disruption: DisruptionEvent,
    world: WorldModel,
) -> tuple[list[TimedAction], list[TimedAction], list[TimedAction]]:
    """Partition a plan into (committed, spliced-in-flight, future) at the
    disruption tick.

    Actions ending at or before the tick are committed history, except a
    delay's own target: the delayed event never happened. In-flight travel
    continues to its destination, its remaining minutes scaled by any
    in-scope multiplier; in-flight tasks are pinned as committed.
    """
    tick = disruption.at_tick
    committed: list[TimedAction] = []
    spliced: list[TimedAction] = []
    future: list[TimedAction] = []
    for action in sorted(plan, key=lambda a: (a.start, a.end)):
        is_target = (
            disruption.kind == "delay"
            and action.label == disruption.target_label
            and (disruption.actor is None or action.actor == disruption.actor)
        )
        if is_target:
            future.append(action)
        elif action.end <= tick:
            committed.append(action)
        elif action.start < tick:
            if action.kind == "travel":
                spliced.append(_splice_travel(action, disruption, tick))
            else:
                committed.append(action)
        else:
            future.append(action)
    return committed, spliced, future


def _splice_travel(action: TimedAction, disruption: DisruptionEvent, tick: int) -> TimedAction:
    if disruption.kind != "travel-multiplier" or not disruption.in_scope(action.from_loc, action.to_loc):
        return action
    progress = SegmentProgress(
        total=action.duration,
        elapsed=tick - action.start,
        passed_hazard=bool(action.attrs.get("passed_hazard")),
    )
    new_total = compensate_segment(progress, disruption.multiplier)
    new_total = int(math.ceil(new_total))
    attrs = dict(action.attrs)
    attrs.update({
        "disrupted_at": tick,
        "elapsed_at_disruption": progress.elapsed,
        "multiplier": str(disruption.multiplier),
    })
    return replace(action, end=action.start + new_total, attrs=attrs)


def _fold_state(
    world: WorldModel, actions: Sequence[TimedAction]
) -> dict[str, dict[str, Any]]:
    """Each actor's (location, available-from, seats) after a fixed prefix."""
    state: dict[str, dict[str, Any]] = {}
    for name, rec in world.actors.items():
        state[name] = {
            "location": rec.get("start_location"),
            "available": rec.get("available_from", 0),
            "seats": rec.get("vehicle_seats") if rec.get("has_vehicle") else None,
            "can_drive": rec.get("can_drive", False),
        }
    for action in sorted(actions, key=lambda a: (a.end, a.start)):
        for person in action.involved():
            entry = state.setdefault(person, {"location": None, "available": 0, "seats": None, "can_drive": False})
            entry["location"] = _place_at_end(action) or entry["location"]
            entry["available"] = max(entry["available"], action.end)
        if action.actor and action.attrs.get("grants_vehicle_seats"):
            state[action.actor]["seats"] = max(
                state[action.actor]["seats"] or 0, int(action.attrs["grants_vehicle_seats"])
            )
    return state


def reactive_reschedule(
    scenario: Scenario,
    plan: Sequence[TimedAction],
    disruption: DisruptionEvent,
    extra_disruptions: Sequence[DisruptionEvent] = (),
) -> list[TimedAction]:
    """Rebuild the pending part of a plan around a disruption.

    Committed history is preserved verbatim; in-flight segments continue with
    their unelapsed portion scaled; every actor resumes from their last known
    position. Pending errands and passenger pickups are reassigned across
    available drivers only when the original assignment no longer satisfies
    the hard constraints. Raises Infeasible with the blocking constraint ids
    when no assignment works.
    """
    world = scenario.world
    assert world is not None
    all_disruptions = tuple(extra_disruptions) + (disruption,)
    committed, spliced, future = split_plan_at(plan, disruption, world)
    fixed = committed + spliced

    errand_labels = {t["label"] for t in scenario.errands()}
    kept, base_routes = _partition_future(future, errand_labels, disruption)
    kept = _shift_kept(kept, fixed, disruption)

    after_kept = _fold_state(world, fixed + kept)
    pending_errands = _pending_errands(scenario, fixed + kept)
    pending_fetches = _pending_fetches(scenario, world, fixed, kept, after_kept)
    drivers = sorted(
        n for n, st in after_kept.items() if st["can_drive"] and st["seats"]
    )
    goal_loc = scenario.goal.get("location")

    base_owner = _base_assignment(base_routes, pending_errands, pending_fetches)
    items = [("errand", e["label"]) for e in sorted(pending_errands, key=lambda e: e["label"])]
    items += [("fetch", name) for name in sorted(pending_fetches)]

    candidates = []
    for assignment in _assignments(items, drivers):
        routes = _candidate_routes(
            scenario, world, after_kept, assignment, pending_errands,
            pending_fetches, all_disruptions, goal_loc, base_routes, base_owner,
        )
        for generated, reused_base in routes:
            candidate = _assemble(world, fixed, kept, generated, scenario)
            violations = check_plan_constraints(candidate, world, scenario.rules, all_disruptions)
            hard = [v for v in violations if _is_hard(v, scenario.rules)]
            changed = sum(1 for item, driver in assignment.items() if base_owner.get(item) not in (None, driver))
            score = (
                _makespan(generated + kept),
                changed,
                0 if reused_base else 1,
                sum(a.duration for a in generated if a.kind == "travel"),
                _canonical_plan(candidate),
            )
            candidates.append((score, candidate, hard))

    feasible = [c for c in candidates if not c[2]]
    if feasible:
        return min(feasible, key=lambda c: c[0])[1]
    if not candidates:
        raise Infeasible(["no-drivers-available"])
    _, _, hard = min(candidates, key=lambda c: (len(c[2]), c[0]))
    raise Infeasible(sorted({v.code for v in hard}))


def _is_hard(violation: Violation, rules: Sequence[Mapping]) -> bool:
    for rule in rules:
        if rule.get("id") == violation.code:
            return rule.get("severity", "hard") == "hard"
    return True  # structural violations are always hard


def _partition_future(future, errand_labels, disruption):
    """Kept chains (arrivals, personal steps, home tasks, milestones) versus
    regenerable route actions (travel/pickup/wait and errand tasks)."""
    kept, routes = [], []
    for action in future:
        if action.kind in ("travel", "pickup", "wait") or action.label in errand_labels:
            routes.append(action)
        else:
            kept.append(action)
    return kept, routes


def _shift_kept(kept, fixed, disruption):
    # Kept actions arrive in the base plan's chronological order; processing
    # them in that order lets a moved arrival push its actor's later steps.
    available = {p: st["available"] for p, st in _fold_state_seed(fixed).items()}
    out = []
    for action in kept:
        if (
            disruption.kind == "delay"
            and action.label == disruption.target_label
            and (disruption.actor is None or action.actor == disruption.actor)
        ):
            action = replace(action, start=disruption.new_start,
                             end=disruption.new_start + action.duration)
        people = action.involved()
        if action.kind == "arrive" or not people:
            start = action.start
        else:
            start = max([action.start] + [available.get(p, 0) for p in people])
        shifted = replace(action, start=start, end=start + action.duration)
        out.append(shifted)
        for p in people:
            available[p] = max(available.get(p, 0), shifted.end)
    return out


def _fold_state_seed(actions) -> dict[str, dict[str, Any]]:
    state: dict[str, dict[str, Any]] = {}
    for action in actions:
        for person in action.involved():
            entry = state.setdefault(person, {"available": 0})
            entry["available"] = max(entry["available"], action.end)
    return state


def _pending_errands(scenario: Scenario, done_actions) -> list[dict]:
    done_labels = {a.label for a in done_actions}
    return [t for t in scenario.errands() if t["label"] not in done_labels]


def _pending_fetches(scenario, world, fixed, kept, state) -> dict[str, dict]:
    """Persons still needing transport to the goal: name -> (ready tick, place)."""
    goal_loc = scenario.goal.get("location")
    out: dict[str, dict] = {}
    for name, rec in world.actors.items():
        if not rec.get("needs_pickup"):
            continue
        st = state[name]
        if st["location"] == goal_loc:
            continue
        out[name] = {"ready": st["available"], "location": st["location"]}
    return out


def _base_assignment(base_routes, errands, fetches) -> dict[tuple[str, str], str]:
    owner: dict[tuple[str, str], str] = {}
    errand_labels = {e["label"] for e in errands}
    for action in base_routes:
        if action.label in errand_labels and action.actor:
            owner[("errand", action.label)] = action.actor
        if action.kind == "pickup" and action.actor:
            for p in action.passengers:
                if p in fetches:
                    owner[("fetch", p)] = action.actor
    return owner


def _assignments(items, drivers):
    if not items:
        yield {}
        return
    for combo in itertools.product(drivers, repeat=len(items)):
        yield dict(zip(items, combo))


def _candidate_routes(
    scenario, world, state, assignment, errands, fetches,
    disruptions, goal_loc, base_routes, base_owner,
):
    """Yield (generated actions, reused_base_flag) variants for one assignment."""
    errand_by_label = {e["label"]: e for e in errands}
    per_driver: dict[str, list[tuple[str, str]]] = {}
    for item, driver in assignment.items():
        per_driver.setdefault(driver, []).append(item)

    # Base-schedule reuse: when a driver keeps exactly their original items,
    # their original route actions are a candidate as-is.
    reuse: list[TimedAction] = []
    reusable = bool(base_routes)
    for driver, its in per_driver.items():
        if all(base_owner.get(item) == driver for item in its):
            reuse.extend(a for a in base_routes if a.actor == driver)
        else:
            reusable = False
    if reusable and set(assignment) == set(base_owner):
        reuse.extend(_goal_runs(world, state, per_driver, goal_loc, disruptions))
        yield sorted(reuse, key=lambda a: (a.start, a.end)), True

    option_lists = []
    for driver in sorted(per_driver):
        orders = sorted(itertools.permutations(sorted(per_driver[driver])))
        option_lists.append([(driver, order) for order in orders])
    for combo in itertools.product(*option_lists) if option_lists else [()]:
        generated = []
        ok = True
        for driver, order in combo:
            route = _drive_route(world, scenario, state[driver], driver, order,
                                 errand_by_label, fetches, disruptions, goal_loc)
            if route is None:
                ok = False
                break
            generated.extend(route)
        if not ok:
            continue
        generated.extend(_goal_runs(world, state, per_driver, goal_loc, disruptions))
        yield sorted(generated, key=lambda a: (a.start, a.end)), False


def _goal_runs(world, state, per_driver, goal_loc, disruptions):
    """Drivers with no assigned items still head to the gathering point."""
    runs = []
    if goal_loc is None:
        return runs
    for name, st in sorted(state.items()):
        if not st["can_drive"] or not st["seats"]:
            continue
        if name in per_driver:
            continue
        if st["location"] in (None, goal_loc):
            continue
        dur = effective_travel_time(world, st["location"], goal_loc, st["available"], disruptions)
        runs.append(TimedAction(
            kind="travel", start=st["available"], end=st["available"] + dur,
            actor=name, from_loc=st["location"], to_loc=goal_loc, label="head-to-goal",
        ))
    return runs


def _drive_route(world, scenario, start_state, driver, order, errand_by_label,
                 fetches, disruptions, goal_loc):
    pos = start_state["location"]
    t = start_state["available"]
    if pos is None:
        return None
    actions: list[TimedAction] = []
    riders: list[str] = []

    def drive_to(dest):
        nonlocal pos, t
        if pos == dest:
            return
        dur = effective_travel_time(world, pos, dest, t, disruptions)
        actions.append(TimedAction(kind="travel", start=t, end=t + dur, actor=driver,
                                   from_loc=pos, to_loc=dest, passengers=tuple(riders)))
        t += dur
        pos = dest

    for item_kind, key in order:
        if item_kind == "errand":
            errand = errand_by_label[key]
            drive_to(errand["location"])
            window = world.window(pos) or {}
            begin = max(t, window.get("open", t))
            duration = int(errand.get("duration", 0))
            actions.append(TimedAction(kind="task", start=begin, end=begin + duration,
                                       actor=driver, location=pos, label=key,
                                       passengers=tuple(riders)))
            t = begin + duration
        else:
            info = fetches[key]
            if info["location"] is None:
                return None
            drive_to(info["location"])
            begin = max(t, info["ready"])
            actions.append(TimedAction(kind="pickup", start=begin, end=begin, actor=driver,
                                       location=pos, passengers=tuple(riders) + (key,),
                                       label=f"pickup-{key}"))
            riders.append(key)
            t = begin
    if goal_loc is not None:
        drive_to(goal_loc)
    return actions


def _assemble(world, fixed, kept, generated, scenario) -> list[TimedAction]:
    plan = list(fixed) + list(kept) + list(generated)
    plan.sort(key=lambda a: (a.start, a.end, a.actor or ""))
    # Co-participants who cannot reach a task are dropped from it; the task
    # itself stands and the checker judges the remaining cast.
    positions = PositionIndex(world, plan)
    repaired = []
    for action in plan:
        if action.kind == "task" and action.passengers:
            present = tuple(
                p for p in action.passengers
                if positions.at(p, action.start) == action.location
            )
            if present != action.passengers:
                action = replace(action, passengers=present)
        repaired.append(action)
    return repaired


def _makespan(actions) -> int:
    ends = [a.end for a in actions if a.involved()]
    return max(ends) if ends else 0


def _canonical_plan(plan: Sequence[TimedAction]) -> str:
    from .state import canonical_json

    return canonical_json([a.to_dict() for a in plan])
