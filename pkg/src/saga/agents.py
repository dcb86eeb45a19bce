"""Deterministic simulated booking agents and their compensators.

Each agent kind declares fixed input/output/internal-state field lists; the
golden copies live in data/fixtures/agent_schemas.json and a test pins them.
Money is integer cents so refunds compare exactly. Agents are stateless
between calls: all continuity lives in the returned internal-state record.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

from .errors import (
    AgentInputError,
    NoInventory,
    NothingToCompensate,
    ProviderUnavailable,
)

AGENT_KINDS = ("flight", "hotel", "train", "budget", "itinerary")

AGENT_SCHEMAS: dict[str, dict[str, list[str]]] = {
    "flight": {
        "input": ["travel_dates", "budget_limit", "airline_preferences", "passenger_details"],
        "output": ["flight_details", "confirmation_number", "total_cost", "cancellation_policy"],
        "internal": ["reservation_status", "booking_reference", "payment"],
    },
    "hotel": {
        "input": ["checkin_date", "checkout_date", "location_constraints", "amenity_preferences", "budget_limit"],
        "output": ["hotel_details", "room_type", "confirmation_number", "total_cost", "cancellation_policy"],
        "internal": ["reservation_status", "booking_reference", "payment"],
    },
    "train": {
        "input": ["departure_location", "arrival_location", "travel_time", "connection_requirements"],
        "output": ["train_details", "seat_res", "total_cost", "schedule_details"],
        "internal": ["ticket_status", "booking_reference", "refund_policy"],
    },
    "budget": {
        "input": ["expense_item", "cost", "category", "transaction_id"],
        "output": ["updated_total", "remaining_budget", "budget_status", "expense_breakdown"],
        "internal": ["cumulative_expenses", "expense_log", "constraints"],
    },
    "itinerary": {
        "input": ["user_prefs", "travel_constraints", "confirmations"],
        "output": ["optimized_itinerary", "timing_schedule", "activity_recommendations"],
        "internal": ["preference_history", "optimization_parameters", "constraint_violations"],
    },
}


@dataclass
class BookingCatalog:
    """Seeded provider tables plus a failure script keyed on request index.

    The request counter only drives scripted faults; row selection depends on
    the request alone, so replaying the same requests yields the same rows.
    """

    flights: tuple[dict, ...] = ()
    hotels: tuple[dict, ...] = ()
    trains: tuple[dict, ...] = ()
    failure_script: dict[int, str] = field(default_factory=dict)
    seed: int = 0
    requests_served: int = 0

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BookingCatalog":
        return cls(
            flights=tuple(dict(r) for r in data.get("flights", ())),
            hotels=tuple(dict(r) for r in data.get("hotels", ())),
            trains=tuple(dict(r) for r in data.get("trains", ())),
            failure_script={int(k): v for k, v in data.get("failure_script", {}).items()},
            seed=int(data.get("seed", 0)),
        )

    def next_request_index(self) -> int:
        index = self.requests_served
        self.requests_served += 1
        return index


def _require_fields(kind: str, inputs: Mapping[str, Any]) -> None:
    missing = [f for f in AGENT_SCHEMAS[kind]["input"] if f not in inputs]
    if missing:
        raise AgentInputError(f"{kind} agent inputs missing {missing}")


def _check_scripted_failure(catalog: BookingCatalog) -> None:
    index = catalog.next_request_index()
    fault = catalog.failure_script.get(index)
    if fault == "provider-unavailable":
        raise ProviderUnavailable(f"scripted outage at request {index}")
    if fault == "no-inventory":
        raise NoInventory(f"scripted empty inventory at request {index}")


def _confirmation(prefix: str, row_id: str, seed: int) -> str:
    return f"{prefix}-{row_id}-{seed:04d}"


def execute_agent(
    kind: str, inputs: Mapping[str, Any], catalog: BookingCatalog
) -> tuple[dict, dict]:
    """Run one booking agent; returns (outputs, internal_state).

    Selection is deterministic: matching rows are ranked by stated preference,
    then price, then row id. Raises ProviderUnavailable / NoInventory per the
    catalog's failure script, AgentInputError on malformed inputs.
    """
    if kind not in AGENT_SCHEMAS:
        raise AgentInputError(f"unknown agent kind {kind!r}")
    _require_fields(kind, inputs)
    if kind == "flight":
        return _execute_flight(inputs, catalog)
    if kind == "hotel":
        return _execute_hotel(inputs, catalog)
    if kind == "train":
        return _execute_train(inputs, catalog)
    if kind == "budget":
        return _execute_budget(inputs)
    return _execute_itinerary(inputs)


def _payment(amount_cents: int) -> dict:
    # Internal-state "payment" has no richer structure than amount + method.
    return {"amount_cents": amount_cents, "method_tag": "card"}


def _execute_flight(inputs: Mapping[str, Any], catalog: BookingCatalog) -> tuple[dict, dict]:
    _check_scripted_failure(catalog)
    dates = list(inputs["travel_dates"])
    budget = int(inputs["budget_limit"])
    prefs = dict(inputs["airline_preferences"] or {})
    rows = [
        r for r in catalog.flights
        if r["date"] in dates and r["price_cents"] <= budget
        and r.get("route") == prefs.get("route", r.get("route"))
    ]
    if not rows:
        raise NoInventory("no flight matches dates and budget")
    want_direct = bool(prefs.get("direct", False))
    rows.sort(key=lambda r: (want_direct and not r.get("direct", False), r["price_cents"], r["id"]))
    row = rows[0]
    outputs = {
        "flight_details": {
            "flight_number": row["flight_number"],
            "departure_time": row["departure_time"],
            "arrival_time": row["arrival_time"],
            "route": row["route"],
            "date": row["date"],
            "direct": row.get("direct", False),
        },
        "confirmation_number": _confirmation("FL", row["id"], catalog.seed),
        "total_cost": row["price_cents"],
        "cancellation_policy": row.get("cancellation_policy", "full-refund"),
    }
    internal = {
        "reservation_status": "booked",
        "booking_reference": row["id"],
        "payment": _payment(row["price_cents"]),
    }
    return outputs, internal


def _execute_hotel(inputs: Mapping[str, Any], catalog: BookingCatalog) -> tuple[dict, dict]:
    checkin, checkout = inputs["checkin_date"], inputs["checkout_date"]
    if checkout <= checkin:
        raise AgentInputError(f"checkout {checkout} must be after checkin {checkin}")
    _check_scripted_failure(catalog)
    city = (inputs["location_constraints"] or {}).get("city")
    stars = (inputs["amenity_preferences"] or {}).get("stars", [])
    budget = int(inputs["budget_limit"])
    nights = _nights_between(checkin, checkout)
    rows = [
        r for r in catalog.hotels
        if r["city"] == city
        and (not stars or r["stars"] in stars)
        and r["price_per_night_cents"] * nights <= budget
    ]
    if not rows:
        raise NoInventory(f"no hotel in {city} within budget")
    rows.sort(key=lambda r: (r["price_per_night_cents"], r["id"]))
    row = rows[0]
    total = row["price_per_night_cents"] * nights
    outputs = {
        "hotel_details": {"name": row["name"], "city": row["city"], "stars": row["stars"],
                          "checkin_date": checkin, "checkout_date": checkout, "nights": nights},
        "room_type": row.get("room_type", "double"),
        "confirmation_number": _confirmation("HO", row["id"], catalog.seed),
        "total_cost": total,
        "cancellation_policy": row.get("cancellation_policy", "full-refund"),
    }
    internal = {
        "reservation_status": "booked",
        "booking_reference": row["id"],
        "payment": _payment(total),
    }
    return outputs, internal


def _execute_train(inputs: Mapping[str, Any], catalog: BookingCatalog) -> tuple[dict, dict]:
    _check_scripted_failure(catalog)
    rows = [
        r for r in catalog.trains
        if r["from"] == inputs["departure_location"]
        and r["to"] == inputs["arrival_location"]
        and r["date"] == inputs["travel_time"]
    ]
    if not rows:
        raise NoInventory("no train for that leg and date")
    rows.sort(key=lambda r: (r["price_cents"], r["id"]))
    row = rows[0]
    outputs = {
        "train_details": {"from": row["from"], "to": row["to"], "date": row["date"],
                          "train_number": row["train_number"]},
        "seat_res": _confirmation("TR", row["id"], catalog.seed),
        "total_cost": row["price_cents"],
        "schedule_details": {
            "departure_time": row["departure_time"],
            "arrival_time": row["arrival_time"],
            "transfer_from_hotel_minutes": row.get("transfer_from_hotel_minutes", 45),
        },
    }
    internal = {
        "ticket_status": "booked",
        "booking_reference": row["id"],
        "refund_policy": row.get("refund_policy", "full-refund"),
        # kept for uniform compensation handling
        "payment": _payment(row["price_cents"]),
    }
    return outputs, internal


def _execute_budget(inputs: Mapping[str, Any]) -> tuple[dict, dict]:
    ledger = dict(inputs.get("ledger") or {"limit_cents": 0, "spent_cents": 0, "items": {}})
    item = {k: inputs[k] for k in ("expense_item", "cost", "category", "transaction_id")}
    new_ledger, outputs = track_budget(ledger, item)
    internal = {
        "cumulative_expenses": new_ledger["spent_cents"],
        "expense_log": new_ledger["items"],
        "constraints": {"limit_cents": new_ledger["limit_cents"]},
    }
    return outputs, internal


def _execute_itinerary(inputs: Mapping[str, Any]) -> tuple[dict, dict]:
    confirmations = list(inputs["confirmations"])
    prefs = dict(inputs["user_prefs"] or {})
    weights = prefs.get("weights", {})
    # Greedy ordering: date first, then preference weight (higher first).
    ordered = sorted(
        confirmations,
        key=lambda c: (c.get("date", ""), -weights.get(c.get("kind", ""), 0), c.get("op", "")),
    )
    outputs = {
        "optimized_itinerary": ordered,
        "timing_schedule": [
            {"op": c.get("op"), "date": c.get("date")} for c in ordered
        ],
        "activity_recommendations": prefs.get("activities", []),
    }
    internal = {
        "preference_history": [prefs],
        "optimization_parameters": {"strategy": "preference-weighted-greedy"},
        "constraint_violations": [],
    }
    return outputs, internal


def compensate_agent(kind: str, internal: Mapping[str, Any]) -> dict:
    """Inverse action for a booked reservation: cancel and refund exactly the
    recorded payment. A second call on a cancelled booking is a no-op patch;
    compensating a never-booked state raises NothingToCompensate."""
    status_field = "ticket_status" if kind == "train" else "reservation_status"
    status = internal.get(status_field)
    if status == "cancelled":
        return {}
    if status != "booked":
        raise NothingToCompensate(f"{kind} state is {status!r}, not booked")
    patch = {
        status_field: "cancelled",
        "refund_cents": int(internal.get("payment", {}).get("amount_cents", 0)),
        "clear_confirmation": True,
    }
    if kind == "train":
        patch["recalculate_travel_times"] = True
    if kind == "flight":
        patch["reevaluate_dependents"] = True
    return patch


def _nights_between(checkin: str, checkout: str) -> int:
    from datetime import date

    a = date.fromisoformat(checkin)
    b = date.fromisoformat(checkout)
    nights = (b - a).days
    if nights <= 0:
        raise AgentInputError("stay must cover at least one night")
    return nights


def track_budget(ledger: Mapping[str, Any], item: Mapping[str, Any]) -> tuple[dict, dict]:
    """Fold one expense (or refund, negative cost) into the ledger.

    Returns (new_ledger, outputs) where outputs follow the budget agent's
    output schema. Status flips to over-budget when the running total exceeds
    the limit.
    """
    cost = int(item["cost"])
    if "transaction_id" not in item or "expense_item" not in item:
        raise AgentInputError("budget item needs transaction_id and expense_item")
    items = dict(ledger.get("items", {}))
    items[str(item["transaction_id"])] = items.get(str(item["transaction_id"]), 0) + cost
    if items[str(item["transaction_id"])] == 0:
        del items[str(item["transaction_id"])]
    spent = int(ledger.get("spent_cents", 0)) + cost
    limit = int(ledger["limit_cents"])
    new_ledger = {"limit_cents": limit, "spent_cents": spent, "items": items}
    outputs = {
        "updated_total": spent,
        "remaining_budget": limit - spent,
        "budget_status": "over-budget" if spent > limit else "ok",
        "expense_breakdown": dict(sorted(items.items())),
    }
    return new_ledger, outputs
