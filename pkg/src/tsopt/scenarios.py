"""Bundled networks and case loading.

A case bundles a network with the fixed-time plan optimization starts from.
``arterial5`` is the flagship: five signalized intersections along one
arterial, heavy through traffic against light side streets, and a uniform
oversized starting plan that leaves plenty of room to improve. ``micro2`` is
a one-intersection toy on a 1 second grid, small enough to reason about a
cycle tick by tick.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .plans import Bounds, IntersectionSpec, PhaseSpec, SignalPlan, uniform_plan
from .sim import LinkSpec, MovementSpec, NetworkSpec

__all__ = [
    "Case",
    "BUNDLED",
    "arterial_five",
    "two_phase_micro",
    "load_case",
]


@dataclass(frozen=True)
class Case:
    name: str
    net: NetworkSpec
    initial_plan: SignalPlan


def arterial_five() -> Case:
    """Five-intersection arterial with phase counts (5, 3, 2, 2, 2).

    Through traffic enters at a0 and passes every intersection. Intersection
    0 is a five-leg junction where four cross approaches each get their own
    phase; intersection 1 serves two cross approaches; the rest clear one
    cross street per cycle. Intersection 2's cross street forks between
    leaving the network and turning onto the arterial. Demand is heavily
    asymmetric (arterial 0.55 veh/step against 0.05 to 0.10 on the sides)
    while the initial plan splits an overlong 150s cycle evenly, so the
    arterial is badly underserved until the splits are rebalanced.

    Arrivals are Poisson, so episodes collected under different seeds see
    different queue trajectories. Seeded runs stay reproducible.
    """
    sat_arterial = 2
    sat_side = 1
    intersections = (
        IntersectionSpec(
            id=0,
            phases=(
                PhaseSpec(("m_a0",)),
                PhaseSpec(("m_s0a",)),
                PhaseSpec(("m_s0b",)),
                PhaseSpec(("m_s0c",)),
                PhaseSpec(("m_s0d",)),
            ),
        ),
        IntersectionSpec(
            id=1,
            phases=(
                PhaseSpec(("m_a1",)),
                PhaseSpec(("m_s1a",)),
                PhaseSpec(("m_s1b",)),
            ),
        ),
        IntersectionSpec(id=2, phases=(PhaseSpec(("m_a2",)), PhaseSpec(("m_s2x", "m_s2a")))),
        IntersectionSpec(id=3, phases=(PhaseSpec(("m_a3",)), PhaseSpec(("m_s3",)))),
        IntersectionSpec(id=4, phases=(PhaseSpec(("m_a4",)), PhaseSpec(("m_s4",)))),
    )
    links = (
        LinkSpec("a0", capacity=150, travel_steps=3),
        LinkSpec("a1", capacity=100, travel_steps=3),
        LinkSpec("a2", capacity=100, travel_steps=3),
        LinkSpec("a3", capacity=100, travel_steps=3),
        LinkSpec("a4", capacity=100, travel_steps=3),
        LinkSpec("s0a", capacity=40, travel_steps=2),
        LinkSpec("s0b", capacity=40, travel_steps=2),
        LinkSpec("s0c", capacity=40, travel_steps=2),
        LinkSpec("s0d", capacity=40, travel_steps=2),
        LinkSpec("s1a", capacity=40, travel_steps=2),
        LinkSpec("s1b", capacity=40, travel_steps=2),
        LinkSpec("s2", capacity=40, travel_steps=2),
        LinkSpec("s3", capacity=40, travel_steps=2),
        LinkSpec("s4", capacity=40, travel_steps=2),
    )
    movements = (
        MovementSpec("m_a0", "a0", "a1", sat_arterial),
        MovementSpec("m_a1", "a1", "a2", sat_arterial),
        MovementSpec("m_a2", "a2", "a3", sat_arterial),
        MovementSpec("m_a3", "a3", "a4", sat_arterial),
        MovementSpec("m_a4", "a4", None, sat_arterial),
        MovementSpec("m_s0a", "s0a", None, sat_side),
        MovementSpec("m_s0b", "s0b", None, sat_side),
        MovementSpec("m_s0c", "s0c", None, sat_side),
        MovementSpec("m_s0d", "s0d", None, sat_side),
        MovementSpec("m_s1a", "s1a", None, sat_side),
        MovementSpec("m_s1b", "s1b", None, sat_side),
        MovementSpec("m_s2x", "s2", None, sat_side),
        MovementSpec("m_s2a", "s2", "a3", sat_side),
        MovementSpec("m_s3", "s3", None, sat_side),
        MovementSpec("m_s4", "s4", None, sat_side),
    )
    net = NetworkSpec(
        intersections=intersections,
        links=links,
        movements=movements,
        demand={
            "a0": 0.55,
            "s0a": 0.05,
            "s0b": 0.05,
            "s0c": 0.05,
            "s0d": 0.05,
            "s1a": 0.06,
            "s1b": 0.06,
            "s2": 0.10,
            "s3": 0.08,
            "s4": 0.08,
        },
        turn_ratios={"s2": {"m_s2x": 0.7, "m_s2a": 0.3}},
        sampling_len=2,
        horizon=8,
        arrival_mode="poisson",
        seed=0,
    )
    cycle = 150
    bounds = Bounds.from_specs(net.intersections, net.sampling_len, default_max=cycle)
    return Case(name="arterial5", net=net, initial_plan=uniform_plan(bounds, cycle))


def two_phase_micro() -> Case:
    """One two-phase intersection on a 1 second grid with 1 second minimums."""
    net = NetworkSpec(
        intersections=(
            IntersectionSpec(
                id=0,
                phases=(
                    PhaseSpec(("go_a",), min_len=1, max_len=10),
                    PhaseSpec(("go_b",), min_len=1, max_len=10),
                ),
            ),
        ),
        links=(
            LinkSpec("in_a", capacity=20, travel_steps=0),
            LinkSpec("in_b", capacity=20, travel_steps=0),
        ),
        movements=(
            MovementSpec("go_a", "in_a", None, 1),
            MovementSpec("go_b", "in_b", None, 1),
        ),
        demand={"in_a": 0.4, "in_b": 0.3},
        sampling_len=1,
        horizon=8,
        seed=0,
    )
    return Case(name="micro2", net=net, initial_plan=SignalPlan(((2, 2),)))


BUNDLED = {
    "arterial5": arterial_five,
    "micro2": two_phase_micro,
}


def load_case(ref: str) -> Case:
    """Resolve ``bundled:<name>`` or a JSON file with network and initial plan."""
    if ref.startswith("bundled:"):
        name = ref.split(":", 1)[1]
        if name not in BUNDLED:
            raise ValueError(f"unknown bundled case {name!r}; have {sorted(BUNDLED)}")
        return BUNDLED[name]()
    payload = json.loads(Path(ref).read_text())
    net = NetworkSpec.from_json_dict(payload["network"])
    plan = SignalPlan.from_json_dict(payload["initial_plan"])
    return Case(name=Path(ref).stem, net=net, initial_plan=plan)
