"""Shared builders for small test networks.

The micro and chain networks are intentionally tiny: one or two
intersections, 1 second grid, single-digit queues, so exhaustive oracles and
hand calculations stay possible.
"""
from __future__ import annotations

import pytest

from tsopt.plans import IntersectionSpec, PhaseSpec, SignalPlan
from tsopt.scenarios import arterial_five, two_phase_micro
from tsopt.sim import LinkSpec, MovementSpec, NetworkSpec


@pytest.fixture
def micro_case():
    return two_phase_micro()


@pytest.fixture
def arterial_case():
    return arterial_five()


def chain_net(
    demand_e: float = 0.7,
    demand_s: float = 0.45,
    cap_e: int = 15,
    cap_l1: int = 10,
    cap_s: int = 12,
    sat_thru: int = 2,
    arrival_mode: str = "deterministic",
) -> NetworkSpec:
    """Two intersections in series with a turn fork and nonzero travel times.

    Entry link e forks at intersection 0 between continuing to l1 and leaving
    the network; l1 and the side street s clear at intersection 1. Small
    capacities make spillback blocking reachable in a few steps.
    """
    return NetworkSpec(
        intersections=(
            IntersectionSpec(
                id=0,
                phases=(
                    PhaseSpec(("m_thru", "m_off"), min_len=1),
                    PhaseSpec(("m_off",), min_len=1),
                ),
            ),
            IntersectionSpec(
                id=1,
                phases=(
                    PhaseSpec(("m_l1",), min_len=1),
                    PhaseSpec(("m_s",), min_len=1),
                ),
            ),
        ),
        links=(
            LinkSpec("e", capacity=cap_e, travel_steps=0),
            LinkSpec("l1", capacity=cap_l1, travel_steps=2),
            LinkSpec("s", capacity=cap_s, travel_steps=1),
        ),
        movements=(
            MovementSpec("m_thru", "e", "l1", sat_thru),
            MovementSpec("m_off", "e", None, 1),
            MovementSpec("m_l1", "l1", None, 2),
            MovementSpec("m_s", "s", None, 1),
        ),
        demand={"e": demand_e, "s": demand_s},
        turn_ratios={"e": {"m_thru": 0.6, "m_off": 0.4}},
        sampling_len=1,
        horizon=8,
        seed=0,
        arrival_mode=arrival_mode,
    )


def zero_demand_micro() -> NetworkSpec:
    net = two_phase_micro().net
    return NetworkSpec(
        intersections=net.intersections,
        links=net.links,
        movements=net.movements,
        demand={},
        sampling_len=net.sampling_len,
        horizon=net.horizon,
        seed=net.seed,
    )


@pytest.fixture
def chain():
    return chain_net()


def micro_plan(a: int, b: int) -> SignalPlan:
    return SignalPlan(((a, b),))
