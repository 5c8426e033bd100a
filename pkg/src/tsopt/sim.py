"""Deterministic store-and-forward traffic simulator.

The network is a directed graph of links joined by signalized movements.
Each movement keeps an integer queue at its upstream link's stop line. One
tick advances the clock by the sampling length and runs, in order:

1. measure waiting: every queued vehicle at the start of the tick waits for
   one sampling length,
2. discharge: movements green under the active phases move
   min(queue, saturation_flow, free downstream space) vehicles, processed in
   intersection then phase-listing order,
3. arrivals: transit buffers shift by one slot, vehicles whose travel time
   expired join their stop line (split across that link's movements by a
   deterministic largest-credit rule), and external demand enters entry
   links, deferred while the link is full.

All vehicle counts are integers, so conservation -- entered equals exited
plus queued plus in transit -- holds exactly. With deterministic arrivals a
run is a pure function of (spec, seed, plans); the optional Poisson mode
draws arrivals from a generator seeded the same way.

Waiting is a proxy for delay: it counts queued vehicles only, not travel
time on links. Per-intersection waiting partitions the global figure by the
intersection that controls each queue, so local rewards sum exactly to the
global one.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

from .plans import IntersectionSpec, PhaseSpec, SignalPlan

__all__ = [
    "SpecError",
    "SimulationError",
    "LinkSpec",
    "MovementSpec",
    "NetworkSpec",
    "SimState",
    "Observation",
    "CycleTrace",
    "CycleReward",
    "Simulator",
    "cycle_reward",
    "evaluate_plan",
    "export_traces_csv",
]


class SpecError(ValueError):
    """The network description violates a structural invariant."""


class SimulationError(RuntimeError):
    """The simulator was driven outside its contract."""


@dataclass(frozen=True)
class LinkSpec:
    """A road segment: bounded storage plus a fixed travel time in ticks."""

    id: str
    capacity: int
    travel_steps: int

    def __post_init__(self) -> None:
        if self.capacity <= 0:
            raise SpecError(f"link {self.id}: capacity must be positive")
        if self.travel_steps < 0:
            raise SpecError(f"link {self.id}: travel_steps must be >= 0")


@dataclass(frozen=True)
class MovementSpec:
    """A signalized turn from one link to another (or out of the network)."""

    id: str
    from_link: str
    to_link: str | None
    saturation_flow: int

    def __post_init__(self) -> None:
        if self.saturation_flow <= 0:
            raise SpecError(f"movement {self.id}: saturation_flow must be positive")


@dataclass(frozen=True)
class NetworkSpec:
    """Full scenario description: geometry, signals, demand, and run settings."""

    intersections: tuple[IntersectionSpec, ...]
    links: tuple[LinkSpec, ...]
    movements: tuple[MovementSpec, ...]
    demand: dict[str, float]
    turn_ratios: dict[str, dict[str, float]] = field(default_factory=dict)
    sampling_len: int = 1
    horizon: int = 8
    seed: int = 0
    arrival_mode: str = "deterministic"

    def __post_init__(self) -> None:
        object.__setattr__(self, "intersections", tuple(self.intersections))
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "movements", tuple(self.movements))
        self.validate()

    def validate(self) -> None:
        if self.sampling_len <= 0:
            raise SpecError("sampling_len must be positive")
        if self.horizon <= 0:
            raise SpecError("horizon must be positive")
        if self.arrival_mode not in ("deterministic", "poisson"):
            raise SpecError(f"unknown arrival_mode {self.arrival_mode!r}")
        link_ids = [l.id for l in self.links]
        if len(set(link_ids)) != len(link_ids):
            raise SpecError("duplicate link ids")
        mv_ids = [m.id for m in self.movements]
        if len(set(mv_ids)) != len(mv_ids):
            raise SpecError("duplicate movement ids")
        inter_ids = [j.id for j in self.intersections]
        if len(set(inter_ids)) != len(inter_ids):
            raise SpecError("duplicate intersection ids")
        links = set(link_ids)
        mvs = {m.id: m for m in self.movements}
        for m in self.movements:
            if m.from_link not in links:
                raise SpecError(f"movement {m.id}: unknown from_link {m.from_link}")
            if m.to_link is not None and m.to_link not in links:
                raise SpecError(f"movement {m.id}: unknown to_link {m.to_link}")
        # Every movement belongs to exactly one intersection and appears in
        # at least one of its phases; that partition makes local waiting sum
        # exactly to the global figure.
        owner: dict[str, int] = {}
        for j in self.intersections:
            for phase in j.phases:
                for mv in phase.movements:
                    if mv not in mvs:
                        raise SpecError(f"intersection {j.id}: unknown movement {mv}")
                    if owner.get(mv, j.id) != j.id:
                        raise SpecError(
                            f"movement {mv} is signalized by intersections "
                            f"{owner[mv]} and {j.id}"
                        )
                    owner[mv] = j.id
        orphans = set(mvs) - set(owner)
        if orphans:
            raise SpecError(f"movements in no phase: {sorted(orphans)}")
        # A link's movements must share one intersection, and every link
        # needs an outgoing movement so its queue can drain.
        out_by_link: dict[str, list[str]] = {l.id: [] for l in self.links}
        for m in self.movements:
            out_by_link[m.from_link].append(m.id)
        for lid, outs in out_by_link.items():
            if not outs:
                raise SpecError(f"link {lid} has no outgoing movement")
            owners = {owner[m] for m in outs}
            if len(owners) > 1:
                raise SpecError(
                    f"link {lid} feeds movements at several intersections {sorted(owners)}"
                )
            if len(outs) > 1:
                ratios = self.turn_ratios.get(lid)
                if ratios is None:
                    raise SpecError(f"link {lid} needs turn_ratios for {sorted(outs)}")
                if set(ratios) != set(outs):
                    raise SpecError(f"link {lid}: turn_ratios keys do not match movements")
                if any(r < 0 for r in ratios.values()):
                    raise SpecError(f"link {lid}: negative turn ratio")
                if abs(sum(ratios.values()) - 1.0) > 1e-9:
                    raise SpecError(f"link {lid}: turn ratios must sum to 1")
        for lid, rate in self.demand.items():
            if lid not in links:
                raise SpecError(f"demand on unknown link {lid}")
            if rate < 0:
                raise SpecError(f"link {lid}: negative demand rate")

    @property
    def num_intersections(self) -> int:
        return len(self.intersections)

    def phase_counts(self) -> tuple[int, ...]:
        return tuple(j.num_phases for j in self.intersections)

    def to_json_dict(self) -> dict:
        return {
            "sampling_len": self.sampling_len,
            "horizon": self.horizon,
            "seed": self.seed,
            "arrival_mode": self.arrival_mode,
            "intersections": [
                {
                    "id": j.id,
                    "phases": [
                        {
                            "movements": list(p.movements),
                            "min_len": p.min_len,
                            "max_len": p.max_len,
                        }
                        for p in j.phases
                    ],
                }
                for j in self.intersections
            ],
            "links": [
                {"id": l.id, "capacity": l.capacity, "travel_steps": l.travel_steps}
                for l in self.links
            ],
            "movements": [
                {
                    "id": m.id,
                    "from_link": m.from_link,
                    "to_link": m.to_link,
                    "saturation_flow": m.saturation_flow,
                }
                for m in self.movements
            ],
            "demand": dict(sorted(self.demand.items())),
            "turn_ratios": {
                lid: dict(sorted(r.items()))
                for lid, r in sorted(self.turn_ratios.items())
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    def spec_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    @classmethod
    def from_json_dict(cls, payload: dict) -> "NetworkSpec":
        intersections = tuple(
            IntersectionSpec(
                id=int(j["id"]),
                phases=tuple(
                    PhaseSpec(
                        movements=tuple(p["movements"]),
                        min_len=int(p.get("min_len", 10)),
                        max_len=None if p.get("max_len") is None else int(p["max_len"]),
                    )
                    for p in j["phases"]
                ),
            )
            for j in payload["intersections"]
        )
        links = tuple(
            LinkSpec(id=l["id"], capacity=int(l["capacity"]), travel_steps=int(l["travel_steps"]))
            for l in payload["links"]
        )
        movements = tuple(
            MovementSpec(
                id=m["id"],
                from_link=m["from_link"],
                to_link=m.get("to_link"),
                saturation_flow=int(m["saturation_flow"]),
            )
            for m in payload["movements"]
        )
        return cls(
            intersections=intersections,
            links=links,
            movements=movements,
            demand={k: float(v) for k, v in payload.get("demand", {}).items()},
            turn_ratios={
                lid: {m: float(r) for m, r in ratios.items()}
                for lid, ratios in payload.get("turn_ratios", {}).items()
            },
            sampling_len=int(payload.get("sampling_len", 1)),
            horizon=int(payload.get("horizon", 8)),
            seed=int(payload.get("seed", 0)),
            arrival_mode=payload.get("arrival_mode", "deterministic"),
        )

    @classmethod
    def loads(cls, text: str) -> "NetworkSpec":
        return cls.from_json_dict(json.loads(text))


@dataclass
class SimState:
    """Mutable simulator state. All vehicle counts are integers."""

    queues: list[int]
    link_queue: list[int]
    transit: list[list[int]]
    transit_sum: list[int]
    demand_acc: list[float]
    credit: list[list[float]]
    clock: int
    entered: int
    exited: int
    rng: np.random.Generator | None


@dataclass(frozen=True)
class Observation:
    """What one intersection's controller is allowed to see."""

    intersection: int
    queues: tuple[int, ...]
    phase_lengths: tuple[int, ...]
    cycle_index: int

    def features(self, capacities: Sequence[int]) -> np.ndarray:
        """Queues scaled by link capacity, durations scaled by cycle length."""
        qs = [q / c for q, c in zip(self.queues, capacities)]
        cyc = sum(self.phase_lengths)
        if cyc > 0:
            ls = [t / cyc for t in self.phase_lengths]
        else:
            ls = [0.0] * len(self.phase_lengths)
        return np.asarray(qs + ls, dtype=float)


@dataclass
class CycleTrace:
    """Per-tick record of one executed cycle."""

    start_clock: int
    sampling_len: int
    plan_lengths: tuple[tuple[int, ...], ...]
    features: list[np.ndarray]
    active_phases: list[tuple[int, ...]]
    waiting: list[int]
    waiting_by_intersection: list[tuple[int, ...]]

    @property
    def num_steps(self) -> int:
        return len(self.waiting)

    def total_waiting(self) -> int:
        return sum(self.waiting)

    def phase_start_steps(self, intersection: int) -> list[int]:
        """Tick index at which each of the intersection's phases begins."""
        starts, pos = [], 0
        for t in self.plan_lengths[intersection]:
            starts.append(pos)
            pos += t // self.sampling_len
        return starts


@dataclass(frozen=True)
class CycleReward:
    """Average per-tick reward of a cycle, globally and per intersection."""

    global_reward: float
    local_rewards: tuple[float, ...]


class Simulator:
    """Owns a network spec plus the evolving state. Single-threaded."""

    def __init__(self, spec: NetworkSpec, seed: int | None = None):
        self.spec = spec
        self._build_index()
        self.reset(seed)

    def _build_index(self) -> None:
        spec = self.spec
        self._link_ids = [l.id for l in spec.links]
        self._link_idx = {lid: k for k, lid in enumerate(self._link_ids)}
        self._cap = [l.capacity for l in spec.links]
        self._travel = [l.travel_steps for l in spec.links]
        self._mv_ids = [m.id for m in spec.movements]
        mv_idx = {mid: k for k, mid in enumerate(self._mv_ids)}
        self._mv_from = [self._link_idx[m.from_link] for m in spec.movements]
        self._mv_to = [
            -1 if m.to_link is None else self._link_idx[m.to_link] for m in spec.movements
        ]
        self._sat = [m.saturation_flow for m in spec.movements]
        self._out: list[list[int]] = [[] for _ in spec.links]
        for k, m in enumerate(spec.movements):
            self._out[self._mv_from[k]].append(k)
        self._ratio: list[list[float]] = []
        for L, outs in enumerate(self._out):
            lid = self._link_ids[L]
            if len(outs) == 1:
                self._ratio.append([1.0])
            else:
                ratios = spec.turn_ratios[lid]
                self._ratio.append([ratios[self._mv_ids[m]] for m in outs])
        self._green = [
            [[mv_idx[mid] for mid in phase.movements] for phase in j.phases]
            for j in spec.intersections
        ]
        self._inter_mvs = [
            sorted({mv_idx[mid] for phase in j.phases for mid in phase.movements})
            for j in spec.intersections
        ]
        self._incoming = [
            sorted({self._mv_from[m] for m in mvs}, key=lambda L: self._link_ids[L])
            for mvs in self._inter_mvs
        ]
        self._demand = sorted(
            ((self._link_idx[lid], rate) for lid, rate in spec.demand.items() if rate > 0),
            key=lambda kv: self._link_ids[kv[0]],
        )
        self._feature_dim = sum(
            len(self._incoming[j]) + spec.intersections[j].num_phases
            for j in range(spec.num_intersections)
        )

    def reset(self, seed: int | None = None) -> SimState:
        spec = self.spec
        rng = None
        if spec.arrival_mode == "poisson":
            rng = np.random.default_rng(spec.seed if seed is None else seed)
        self.state = SimState(
            queues=[0] * len(spec.movements),
            link_queue=[0] * len(spec.links),
            transit=[[0] * t for t in self._travel],
            transit_sum=[0] * len(spec.links),
            demand_acc=[0.0] * len(spec.links),
            credit=[[0.0] * len(outs) for outs in self._out],
            clock=0,
            entered=0,
            exited=0,
            rng=rng,
        )
        return self.state

    @property
    def feature_dim(self) -> int:
        return self._feature_dim

    def local_feature_dim(self, j: int) -> int:
        return len(self._incoming[j]) + self.spec.intersections[j].num_phases

    def step(self, active_phases: Sequence[int]) -> tuple[int, tuple[int, ...]]:
        """Advance one tick; returns (global, per-intersection) waiting."""
        spec = self.spec
        if len(active_phases) != spec.num_intersections:
            raise SimulationError("one active phase per intersection is required")
        st = self.state
        g = spec.sampling_len
        q = st.queues
        per_inter = []
        for mvs in self._inter_mvs:
            w = 0
            for m in mvs:
                w += q[m]
            per_inter.append(w * g)
        total = sum(per_inter)

        inflow = [0] * len(spec.links)
        mv_to, sat, cap = self._mv_to, self._sat, self._cap
        link_queue, transit_sum = st.link_queue, st.transit_sum
        for j, phase in enumerate(active_phases):
            greens = self._green[j]
            if not 0 <= phase < len(greens):
                raise SimulationError(
                    f"intersection {spec.intersections[j].id} has no phase {phase}"
                )
            for m in greens[phase]:
                qm = q[m]
                if qm == 0:
                    continue
                flow = qm if qm < sat[m] else sat[m]
                d = mv_to[m]
                if d >= 0:
                    free = cap[d] - link_queue[d] - transit_sum[d] - inflow[d]
                    if free <= 0:
                        continue
                    if flow > free:
                        flow = free
                    inflow[d] += flow
                else:
                    st.exited += flow
                q[m] = qm - flow
                link_queue[self._mv_from[m]] -= flow

        arrivals = [0] * len(spec.links)
        for L in range(len(spec.links)):
            buf = st.transit[L]
            if buf:
                arr = buf.pop(0)
                buf.append(0)
                transit_sum[L] -= arr
                if inflow[L]:
                    buf[-1] += inflow[L]
                    transit_sum[L] += inflow[L]
            else:
                arr = inflow[L]
            arrivals[L] = arr
        for L, rate in self._demand:
            if st.rng is not None:
                want = int(st.rng.poisson(rate))
            else:
                st.demand_acc[L] += rate
                want = int(st.demand_acc[L])
            space = self._cap[L] - link_queue[L] - transit_sum[L] - arrivals[L]
            emit = min(want, space) if space > 0 else 0
            if emit > 0:
                if st.rng is None:
                    st.demand_acc[L] -= emit
                st.entered += emit
                if st.transit[L]:
                    st.transit[L][-1] += emit
                    transit_sum[L] += emit
                else:
                    arrivals[L] += emit
        for L in range(len(spec.links)):
            arr = arrivals[L]
            if arr == 0:
                continue
            outs = self._out[L]
            if len(outs) == 1:
                q[outs[0]] += arr
            else:
                credit, ratios = st.credit[L], self._ratio[L]
                for t in range(len(outs)):
                    credit[t] += ratios[t] * arr
                for _ in range(arr):
                    best = 0
                    for t in range(1, len(outs)):
                        if credit[t] > credit[best]:
                            best = t
                    credit[best] -= 1.0
                    q[outs[best]] += 1
            link_queue[L] += arr
        st.clock += 1
        return total, tuple(per_inter)

    def observe(self, j: int, plan: SignalPlan | None = None, cycle_index: int = 0) -> Observation:
        st = self.state
        queues = tuple(st.link_queue[L] for L in self._incoming[j])
        if plan is not None:
            lengths = plan.lengths[j]
        else:
            lengths = (0,) * self.spec.intersections[j].num_phases
        return Observation(
            intersection=self.spec.intersections[j].id,
            queues=queues,
            phase_lengths=lengths,
            cycle_index=cycle_index,
        )

    def local_features(self, j: int, plan: SignalPlan | None = None) -> np.ndarray:
        caps = [self._cap[L] for L in self._incoming[j]]
        return self.observe(j, plan).features(caps)

    def joint_features(self, plan: SignalPlan | None = None) -> np.ndarray:
        return np.concatenate(
            [self.local_features(j, plan) for j in range(self.spec.num_intersections)]
        )

    def _schedule(self, plan: SignalPlan) -> list[list[int]]:
        g = self.spec.sampling_len
        sched = []
        for row in plan.lengths:
            steps: list[int] = []
            for i, t in enumerate(row):
                if t % g != 0 or t <= 0:
                    raise SimulationError(f"phase duration {t}s is off the {g}s grid")
                steps.extend([i] * (t // g))
            sched.append(steps)
        if len({len(s) for s in sched}) != 1:
            raise SimulationError("plan cycle lengths differ across intersections")
        return sched

    def run_cycle(self, plan: SignalPlan, record: bool = True) -> CycleTrace:
        """Execute one full cycle of the plan, returning its trace."""
        sched = self._schedule(plan)
        steps = len(sched[0])
        trace = CycleTrace(
            start_clock=self.state.clock,
            sampling_len=self.spec.sampling_len,
            plan_lengths=plan.lengths,
            features=[],
            active_phases=[],
            waiting=[],
            waiting_by_intersection=[],
        )
        for s in range(steps):
            active = tuple(sched[j][s] for j in range(len(sched)))
            if record:
                trace.features.append(self.joint_features(plan))
            w, per = self.step(active)
            if record:
                trace.active_phases.append(active)
            trace.waiting.append(w)
            trace.waiting_by_intersection.append(per)
        return trace

    def run_cycle_waiting(self, plan: SignalPlan) -> tuple[int, int]:
        """Fast path: (total waiting, tick count) without trace bookkeeping."""
        sched = self._schedule(plan)
        steps = len(sched[0])
        total = 0
        for s in range(steps):
            w, _ = self.step(tuple(sched[j][s] for j in range(len(sched))))
            total += w
        return total, steps

    def conservation_error(self) -> int:
        """entered - exited - queued - in_transit; zero when conservation holds."""
        st = self.state
        return st.entered - st.exited - sum(st.queues) - sum(st.transit_sum)


def cycle_reward(trace: CycleTrace) -> CycleReward:
    """Negative waiting per tick, globally and split by intersection."""
    n = trace.num_steps
    if n == 0:
        raise SimulationError("cannot score an empty trace")
    total = -sum(trace.waiting) / n
    locals_ = tuple(
        -sum(per[j] for per in trace.waiting_by_intersection) / n
        for j in range(len(trace.waiting_by_intersection[0]))
    )
    return CycleReward(global_reward=total, local_rewards=locals_)


def evaluate_plan(
    plan: SignalPlan,
    spec: NetworkSpec,
    warmup_cycles: int = 2,
    measured_cycles: int = 6,
    seed: int | None = None,
) -> float:
    """Fitness of a fixed plan: negated average waiting per tick.

    A fresh simulator is seeded from the spec (or the override), run for the
    warmup cycles, then scored over the measured ones. Higher is better.
    """
    if measured_cycles <= 0:
        raise ValueError("measured_cycles must be positive")
    sim = Simulator(spec, seed=spec.seed if seed is None else seed)
    for _ in range(warmup_cycles):
        sim.run_cycle_waiting(plan)
    waited = 0
    steps = 0
    for _ in range(measured_cycles):
        w, n = sim.run_cycle_waiting(plan)
        waited += w
        steps += n
    return -waited / steps


def export_traces_csv(
    traces: Iterable[CycleTrace],
    out: IO[str],
    intersection_ids: Sequence[int] | None = None,
) -> None:
    """Write traces as rows of (cycle, step, intersection, active_phase, queued, waiting)."""
    writer = csv.writer(out)
    writer.writerow(["cycle", "step", "intersection", "active_phase", "queued", "waiting"])
    for c, trace in enumerate(traces):
        ids = (
            list(intersection_ids)
            if intersection_ids is not None
            else list(range(len(trace.plan_lengths)))
        )
        for s in range(trace.num_steps):
            per = trace.waiting_by_intersection[s]
            active = trace.active_phases[s] if trace.active_phases else None
            for j, jid in enumerate(ids):
                w = per[j]
                writer.writerow(
                    [
                        c,
                        s,
                        jid,
                        active[j] if active is not None else "",
                        w // trace.sampling_len,
                        w,
                    ]
                )
