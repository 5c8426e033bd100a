"""Cycle-based signal plans and their constraint set.

A plan assigns an integer duration in seconds to every phase of every
intersection. Three constraints define validity:

* every duration lies inside the phase's [min_len, max_len] window,
* every duration is a multiple of the simulator sampling length,
* all intersections share one cycle length (the sum of their phases).

The repair projection is the single chokepoint through which raw, possibly
invalid durations are forced back onto that set: clip each phase into its
window, then restore the target cycle length by adjusting the last phase and
cascading backward when a bound binds. Samplers, decoders, and optimizer
updates all route through it, so "emitted plans are always valid" reduces to
the correctness of this one function.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "InfeasibleRepairError",
    "PhaseSpec",
    "IntersectionSpec",
    "SignalPlan",
    "PlanDelta",
    "PlanViolation",
    "ValidationReport",
    "Bounds",
    "grid_round",
    "grid_floor",
    "grid_ceil",
    "validate_plan",
    "flatten_plan",
    "unflatten_plan",
    "repair_lengths",
    "repair_plan",
    "apply_delta",
    "uniform_plan",
]


class InfeasibleRepairError(ValueError):
    """No valid plan exists at the requested cycle length."""


def grid_round(value: float, step: int) -> int:
    """Nearest multiple of ``step``; ties round away from zero."""
    if step <= 0:
        raise ValueError("grid step must be positive")
    q = math.floor(abs(value) / step + 0.5)
    return int(math.copysign(q, value)) * step if value < 0 else q * step


def grid_floor(value: float, step: int) -> int:
    if step <= 0:
        raise ValueError("grid step must be positive")
    return int(math.floor(value / step)) * step


def grid_ceil(value: float, step: int) -> int:
    if step <= 0:
        raise ValueError("grid step must be positive")
    return int(math.ceil(value / step)) * step


@dataclass(frozen=True)
class PhaseSpec:
    """One phase: the movements it turns green plus its duration window."""

    movements: tuple[str, ...]
    min_len: int = 10
    max_len: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "movements", tuple(self.movements))
        if not self.movements:
            raise ValueError("a phase must grant green to at least one movement")
        if self.min_len <= 0:
            raise ValueError("min_len must be positive")
        if self.max_len is not None and self.max_len < self.min_len:
            raise ValueError("max_len must be >= min_len")


@dataclass(frozen=True)
class IntersectionSpec:
    """Signalized intersection: an id and at least two phases."""

    id: int
    phases: tuple[PhaseSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "phases", tuple(self.phases))
        if len(self.phases) < 2:
            raise ValueError(f"intersection {self.id} needs >= 2 phases")

    @property
    def num_phases(self) -> int:
        return len(self.phases)


def _freeze_rows(rows: Iterable[Iterable[int]]) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(int(v) for v in row) for row in rows)


@dataclass(frozen=True)
class SignalPlan:
    """Phase durations in seconds, one row per intersection."""

    lengths: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "lengths", _freeze_rows(self.lengths))
        if not self.lengths:
            raise ValueError("a plan must cover at least one intersection")

    def cycle_length(self) -> int:
        return sum(self.lengths[0])

    def cycle_lengths(self) -> tuple[int, ...]:
        return tuple(sum(row) for row in self.lengths)

    def phase_counts(self) -> tuple[int, ...]:
        return tuple(len(row) for row in self.lengths)

    def to_json_dict(self, ids: Sequence[int] | None = None) -> dict:
        if ids is None:
            ids = range(len(self.lengths))
        return {
            "intersections": [
                {"id": int(i), "phases": list(row)}
                for i, row in zip(ids, self.lengths)
            ]
        }

    def dumps(self, ids: Sequence[int] | None = None) -> str:
        return json.dumps(self.to_json_dict(ids), sort_keys=True)

    @classmethod
    def from_json_dict(cls, payload: dict) -> "SignalPlan":
        entries = sorted(payload["intersections"], key=lambda e: int(e["id"]))
        return cls(tuple(tuple(int(v) for v in e["phases"]) for e in entries))

    @classmethod
    def loads(cls, text: str) -> "SignalPlan":
        return cls.from_json_dict(json.loads(text))


@dataclass(frozen=True)
class PlanDelta:
    """Signed per-phase adjustments in seconds.

    Deltas emitted by the evolution-strategy samplers keep the per
    intersection sums equal, so adding them to a valid plan preserves cycle
    equality before any clipping. Decoded policy actions carry no such
    guarantee; the repair projection restores equality for them.
    """

    deltas: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "deltas", _freeze_rows(self.deltas))
        if not self.deltas:
            raise ValueError("a delta must cover at least one intersection")

    def __neg__(self) -> "PlanDelta":
        return PlanDelta(tuple(tuple(-v for v in row) for row in self.deltas))

    def sums(self) -> tuple[int, ...]:
        return tuple(sum(row) for row in self.deltas)

    def max_abs(self) -> int:
        return max(abs(v) for row in self.deltas for v in row)


@dataclass(frozen=True)
class PlanViolation:
    kind: str
    message: str
    intersection: int | None = None
    phase: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[PlanViolation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


def _check_shape(plan_rows: Sequence[Sequence[int]], specs: Sequence[IntersectionSpec]) -> None:
    if len(plan_rows) != len(specs):
        raise ValueError(
            f"plan covers {len(plan_rows)} intersections, specs describe {len(specs)}"
        )
    for row, spec in zip(plan_rows, specs):
        if len(row) != spec.num_phases:
            raise ValueError(
                f"intersection {spec.id}: plan has {len(row)} phases, spec has {spec.num_phases}"
            )


def validate_plan(
    plan: SignalPlan,
    specs: Sequence[IntersectionSpec],
    sampling_len: int = 1,
    default_max: int | None = None,
) -> ValidationReport:
    """Check a plan against bounds, the sampling grid, and cycle equality.

    Shape mismatches raise; constraint violations are reported. Phases whose
    spec omits ``max_len`` fall back to ``default_max`` (no upper check when
    that is None too).
    """
    _check_shape(plan.lengths, specs)
    if sampling_len <= 0:
        raise ValueError("sampling_len must be positive")
    found: list[PlanViolation] = []
    for row, spec in zip(plan.lengths, specs):
        for i, (t, phase) in enumerate(zip(row, spec.phases)):
            hi = phase.max_len if phase.max_len is not None else default_max
            if t < phase.min_len or (hi is not None and t > hi):
                found.append(
                    PlanViolation(
                        "bounds",
                        f"intersection {spec.id} phase {i}: {t}s outside "
                        f"[{phase.min_len}, {hi if hi is not None else 'inf'}]",
                        intersection=spec.id,
                        phase=i,
                    )
                )
            if t % sampling_len != 0:
                found.append(
                    PlanViolation(
                        "grid",
                        f"intersection {spec.id} phase {i}: {t}s is not a "
                        f"multiple of the {sampling_len}s sampling length",
                        intersection=spec.id,
                        phase=i,
                    )
                )
    cycles = plan.cycle_lengths()
    if len(set(cycles)) > 1:
        for spec, c in zip(specs, cycles):
            found.append(
                PlanViolation(
                    "cycle_equality",
                    f"intersection {spec.id} cycle {c}s (all intersections must match)",
                    intersection=spec.id,
                )
            )
    return ValidationReport(tuple(found))


def flatten_plan(plan: SignalPlan) -> np.ndarray:
    """Concatenate all phase durations into one float vector."""
    values = [float(v) for row in plan.lengths for v in row]
    if not values:
        raise ValueError("cannot flatten an empty plan")
    return np.asarray(values, dtype=float)


def unflatten_plan(values: Sequence[float], phase_counts: Sequence[int]) -> SignalPlan:
    """Inverse of :func:`flatten_plan` for the given per-intersection counts."""
    values = list(values)
    if sum(phase_counts) != len(values):
        raise ValueError(
            f"{len(values)} values cannot fill phase counts {tuple(phase_counts)}"
        )
    rows = []
    pos = 0
    for n in phase_counts:
        rows.append(tuple(int(round(v)) for v in values[pos : pos + n]))
        pos += n
    return SignalPlan(tuple(rows))


@dataclass(frozen=True)
class Bounds:
    """Grid-aligned per-phase duration windows, resolved from specs."""

    lo: tuple[tuple[int, ...], ...]
    hi: tuple[tuple[int, ...], ...]
    sampling_len: int

    @classmethod
    def from_specs(
        cls,
        specs: Sequence[IntersectionSpec],
        sampling_len: int = 1,
        default_max: int | None = None,
    ) -> "Bounds":
        if sampling_len <= 0:
            raise ValueError("sampling_len must be positive")
        lo_rows, hi_rows = [], []
        for spec in specs:
            lo_row, hi_row = [], []
            for i, phase in enumerate(spec.phases):
                raw_hi = phase.max_len if phase.max_len is not None else default_max
                if raw_hi is None:
                    raise ValueError(
                        f"intersection {spec.id} phase {i} has no max_len and "
                        "no default was provided"
                    )
                lo = grid_ceil(phase.min_len, sampling_len)
                hi = grid_floor(raw_hi, sampling_len)
                if lo > hi:
                    raise InfeasibleRepairError(
                        f"intersection {spec.id} phase {i}: window "
                        f"[{phase.min_len}, {raw_hi}] holds no multiple of {sampling_len}"
                    )
                lo_row.append(lo)
                hi_row.append(hi)
            lo_rows.append(tuple(lo_row))
            hi_rows.append(tuple(hi_row))
        return cls(tuple(lo_rows), tuple(hi_rows), sampling_len)

    def cycle_interval(self) -> tuple[int, int]:
        """Cycle lengths feasible for every intersection at once. May be empty."""
        return (
            max(sum(row) for row in self.lo),
            min(sum(row) for row in self.hi),
        )

    def tightened(self, base: SignalPlan, radius: int) -> "Bounds":
        """Intersect the windows with a +-radius box around a base plan."""
        if radius < 0:
            raise ValueError("radius must be non-negative")
        lo_rows, hi_rows = [], []
        for lo_row, hi_row, base_row in zip(self.lo, self.hi, base.lengths):
            lo_rows.append(tuple(max(l, b - radius) for l, b in zip(lo_row, base_row)))
            hi_rows.append(tuple(min(h, b + radius) for h, b in zip(hi_row, base_row)))
        for lo_row, hi_row in zip(lo_rows, hi_rows):
            if any(l > h for l, h in zip(lo_row, hi_row)):
                raise InfeasibleRepairError("base plan lies outside its own bounds")
        return Bounds(tuple(lo_rows), tuple(hi_rows), self.sampling_len)

    def phase_counts(self) -> tuple[int, ...]:
        return tuple(len(row) for row in self.lo)


def repair_lengths(
    raw: Sequence[int],
    lo: Sequence[int],
    hi: Sequence[int],
    target: int,
) -> list[int]:
    """Project one intersection's durations onto its constraint set.

    Clip into [lo, hi], then absorb the remaining cycle-length error into the
    last phase, cascading backward when a bound binds. Feasibility requires
    sum(lo) <= target <= sum(hi).
    """
    x = [min(max(int(v), l), h) for v, l, h in zip(raw, lo, hi)]
    residual = target - sum(x)
    for i in reversed(range(len(x))):
        if residual == 0:
            break
        if residual > 0:
            take = min(residual, hi[i] - x[i])
        else:
            take = max(residual, lo[i] - x[i])
        x[i] += take
        residual -= take
    if residual != 0:
        raise InfeasibleRepairError(
            f"cycle length {target} is not reachable within bounds "
            f"[{sum(lo)}, {sum(hi)}]"
        )
    return x


def repair_plan(
    raw_rows: Sequence[Sequence[int]],
    bounds: Bounds,
    target_cycle: int,
) -> SignalPlan:
    """Apply :func:`repair_lengths` per intersection at one shared cycle length."""
    if target_cycle % bounds.sampling_len != 0:
        raise InfeasibleRepairError(
            f"target cycle {target_cycle} is off the {bounds.sampling_len}s grid"
        )
    rows = []
    for raw, lo, hi in zip(raw_rows, bounds.lo, bounds.hi):
        if target_cycle < sum(lo) or target_cycle > sum(hi):
            raise InfeasibleRepairError(
                f"cycle length {target_cycle} infeasible for bounds "
                f"[{sum(lo)}, {sum(hi)}]"
            )
        rows.append(tuple(repair_lengths(raw, lo, hi, target_cycle)))
    return SignalPlan(tuple(rows))


def _resolve_bounds(
    plan: SignalPlan,
    specs: Sequence[IntersectionSpec] | None,
    sampling_len: int,
    bounds: Bounds | None,
    default_max: int | None,
) -> Bounds:
    if bounds is not None:
        return bounds
    if specs is None:
        raise ValueError("either specs or bounds must be provided")
    if default_max is None:
        # Unbounded phases default to the plan's own cycle length.
        default_max = plan.cycle_length()
    return Bounds.from_specs(specs, sampling_len, default_max)


def apply_delta(
    plan: SignalPlan,
    delta: PlanDelta,
    specs: Sequence[IntersectionSpec] | None = None,
    sampling_len: int = 1,
    *,
    bounds: Bounds | None = None,
    default_max: int | None = None,
) -> SignalPlan:
    """Add a delta to a plan and project the result back to validity.

    Cycle-preserving deltas (equal per-intersection sums) pin the target cycle
    to the implied value; if any intersection cannot reach it the repair is
    infeasible and raises. Deltas with unequal sums target the grid-rounded
    mean implied cycle, clamped into the jointly feasible interval.
    """
    bounds = _resolve_bounds(plan, specs, sampling_len, bounds, default_max)
    step = bounds.sampling_len
    if len(delta.deltas) != len(plan.lengths) or any(
        len(d) != len(t) for d, t in zip(delta.deltas, plan.lengths)
    ):
        raise ValueError("delta shape does not match plan shape")
    raw = [
        [grid_round(t + d, step) for t, d in zip(t_row, d_row)]
        for t_row, d_row in zip(plan.lengths, delta.deltas)
    ]
    sums = [sum(row) for row in raw]
    if len(set(sums)) == 1:
        target = grid_round(sums[0], step)
    else:
        lo_c, hi_c = bounds.cycle_interval()
        if lo_c > hi_c:
            raise InfeasibleRepairError(
                "no cycle length is feasible for every intersection"
            )
        target = min(max(grid_round(sum(sums) / len(sums), step), lo_c), hi_c)
    return repair_plan(raw, bounds, target)


def uniform_plan(bounds: Bounds, cycle: int) -> SignalPlan:
    """Even phase split at the given cycle length, repaired onto the grid."""
    step = bounds.sampling_len
    target = grid_round(cycle, step)
    raw = [
        [grid_round(target / len(lo_row), step)] * len(lo_row)
        for lo_row in bounds.lo
    ]
    return repair_plan(raw, bounds, target)
