"""Constrained evolution strategies over fixed-time signal plans.

The search space is the set of valid plans: integer durations on the
sampling grid, per-phase bounds, one shared cycle length. Perturbations are
sampled so that every intersection's delta sums to the same cycle change,
which keeps the constraint satisfied before clipping ever enters.

Two samplers are provided. ``least_phases`` draws free deltas for the
intersection with the fewest phases (ties broken by lowest id) and makes
every other intersection balance its last phase against the same cycle
change. ``conditioned_variance`` picks the anchor uniformly at random and
scales the per-phase noise so each intersection's sum has the same spread:
the anchor's phases get std sigma/sqrt(n), the balancing intersections' free
phases get std sigma/n.

Fitness is the negated average waiting per tick of a fresh, seeded rollout,
so the whole optimizer is a deterministic function of its config seed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .plans import (
    Bounds,
    PlanDelta,
    SignalPlan,
    apply_delta,
    flatten_plan,
    grid_round,
    repair_plan,
    unflatten_plan,
    validate_plan,
)
from .sim import NetworkSpec, evaluate_plan

__all__ = [
    "EsConfig",
    "GenerationRecord",
    "EsResult",
    "least_phases_anchor",
    "sample_delta_least_phases",
    "sample_delta_conditioned_variance",
    "antithetic_pair",
    "rank_shape",
    "es_update",
    "run_es",
]

SCHEMES = ("least_phases", "conditioned_variance")


@dataclass(frozen=True)
class EsConfig:
    """Knobs for one optimization run.

    The default learning rate is deliberately coarse: updates are rounded to
    the sampling grid, so a rate near 1 with rank-shaped utilities (bounded
    by 1/2) could never move a phase by even one grid step.
    """

    sigma: float = 2.0
    learning_rate: float = 20.0
    pairs_per_generation: int = 10
    generations: int = 30
    scheme: str = "least_phases"
    seed: int = 0
    use_rank_shaping: bool = True
    eval_warmup_cycles: int = 2
    eval_cycles: int = 6

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.pairs_per_generation < 1 or self.generations < 1:
            raise ValueError("pairs_per_generation and generations must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.eval_cycles < 1 or self.eval_warmup_cycles < 0:
            raise ValueError("bad evaluation cycle counts")


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    best_fitness: float
    mean_fitness: float
    plan: SignalPlan
    queries_used: int


@dataclass(frozen=True)
class EsResult:
    best_plan: SignalPlan
    best_fitness: float
    records: tuple[GenerationRecord, ...]

    @property
    def final_plan(self) -> SignalPlan:
        return self.records[-1].plan


def least_phases_anchor(phase_counts: Sequence[int], ids: Sequence[int] | None = None) -> int:
    """Index of the intersection with the fewest phases, lowest id on ties."""
    if ids is None:
        ids = range(len(phase_counts))
    best = 0
    for j in range(1, len(phase_counts)):
        if phase_counts[j] < phase_counts[best] or (
            phase_counts[j] == phase_counts[best] and ids[j] < ids[best]
        ):
            best = j
    return best


def _cycle_change_limit(plan: SignalPlan, bounds: Bounds) -> int:
    # Largest |dt| such that both cycle +- dt stay jointly feasible, keeping
    # antithetic application safe.
    lo_c, hi_c = bounds.cycle_interval()
    c = plan.cycle_length()
    if not lo_c <= c <= hi_c:
        raise ValueError("plan cycle length is outside the feasible interval")
    return min(c - lo_c, hi_c - c)


def _balanced_rows(
    plan: SignalPlan,
    bounds: Bounds,
    anchor: int,
    anchor_sigma: float,
    other_sigma: Callable[[int], float],
    rng: np.random.Generator,
) -> PlanDelta:
    g = bounds.sampling_len
    counts = plan.phase_counts()
    anchor_row = []
    for i in range(counts[anchor]):
        d = grid_round(rng.normal(0.0, anchor_sigma), g)
        t = plan.lengths[anchor][i]
        d = min(max(d, bounds.lo[anchor][i] - t), bounds.hi[anchor][i] - t)
        anchor_row.append(d)
    dt = sum(anchor_row)
    limit = _cycle_change_limit(plan, bounds)
    clamped = min(max(dt, -limit), limit)
    if clamped != dt:
        anchor_row[-1] += clamped - dt
        dt = clamped
    rows: list[list[int]] = []
    for j, n in enumerate(counts):
        if j == anchor:
            rows.append(anchor_row)
            continue
        sig = other_sigma(n)
        row = [grid_round(rng.normal(0.0, sig), g) for _ in range(n - 1)]
        row.append(dt - sum(row))
        rows.append(row)
    return PlanDelta(tuple(tuple(r) for r in rows))


def sample_delta_least_phases(
    plan: SignalPlan,
    bounds: Bounds,
    sigma: float,
    rng: np.random.Generator,
) -> PlanDelta:
    """Free noise on the fewest-phase intersection; everyone else balances."""
    anchor = least_phases_anchor(plan.phase_counts())
    return _balanced_rows(plan, bounds, anchor, sigma, lambda n: sigma, rng)


def sample_delta_conditioned_variance(
    plan: SignalPlan,
    bounds: Bounds,
    sigma: float,
    rng: np.random.Generator,
) -> PlanDelta:
    """Random anchor with variance split so every sum has spread sigma."""
    counts = plan.phase_counts()
    anchor = int(rng.integers(0, len(counts)))
    return _balanced_rows(
        plan,
        bounds,
        anchor,
        sigma / np.sqrt(counts[anchor]),
        lambda n: sigma / n,
        rng,
    )


_SAMPLERS = {
    "least_phases": sample_delta_least_phases,
    "conditioned_variance": sample_delta_conditioned_variance,
}


def antithetic_pair(
    plan: SignalPlan,
    delta: PlanDelta,
    bounds: Bounds,
) -> tuple[SignalPlan, SignalPlan]:
    """The plan perturbed by +delta and by -delta, both repaired to validity."""
    return (
        apply_delta(plan, delta, bounds=bounds),
        apply_delta(plan, -delta, bounds=bounds),
    )


def rank_shape(fitnesses: Sequence[float]) -> np.ndarray:
    """Map fitnesses to centered rank utilities in [-1/2, 1/2].

    The k-th smallest value gets k/(m-1) - 1/2; ties share the mean of their
    rank range, so the utilities always sum to zero.
    """
    v = np.asarray(fitnesses, dtype=float)
    m = v.size
    if m < 2:
        raise ValueError("rank shaping needs at least two fitnesses")
    order = np.argsort(v, kind="stable")
    ranks = np.empty(m, dtype=float)
    i = 0
    sorted_v = v[order]
    while i < m:
        j = i
        while j + 1 < m and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0
        i = j + 1
    return ranks / (m - 1) - 0.5


def es_update(
    theta: np.ndarray,
    deltas: Sequence[np.ndarray],
    utilities: Sequence[float],
    alpha: float,
    sigma: float,
    n: int | None = None,
    *,
    bounds: Bounds | None = None,
    sampling_len: int = 1,
) -> np.ndarray:
    """One ascent step theta + alpha/(n*sigma) * sum(u_k * delta_k).

    The result is rounded to the sampling grid and, when bounds are given,
    repaired to a valid plan (targeting the grid-rounded mean cycle).
    """
    theta = np.asarray(theta, dtype=float)
    if len(deltas) != len(utilities):
        raise ValueError("deltas and utilities differ in length")
    if n is None:
        n = len(deltas)
    if n < 1:
        raise ValueError("n must be >= 1")
    step = np.zeros_like(theta)
    for d, u in zip(deltas, utilities):
        step += float(u) * np.asarray(d, dtype=float)
    raw = theta + (alpha / (n * sigma)) * step
    g = bounds.sampling_len if bounds is not None else sampling_len
    rounded = np.asarray([grid_round(v, g) for v in raw], dtype=float)
    if bounds is None:
        return rounded
    counts = bounds.phase_counts()
    plan_rows = unflatten_plan(rounded, counts).lengths
    sums = [sum(row) for row in plan_rows]
    lo_c, hi_c = bounds.cycle_interval()
    target = min(max(grid_round(sum(sums) / len(sums), g), lo_c), hi_c)
    return flatten_plan(repair_plan(plan_rows, bounds, target))


def run_es(
    initial_plan: SignalPlan,
    net: NetworkSpec,
    config: EsConfig,
) -> EsResult:
    """Optimize a plan against the network's seeded rollout fitness.

    Per generation: sample ``pairs_per_generation`` balanced deltas, evaluate
    both members of each antithetic pair (exactly two fitness queries per
    pair), shape fitnesses into utilities, and take one gradient-ascent step
    on the flattened plan. Returns the best plan ever evaluated plus one
    record per generation.
    """
    specs = net.intersections
    bounds = Bounds.from_specs(specs, net.sampling_len, default_max=initial_plan.cycle_length())
    report = validate_plan(initial_plan, specs, net.sampling_len, default_max=initial_plan.cycle_length())
    if not report.ok:
        raise ValueError(f"initial plan is invalid: {report.violations[0].message}")
    sampler = _SAMPLERS[config.scheme]
    rng = np.random.default_rng(config.seed)
    plan = initial_plan
    fitness_of: Callable[[SignalPlan], float] = lambda p: evaluate_plan(
        p, net, config.eval_warmup_cycles, config.eval_cycles
    )
    records: list[GenerationRecord] = []
    best_plan = initial_plan
    best_fit = -np.inf
    queries = 0
    for gen in range(config.generations):
        flat_deltas: list[np.ndarray] = []
        fits: list[float] = []
        for _ in range(config.pairs_per_generation):
            delta = sampler(plan, bounds, config.sigma, rng)
            plus, minus = antithetic_pair(plan, delta, bounds)
            flat = np.asarray([v for row in delta.deltas for v in row], dtype=float)
            for candidate, eps in ((plus, flat), (minus, -flat)):
                fit = fitness_of(candidate)
                queries += 1
                flat_deltas.append(eps)
                fits.append(fit)
                if fit > best_fit:
                    best_fit = fit
                    best_plan = candidate
        utilities = rank_shape(fits) if config.use_rank_shaping else np.asarray(fits)
        theta = es_update(
            flatten_plan(plan),
            flat_deltas,
            utilities,
            config.learning_rate,
            config.sigma,
            len(flat_deltas),
            bounds=bounds,
        )
        plan = unflatten_plan(theta, plan.phase_counts())
        records.append(
            GenerationRecord(
                generation=gen,
                best_fitness=max(fits),
                mean_fitness=float(np.mean(fits)),
                plan=plan,
                queries_used=queries,
            )
        )
    return EsResult(best_plan=best_plan, best_fitness=best_fit, records=tuple(records))
