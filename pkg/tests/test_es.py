"""Constrained perturbation sampling, rank shaping, and the update rule."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsopt.es import (
    EsConfig,
    antithetic_pair,
    es_update,
    least_phases_anchor,
    rank_shape,
    run_es,
    sample_delta_conditioned_variance,
    sample_delta_least_phases,
)
from tsopt.plans import (
    Bounds,
    IntersectionSpec,
    PhaseSpec,
    SignalPlan,
    flatten_plan,
    validate_plan,
)
from tsopt.scenarios import two_phase_micro

from conftest import micro_plan, zero_demand_micro


def specs_for(counts, min_len=1):
    return tuple(
        IntersectionSpec(
            id=j,
            phases=tuple(PhaseSpec((f"m{j}_{i}",), min_len=min_len) for i in range(n)),
        )
        for j, n in enumerate(counts)
    )


def roomy_setup(counts=(2, 3), cycle=300, min_len=1, default_max=1000):
    specs = specs_for(counts, min_len=min_len)
    bounds = Bounds.from_specs(specs, 1, default_max=default_max)
    rows = []
    for n in counts:
        base = cycle // n
        row = [base] * n
        row[-1] += cycle - base * n
        rows.append(tuple(row))
    return specs, bounds, SignalPlan(tuple(rows))


def test_anchor_is_fewest_phases_lowest_id():
    assert least_phases_anchor((5, 3, 2, 2, 2)) == 2
    assert least_phases_anchor((3, 2, 2)) == 1
    assert least_phases_anchor((2,)) == 0
    assert least_phases_anchor((4, 4), ids=(9, 3)) == 1


def test_tiny_sigma_gives_zero_delta():
    specs, bounds, plan = roomy_setup()
    rng = np.random.default_rng(0)
    for sampler in (sample_delta_least_phases, sample_delta_conditioned_variance):
        delta = sampler(plan, bounds, 1e-9, rng)
        assert delta.max_abs() == 0


@pytest.mark.parametrize(
    "sampler", [sample_delta_least_phases, sample_delta_conditioned_variance]
)
def test_sampled_deltas_preserve_cycle_equality(sampler):
    specs, bounds, plan = roomy_setup(counts=(3, 2), cycle=60, default_max=100)
    rng = np.random.default_rng(42)
    for _ in range(2000):
        delta = sampler(plan, bounds, 3.0, rng)
        assert len(set(delta.sums())) == 1
        plus, minus = antithetic_pair(plan, delta, bounds)
        assert validate_plan(plus, specs, 1, default_max=100).ok
        assert validate_plan(minus, specs, 1, default_max=100).ok


def test_least_phases_sums_follow_anchor():
    # The anchor with the fewest phases sets the cycle change; every other
    # intersection's delta must sum to the same amount.
    specs, bounds, plan = roomy_setup(counts=(2, 3))
    rng = np.random.default_rng(7)
    for _ in range(200):
        delta = sample_delta_least_phases(plan, bounds, 2.0, rng)
        anchor_sum = sum(delta.deltas[0])
        assert sum(delta.deltas[1]) == anchor_sum


def test_conditioned_variance_sum_spread():
    # Every intersection's delta sum equals the anchor's, whose variance is
    # approximately sigma squared by construction; rounding noise is inside
    # the 3-standard-error band at this sample size.
    specs, bounds, plan = roomy_setup(counts=(2, 3), cycle=250)
    rng = np.random.default_rng(0)
    sigma = 2.0
    draws = 4000
    sums = [
        sample_delta_conditioned_variance(plan, bounds, sigma, rng).sums()[0]
        for _ in range(draws)
    ]
    var = float(np.var(sums))
    se = sigma**2 * np.sqrt(2.0 / (draws - 1))
    assert abs(var - sigma**2) <= 3 * se


def test_antithetic_pair_zero_delta_and_symmetry():
    from tsopt.plans import PlanDelta

    specs, bounds, plan = roomy_setup()
    zero = PlanDelta(tuple((0,) * n for n in plan.phase_counts()))
    plus, minus = antithetic_pair(plan, zero, bounds)
    assert plus == plan and minus == plan
    rng = np.random.default_rng(3)
    for _ in range(100):
        delta = sample_delta_least_phases(plan, bounds, 2.0, rng)
        plus, minus = antithetic_pair(plan, delta, bounds)
        mid = (flatten_plan(plus) + flatten_plan(minus)) / 2.0
        # Far from every bound nothing clips, so the pair averages back.
        assert np.array_equal(mid, flatten_plan(plan))


def test_rank_shape_pinned_example():
    assert rank_shape([3.2, -1.0, 7.5]).tolist() == [0.0, -0.5, 0.5]


def test_rank_shape_ties_and_errors():
    assert np.allclose(rank_shape([4.0, 4.0, 4.0]), 0.0)
    assert np.allclose(rank_shape([1.0, 2.0, 2.0, 3.0]), [-0.5, 0.0, 0.0, 0.5])
    with pytest.raises(ValueError):
        rank_shape([1.0])


@given(
    st.lists(st.integers(min_value=-50, max_value=50), min_size=2, max_size=12)
)
@settings(max_examples=100)
def test_rank_shape_monotone_invariance(values):
    # Integer fitnesses keep ties exact under both transformations.
    base = rank_shape([float(v) for v in values])
    assert np.array_equal(base, rank_shape([2.0 * v + 1.0 for v in values]))
    assert np.array_equal(base, rank_shape([float(v) ** 3 for v in values]))
    assert abs(float(np.sum(base))) < 1e-12


def test_es_update_formula_instantiation():
    theta = np.array([20.0, 20.0])
    eps = np.array([3.0, -3.0])
    out = es_update(theta, [eps], [0.25], alpha=1.0, sigma=1.0, n=1)
    assert out.tolist() == [21.0, 19.0]


def test_es_update_antithetic_cancellation():
    theta = np.array([30.0, 50.0, 40.0])
    eps = np.array([4.0, -1.0, -3.0])
    out = es_update(theta, [eps, -eps], [0.3, 0.3], alpha=5.0, sigma=2.0)
    assert np.array_equal(out, theta)


def test_es_update_respects_bounds_and_grid():
    specs = specs_for((2,), min_len=10)
    bounds = Bounds.from_specs(specs, 2, default_max=60)
    theta = np.array([40.0, 20.0])
    eps = np.array([30.0, -30.0])
    out = es_update(theta, [eps], [0.5], alpha=4.0, sigma=1.0, bounds=bounds)
    plan = SignalPlan(((int(out[0]), int(out[1])),))
    assert validate_plan(plan, specs, 2, default_max=60).ok


def test_es_update_direction_on_quadratic():
    # Rank-shaped antithetic estimates should point toward the optimum in
    # nearly all trials.
    rng = np.random.default_rng(0)
    theta_star = np.array([5.0, -3.0, 2.0, 0.0, 1.0])
    hits = moved = 0
    trials = 200
    for _ in range(trials):
        theta = rng.integers(-8, 9, size=5).astype(float)
        deltas, fits = [], []
        for _ in range(8):
            eps = rng.normal(0.0, 1.0, size=5)
            for sign in (1.0, -1.0):
                deltas.append(sign * eps)
                fits.append(-float(np.sum((theta + sign * eps - theta_star) ** 2)))
        utilities = rank_shape(fits)
        # Large step size so the unit grid does not swallow the update.
        new = es_update(theta, deltas, utilities, alpha=16.0, sigma=1.0, sampling_len=1)
        step = new - theta
        if np.any(step != 0):
            moved += 1
            if float(np.dot(step, theta_star - theta)) > 0:
                hits += 1
    assert moved >= 0.95 * trials
    assert hits >= 0.95 * moved


def test_run_es_query_accounting(micro_case):
    cfg = EsConfig(generations=3, pairs_per_generation=2, sigma=1.0, seed=0)
    result = run_es(micro_case.initial_plan, micro_case.net, cfg)
    assert len(result.records) == 3
    for rec in result.records:
        assert rec.queries_used == 2 * 2 * (rec.generation + 1)
    assert result.records[-1].queries_used == 12
    assert result.best_fitness >= result.records[0].mean_fitness


def test_run_es_deterministic(micro_case):
    cfg = EsConfig(generations=2, pairs_per_generation=3, seed=5, sigma=1.0)
    a = run_es(micro_case.initial_plan, micro_case.net, cfg)
    b = run_es(micro_case.initial_plan, micro_case.net, cfg)
    assert a.best_plan == b.best_plan
    assert a.best_fitness == b.best_fitness
    assert [r.mean_fitness for r in a.records] == [r.mean_fitness for r in b.records]


def test_run_es_zero_demand_leaves_plan_alone():
    net = zero_demand_micro()
    cfg = EsConfig(generations=3, pairs_per_generation=2, sigma=1.0, seed=1)
    result = run_es(micro_plan(2, 2), net, cfg)
    assert result.best_fitness == 0.0
    # All fitnesses tie at zero, all utilities vanish, the plan never moves.
    assert result.final_plan == micro_plan(2, 2)


def test_run_es_rejects_invalid_initial(micro_case):
    cfg = EsConfig(generations=1, pairs_per_generation=1)
    # Wrong number of intersections for this network.
    with pytest.raises(ValueError):
        run_es(SignalPlan(((2, 2), (3, 3))), micro_case.net, cfg)


def test_es_config_validation():
    with pytest.raises(ValueError):
        EsConfig(sigma=0.0)
    with pytest.raises(ValueError):
        EsConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        EsConfig(scheme="random_walk")
    with pytest.raises(ValueError):
        EsConfig(generations=0)


def test_best_plan_tracks_best_query(micro_case):
    cfg = EsConfig(generations=4, pairs_per_generation=3, seed=2, sigma=1.5)
    result = run_es(micro_case.initial_plan, micro_case.net, cfg)
    assert result.best_fitness == max(r.best_fitness for r in result.records)
    specs = micro_case.net.intersections
    assert validate_plan(
        result.best_plan, specs, micro_case.net.sampling_len,
        default_max=micro_case.initial_plan.cycle_length(),
    ).ok
