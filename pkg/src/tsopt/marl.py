"""Offline multi-agent actor-critic training on logged signal cycles.

One agent per intersection. Actors are decentralized: they see only their
own intersection's observation and emit one value per phase. Critics are
centralized: they score the joint observation together with the joint
action, in the style of MADDPG, with slowly blended target copies providing
the bootstrap.

Training is strictly offline. The batch is a set of logged cycles collected
once around a base plan with small uniform exploration noise; no gradient
ever touches the simulator. Three optional components shape the regression:

* bounded actions: actor outputs decode to per-phase adjustments of the base
  plan, clipped to +-delta seconds before repair, instead of raw durations;
* batch augmentation: logged cycles of two-phase intersections spawn extra
  transitions starting inside their first phase, and a shared value network
  learns average per-tick reward over single phase windows so the critic
  target can replace the noisy immediate reward with a per-phase estimate;
* reward clipping: each agent's immediate reward mixes the global reward
  with its local reward clipped at a batch quantile, bounding how hard one
  low-traffic intersection can dominate the shared objective.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .nn import AdamState, Mlp, NonFiniteGradientError, adam_step, soft_update
from .plans import (
    Bounds,
    PlanDelta,
    SignalPlan,
    grid_floor,
    grid_round,
    repair_plan,
    validate_plan,
)
from .sim import CycleTrace, NetworkSpec, Simulator, cycle_reward

__all__ = [
    "TrainingDivergedError",
    "MaddpgConfig",
    "TransitionRecord",
    "DerivedTransition",
    "PhaseWindowSample",
    "BatchDataset",
    "EvalHook",
    "HistoryRow",
    "TrainingHistory",
    "TrainedPolicy",
    "decode_bounded_action",
    "decode_full_range",
    "encode_bounded",
    "encode_full",
    "collect_batch",
    "augment_two_phase",
    "build_phase_window_samples",
    "estimate_clip_levels",
    "shape_reward",
    "augmented_reward_estimate",
    "OfflineTrainer",
    "train_offline",
    "evaluate_policies",
    "save_dataset",
    "load_dataset",
]


class TrainingDivergedError(RuntimeError):
    """Losses or gradients stopped being finite."""


_QUARTILES = {"Q2": 0.5, "Q3": 0.75}


@dataclass(frozen=True)
class MaddpgConfig:
    """Trainer settings; the three booleans are the ablation switches.

    Training starts from the fixed-time plan: actors are first regressed
    onto the action that reproduces the base plan (``actor_init_iterations``
    supervised steps), and for the first ``critic_warmup`` iterations only
    the critics move, so policy refinement begins from a fitted critic
    rather than from noise.
    """

    gamma: float = 0.95
    tau: float = 0.01
    delta: int = 6
    reward_mix: float = 0.5
    clip_quartile: str = "Q3"
    batch_size: int = 128
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    value_lr: float = 1e-3
    iterations: int = 2000
    value_iterations: int = 1500
    actor_init_iterations: int = 500
    critic_warmup: int = 500
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0
    bounded_action: bool = True
    batch_augmentation: bool = True
    reward_clipping: bool = True
    eval_every: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if not 0.0 <= self.reward_mix <= 1.0:
            raise ValueError("reward_mix must lie in [0, 1]")
        if self.clip_quartile not in _QUARTILES:
            raise ValueError(f"clip_quartile must be one of {sorted(_QUARTILES)}")
        if self.batch_size < 1 or self.iterations < 1 or self.value_iterations < 1:
            raise ValueError("batch_size, iterations, value_iterations must be >= 1")
        if self.actor_init_iterations < 0:
            raise ValueError("actor_init_iterations must be >= 0")
        if not 0 <= self.critic_warmup < self.iterations:
            raise ValueError("critic_warmup must lie in [0, iterations)")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")


@dataclass
class TransitionRecord:
    """One logged control cycle."""

    obs: list[np.ndarray]
    delta: PlanDelta
    plan: SignalPlan
    reward: float
    rewards_local: tuple[float, ...]
    next_obs: list[np.ndarray]
    trace: CycleTrace
    episode: int
    cycle: int


@dataclass(frozen=True)
class DerivedTransition:
    """A transition inferred from inside a logged cycle, not simulated."""

    features: np.ndarray
    plan: SignalPlan
    reward: float
    rewards_local: tuple[float, ...]
    next_obs: tuple[np.ndarray, ...]
    source_intersection: int
    source_offset: int


@dataclass(frozen=True)
class PhaseWindowSample:
    """Supervised target: average per-tick reward inside one phase window."""

    features: np.ndarray
    plan: SignalPlan
    intersection: int
    phase: int
    code_index: int
    target: float
    steps: int


@dataclass
class BatchDataset:
    """Logged cycles plus the provenance needed to train from them alone."""

    records: list[TransitionRecord]
    base_plan: SignalPlan
    network: dict
    network_hash: str
    eta: float
    seed: int
    episodes: int
    cycles_per_episode: int

    def __len__(self) -> int:
        return len(self.records)

    def intersections(self):
        return NetworkSpec.from_json_dict(self.network).intersections

    def sampling_len(self) -> int:
        return int(self.network["sampling_len"])


@dataclass(frozen=True)
class EvalHook:
    """Opt-in mid-training evaluation; the only door back to the simulator."""

    net: NetworkSpec
    cycles: int
    seed: int | None = None


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    critic_loss: float
    actor_objective: float
    eval_waiting: float | None = None


@dataclass
class TrainingHistory:
    rows: list[HistoryRow]
    value_losses: list[float]
    sim_calls: int = 0


def _as_outputs(outputs, counts: Sequence[int]) -> list[np.ndarray]:
    if isinstance(outputs, np.ndarray) and outputs.ndim == 1:
        rows, pos = [], 0
        for n in counts:
            rows.append(outputs[pos : pos + n])
            pos += n
        if pos != outputs.size:
            raise ValueError("flat outputs do not match phase counts")
        return rows
    rows = [np.asarray(o, dtype=float) for o in outputs]
    if [r.size for r in rows] != list(counts):
        raise ValueError("outputs do not match phase counts")
    return rows


def decode_bounded_action(
    outputs,
    base_plan: SignalPlan,
    delta_bound: float,
    bounds: Bounds,
) -> tuple[PlanDelta, SignalPlan]:
    """Map actor outputs in (-1, 1) to a valid plan near the base plan.

    Each output scales to seconds, rounds to the sampling grid, and is
    clipped so no phase moves more than delta_bound from its base duration,
    both before and after repair. The repair targets the grid-rounded mean
    implied cycle, clamped into the interval feasible for the tightened box,
    which always contains the base cycle.
    """
    g = bounds.sampling_len
    counts = base_plan.phase_counts()
    rows = _as_outputs(outputs, counts)
    eff = grid_floor(delta_bound, g)
    delta_rows = []
    for row in rows:
        delta_rows.append(
            tuple(min(max(grid_round(float(o) * delta_bound, g), -eff), eff) for o in row)
        )
    delta = PlanDelta(tuple(delta_rows))
    tight = bounds.tightened(base_plan, eff)
    raw = [
        [t + d for t, d in zip(t_row, d_row)]
        for t_row, d_row in zip(base_plan.lengths, delta.deltas)
    ]
    sums = [sum(r) for r in raw]
    lo_c, hi_c = tight.cycle_interval()
    target = min(max(grid_round(sum(sums) / len(sums), g), lo_c), hi_c)
    return delta, repair_plan(raw, tight, target)


def decode_full_range(outputs, bounds: Bounds) -> SignalPlan:
    """Map actor outputs in (-1, 1) across each phase's whole duration window."""
    g = bounds.sampling_len
    counts = bounds.phase_counts()
    rows = _as_outputs(outputs, counts)
    raw = []
    for row, lo_row, hi_row in zip(rows, bounds.lo, bounds.hi):
        raw.append(
            [
                min(max(grid_round(lo + (float(o) + 1.0) / 2.0 * (hi - lo), g), lo), hi)
                for o, lo, hi in zip(row, lo_row, hi_row)
            ]
        )
    sums = [sum(r) for r in raw]
    lo_c, hi_c = bounds.cycle_interval()
    target = min(max(grid_round(sum(sums) / len(sums), g), lo_c), hi_c)
    return repair_plan(raw, bounds, target)


def encode_bounded(plan: SignalPlan, base_plan: SignalPlan, delta_bound: int) -> np.ndarray:
    """Executed plan as per-phase offsets from base, in units of the bound."""
    if delta_bound <= 0:
        return np.zeros(sum(plan.phase_counts()))
    vals = [
        (t - b) / delta_bound
        for t_row, b_row in zip(plan.lengths, base_plan.lengths)
        for t, b in zip(t_row, b_row)
    ]
    return np.asarray(vals, dtype=float)


def encode_full(plan: SignalPlan, bounds: Bounds) -> np.ndarray:
    """Executed plan scaled into (-1, 1) per phase window."""
    vals = []
    for t_row, lo_row, hi_row in zip(plan.lengths, bounds.lo, bounds.hi):
        for t, lo, hi in zip(t_row, lo_row, hi_row):
            vals.append(0.0 if hi == lo else 2.0 * (t - lo) / (hi - lo) - 1.0)
    return np.asarray(vals, dtype=float)


def _episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def collect_batch(
    base_plan: SignalPlan,
    net: NetworkSpec,
    episodes: int,
    eta: float,
    seed: int,
    cycles_per_episode: int | None = None,
) -> BatchDataset:
    """Log cycles around the base plan under uniform exploration noise.

    Every cycle draws a per-phase delta uniformly in [-eta, +eta] seconds
    (grid-rounded, repaired), executes it, and records the transition. With
    eta = 0 every action is exactly the base plan. Episodes restart the
    simulator; records within one episode are contiguous.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    cycles = net.horizon if cycles_per_episode is None else cycles_per_episode
    if cycles < 1:
        raise ValueError("cycles_per_episode must be >= 1")
    specs = net.intersections
    report = validate_plan(specs=specs, plan=base_plan, sampling_len=net.sampling_len,
                           default_max=base_plan.cycle_length())
    if not report.ok:
        raise ValueError(f"base plan is invalid: {report.violations[0].message}")
    bounds = Bounds.from_specs(specs, net.sampling_len, default_max=base_plan.cycle_length())
    rng = np.random.default_rng(seed)
    sim = Simulator(net)
    records: list[TransitionRecord] = []
    counts = base_plan.phase_counts()
    n_inter = net.num_intersections
    for ep in range(episodes):
        sim.reset(seed=_episode_seed(seed, ep))
        prev_plan = base_plan
        obs = [sim.local_features(j, prev_plan) for j in range(n_inter)]
        for c in range(cycles):
            outs = [rng.uniform(-1.0, 1.0, size=n) for n in counts]
            delta, plan = decode_bounded_action(outs, base_plan, eta, bounds)
            trace = sim.run_cycle(plan, record=True)
            reward = cycle_reward(trace)
            next_obs = [sim.local_features(j, plan) for j in range(n_inter)]
            records.append(
                TransitionRecord(
                    obs=obs,
                    delta=delta,
                    plan=plan,
                    reward=reward.global_reward,
                    rewards_local=reward.local_rewards,
                    next_obs=next_obs,
                    trace=trace,
                    episode=ep,
                    cycle=c,
                )
            )
            prev_plan = plan
            obs = next_obs
    return BatchDataset(
        records=records,
        base_plan=base_plan,
        network=net.to_json_dict(),
        network_hash=net.spec_hash(),
        eta=float(eta),
        seed=seed,
        episodes=episodes,
        cycles_per_episode=cycles,
    )


def augment_two_phase(record: TransitionRecord) -> list[DerivedTransition]:
    """Derive extra transitions from inside two-phase first phases.

    For each intersection with exactly two phases, a cycle that spent k ticks
    in its first phase also tells us what happens when that phase is k ticks
    shorter and control starts at the offset state: the rest of the trace is
    the rollout. Offsets run strictly inside the first phase (0 < offset <
    first-phase length); the boundary and anything beyond are not inferable
    from the log and are never emitted.
    """
    trace = record.trace
    if not trace.features:
        raise ValueError("record has no per-tick features to derive from")
    g = trace.sampling_len
    total = trace.num_steps
    # Suffix sums make every offset's truncated reward O(1).
    tail_w = np.zeros(total + 1)
    tail_w[:total] = np.cumsum(np.asarray(trace.waiting, dtype=float)[::-1])[::-1]
    per = np.asarray(trace.waiting_by_intersection, dtype=float)
    tail_per = np.zeros((total + 1, per.shape[1]))
    tail_per[:total] = np.cumsum(per[::-1], axis=0)[::-1]
    out: list[DerivedTransition] = []
    next_obs = tuple(record.next_obs)
    for j, row in enumerate(record.plan.lengths):
        if len(row) != 2:
            continue
        first_steps = row[0] // g
        for k in range(1, first_steps):
            remaining = total - k
            shortened = tuple(
                (r[0] - k * g, r[1]) if jj == j else r
                for jj, r in enumerate(record.plan.lengths)
            )
            out.append(
                DerivedTransition(
                    features=trace.features[k],
                    plan=SignalPlan(shortened),
                    reward=-tail_w[k] / remaining,
                    rewards_local=tuple(-tail_per[k] / remaining),
                    next_obs=next_obs,
                    source_intersection=j,
                    source_offset=k,
                )
            )
    return out


def _code_offsets(counts: Sequence[int]) -> list[int]:
    offsets, pos = [], 0
    for n in counts:
        offsets.append(pos)
        pos += n
    return offsets


def build_phase_window_samples(records: Sequence[TransitionRecord]) -> list[PhaseWindowSample]:
    """One supervised sample per phase per intersection per logged cycle.

    The sample pairs the joint state at the phase's first tick with the
    executed action and a one-hot phase code; its target is the average
    per-tick reward while that phase ran. Summing target times window length
    over one intersection's phases recovers the cycle's total reward mass
    exactly, because the windows partition the cycle.
    """
    out: list[PhaseWindowSample] = []
    for record in records:
        trace = record.trace
        if not trace.features:
            raise ValueError("record has no per-tick features")
        counts = record.plan.phase_counts()
        offsets = _code_offsets(counts)
        total = trace.num_steps
        for j, n in enumerate(counts):
            starts = trace.phase_start_steps(j)
            for p in range(n):
                s0 = starts[p]
                s1 = starts[p + 1] if p + 1 < n else total
                steps = s1 - s0
                target = -sum(trace.waiting[s0:s1]) / steps
                out.append(
                    PhaseWindowSample(
                        features=trace.features[s0],
                        plan=record.plan,
                        intersection=j,
                        phase=p,
                        code_index=offsets[j] + p,
                        target=target,
                        steps=steps,
                    )
                )
    return out


def estimate_clip_levels(local_rewards: np.ndarray, quartile: str = "Q3") -> np.ndarray:
    """Per-intersection clip level: a quantile of the logged local rewards."""
    arr = np.asarray(local_rewards, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 4:
        raise ValueError("need a (records, intersections) array with >= 4 records")
    if quartile not in _QUARTILES:
        raise ValueError(f"quartile must be one of {sorted(_QUARTILES)}")
    return np.quantile(arr, _QUARTILES[quartile], axis=0)


def shape_reward(global_reward: float, local_reward: float, mix: float, clip_level: float) -> float:
    """Mix the global reward with the clipped local one."""
    return mix * global_reward + (1.0 - mix) * min(local_reward, clip_level)


def augmented_reward_estimate(
    trace: CycleTrace,
    intersection: int,
    base_row: Sequence[int],
    value_fn: Callable[[np.ndarray, int], float],
) -> float:
    """Rebuild a cycle reward from per-phase window values.

    ``value_fn(state_features, phase_index)`` estimates the average per-tick
    reward of one phase window; each estimate is weighted by the base plan's
    share of the cycle. With exact window values and the base plan executed
    unchanged, this reproduces the logged reward.
    """
    g = trace.sampling_len
    total = trace.num_steps
    starts = trace.phase_start_steps(intersection)
    est = 0.0
    for p, start in enumerate(starts):
        est += (base_row[p] // g) / total * value_fn(trace.features[start], p)
    return est


@dataclass
class TrainedPolicy:
    """Decentralized actors plus everything needed to execute them."""

    actors: list[Mlp]
    base_plan: SignalPlan
    delta_bound: int
    bounded: bool
    bounds: Bounds

    def act(self, local_features: Sequence[np.ndarray]) -> tuple[PlanDelta, SignalPlan]:
        """Assemble one joint plan from per-intersection observations.

        Each actor sees only its own features; the shared repair that
        restores cycle equality is the execution layer's job, mirroring how
        a common cycle is physically coordinated.
        """
        outs = [actor.forward(f) for actor, f in zip(self.actors, local_features)]
        if self.bounded:
            return decode_bounded_action(outs, self.base_plan, self.delta_bound, self.bounds)
        plan = decode_full_range(outs, self.bounds)
        delta = PlanDelta(
            tuple(
                tuple(t - b for t, b in zip(t_row, b_row))
                for t_row, b_row in zip(plan.lengths, self.base_plan.lengths)
            )
        )
        return delta, plan

    def save(self, path: str | Path) -> None:
        payload = {
            "actors": [a.to_json_dict() for a in self.actors],
            "base_plan": self.base_plan.to_json_dict(),
            "delta_bound": self.delta_bound,
            "bounded": self.bounded,
            "bounds": {
                "lo": [list(r) for r in self.bounds.lo],
                "hi": [list(r) for r in self.bounds.hi],
                "sampling_len": self.bounds.sampling_len,
            },
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "TrainedPolicy":
        payload = json.loads(Path(path).read_text())
        return cls(
            actors=[Mlp.from_json_dict(a) for a in payload["actors"]],
            base_plan=SignalPlan.from_json_dict(payload["base_plan"]),
            delta_bound=int(payload["delta_bound"]),
            bounded=bool(payload["bounded"]),
            bounds=Bounds(
                lo=tuple(tuple(int(v) for v in r) for r in payload["bounds"]["lo"]),
                hi=tuple(tuple(int(v) for v in r) for r in payload["bounds"]["hi"]),
                sampling_len=int(payload["bounds"]["sampling_len"]),
            ),
        )


class OfflineTrainer:
    """Fits actors and critics to one batch; never touches a simulator.

    The constructor precomputes every array the update loop needs, including
    the per-agent immediate-reward targets (augmented and clipped according
    to the config), so each iteration is pure network arithmetic.
    """

    def __init__(self, dataset: BatchDataset, config: MaddpgConfig,
                 base_plan: SignalPlan | None = None):
        if not dataset.records:
            raise ValueError("dataset is empty")
        self.cfg = config
        self.base_plan = base_plan if base_plan is not None else dataset.base_plan
        specs = dataset.intersections()
        g = dataset.sampling_len()
        if config.bounded_action and config.delta < g:
            raise ValueError(
                f"delta ({config.delta}s) is below the {g}s sampling grid, so a "
                "bounded action could never move any phase"
            )
        self.bounds = Bounds.from_specs(specs, g, default_max=self.base_plan.cycle_length())
        self.sampling_len = g
        records = dataset.records
        self.n_agents = len(specs)
        self.counts = self.base_plan.phase_counts()
        self.obs_dims = [o.size for o in records[0].obs]
        self.obs_slices = []
        pos = 0
        for d in self.obs_dims:
            self.obs_slices.append(slice(pos, pos + d))
            pos += d
        self.obs_dim = pos
        self.act_slices = []
        pos = 0
        for n in self.counts:
            self.act_slices.append(slice(pos, pos + n))
            pos += n
        self.act_dim = pos

        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
        hid = config.hidden
        self.actors = [
            Mlp((self.obs_dims[j], *hid, self.counts[j]), output="tanh", seed=self.rng)
            for j in range(self.n_agents)
        ]
        self.critics = [
            Mlp((self.obs_dim + self.act_dim, *hid, 1), seed=self.rng)
            for _ in range(self.n_agents)
        ]
        self.actor_targets = [a.copy() for a in self.actors]
        self.critic_targets = [c.copy() for c in self.critics]
        self.actor_opts = [AdamState.for_net(a, config.actor_lr) for a in self.actors]
        self.critic_opts = [AdamState.for_net(c, config.critic_lr) for c in self.critics]
        self.value_net: Mlp | None = None

        encode = self._encode_plan
        X = np.stack([np.concatenate(r.obs) for r in records])
        XN = np.stack([np.concatenate(r.next_obs) for r in records])
        A = np.stack([encode(r.plan) for r in records])
        RG = np.asarray([r.reward for r in records])
        RL = np.asarray([r.rewards_local for r in records])
        self._num_original = len(records)

        derived: list[DerivedTransition] = []
        if config.batch_augmentation:
            for r in records:
                derived.extend(augment_two_phase(r))
        if derived:
            XD = np.stack([d.features for d in derived])
            AD = np.stack([encode(d.plan) for d in derived])
            XND = np.stack([np.concatenate(d.next_obs) for d in derived])
            RGD = np.asarray([d.reward for d in derived])
            RLD = np.asarray([d.rewards_local for d in derived])
        self._num_derived = len(derived)

        self.window_samples: list[PhaseWindowSample] = []
        if config.batch_augmentation:
            self.window_samples = build_phase_window_samples(records)
            self.value_net = Mlp(
                (self.obs_dim + 2 * self.act_dim, *hid, 1), seed=self.rng
            )
            self._value_inputs = np.stack(
                [
                    np.concatenate([s.features, encode(s.plan), self._one_hot(s.code_index)])
                    for s in self.window_samples
                ]
            )
            self._value_targets = np.asarray([s.target for s in self.window_samples])

        if config.reward_clipping:
            self.clip_levels = estimate_clip_levels(RL, config.clip_quartile)
        else:
            self.clip_levels = None

        self._pretrain_value_losses: list[float] = []
        if config.batch_augmentation:
            self._train_value_net()
            base_est = np.asarray(
                [
                    [self._value_estimate(r, j, A[i]) for j in range(self.n_agents)]
                    for i, r in enumerate(records)
                ]
            )
        else:
            base_est = np.tile(RG[:, None], (1, self.n_agents))

        imm = np.empty((self._num_original, self.n_agents))
        for j in range(self.n_agents):
            if config.reward_clipping:
                clipped = np.minimum(RL[:, j], self.clip_levels[j])
                imm[:, j] = config.reward_mix * base_est[:, j] + (1 - config.reward_mix) * clipped
            else:
                imm[:, j] = base_est[:, j]
        if derived:
            imm_d = np.empty((self._num_derived, self.n_agents))
            for j in range(self.n_agents):
                if config.reward_clipping:
                    clipped = np.minimum(RLD[:, j], self.clip_levels[j])
                    imm_d[:, j] = (
                        config.reward_mix * RGD + (1 - config.reward_mix) * clipped
                    )
                else:
                    imm_d[:, j] = RGD
            self.X = np.vstack([X, XD])
            self.A = np.vstack([A, AD])
            self.XN = np.vstack([XN, XND])
            self.IMM = np.vstack([imm, imm_d])
        else:
            self.X, self.A, self.XN, self.IMM = X, A, XN, imm
        self.sim_calls = 0
        if config.actor_init_iterations > 0:
            self._init_actors_to_base()

    def _init_actors_to_base(self) -> None:
        # Regress every actor onto the encoding of the unchanged base plan,
        # so refinement starts from the fixed-time behavior instead of from
        # random outputs.
        base_enc = self._encode_plan(self.base_plan)
        n = self.X.shape[0]
        batch = min(self.cfg.batch_size, n)
        for j in range(self.n_agents):
            target = base_enc[self.act_slices[j]]
            opt = AdamState.for_net(self.actors[j], self.cfg.actor_lr)
            for _ in range(self.cfg.actor_init_iterations):
                idx = self.rng.integers(0, n, size=batch)
                ob = self.X[idx][:, self.obs_slices[j]]
                out = self.actors[j].forward(ob)
                diff = out - target[None, :]
                grads, _ = self.actors[j].backward(
                    ob, (2.0 / (batch * target.size)) * diff
                )
                adam_step(self.actors[j], grads, opt)
            self.actor_targets[j] = self.actors[j].copy()

    def _encode_plan(self, plan: SignalPlan) -> np.ndarray:
        if self.cfg.bounded_action:
            return encode_bounded(plan, self.base_plan, self.cfg.delta)
        return encode_full(plan, self.bounds)

    def _one_hot(self, index: int) -> np.ndarray:
        v = np.zeros(self.act_dim)
        v[index] = 1.0
        return v

    def _train_value_net(self) -> None:
        assert self.value_net is not None
        opt = AdamState.for_net(self.value_net, self.cfg.value_lr)
        n = len(self.window_samples)
        batch = min(self.cfg.batch_size, n)
        for _ in range(self.cfg.value_iterations):
            idx = self.rng.integers(0, n, size=batch)
            inp = self._value_inputs[idx]
            pred = self.value_net.forward(inp)[:, 0]
            diff = pred - self._value_targets[idx]
            loss = float(np.mean(diff**2))
            if not np.isfinite(loss):
                raise TrainingDivergedError("window value loss is not finite")
            self._pretrain_value_losses.append(loss)
            grads, _ = self.value_net.backward(inp, (2.0 / batch) * diff[:, None])
            adam_step(self.value_net, grads, opt)

    def _value_estimate(self, record: TransitionRecord, agent: int, action_enc: np.ndarray) -> float:
        offsets = _code_offsets(self.counts)

        def value_fn(features: np.ndarray, phase: int) -> float:
            inp = np.concatenate([features, action_enc, self._one_hot(offsets[agent] + phase)])
            return float(self.value_net.forward(inp)[0])

        return augmented_reward_estimate(
            record.trace, agent, self.base_plan.lengths[agent], value_fn
        )

    def _target_actions(self, xn: np.ndarray) -> np.ndarray:
        return np.hstack(
            [self.actor_targets[j].forward(xn[:, self.obs_slices[j]]) for j in range(self.n_agents)]
        )

    def critic_update(self, agent: int, idx: np.ndarray, target_actions: np.ndarray) -> float:
        """One regression step of agent's critic toward its bootstrap target."""
        cfg = self.cfg
        xb, ab = self.X[idx], self.A[idx]
        inp = np.hstack([xb, ab])
        nxt = np.hstack([self.XN[idx], target_actions])
        boot = self.critic_targets[agent].forward(nxt)[:, 0]
        y = self.IMM[idx, agent] + cfg.gamma * boot
        q = self.critics[agent].forward(inp)[:, 0]
        diff = q - y
        loss = float(np.mean(diff**2))
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"critic {agent} loss is not finite")
        grads, _ = self.critics[agent].backward(inp, (2.0 / idx.size) * diff[:, None])
        adam_step(self.critics[agent], grads, self.critic_opts[agent])
        return loss

    def actor_update(self, agent: int, idx: np.ndarray, update: bool = True) -> float:
        """Ascend the critic's score of this agent's action slot."""
        xb = self.X[idx]
        ob = xb[:, self.obs_slices[agent]]
        out = self.actors[agent].forward(ob)
        a_mod = self.A[idx].copy()
        a_mod[:, self.act_slices[agent]] = out
        inp = np.hstack([xb, a_mod])
        q = self.critics[agent].forward(inp)[:, 0]
        objective = float(np.mean(q))
        if not update:
            return objective
        _, din = self.critics[agent].backward(inp, np.full((idx.size, 1), 1.0 / idx.size))
        sl = self.act_slices[agent]
        dout = din[:, self.obs_dim + sl.start : self.obs_dim + sl.stop]
        grads, _ = self.actors[agent].backward(ob, dout)
        adam_step(self.actors[agent], [(-dw, -db) for dw, db in grads], self.actor_opts[agent])
        return objective

    def policy(self) -> TrainedPolicy:
        return TrainedPolicy(
            actors=[a.copy() for a in self.actors],
            base_plan=self.base_plan,
            delta_bound=self.cfg.delta,
            bounded=self.cfg.bounded_action,
            bounds=self.bounds,
        )

    def train(self, eval_hook: EvalHook | None = None) -> TrainingHistory:
        cfg = self.cfg
        rows: list[HistoryRow] = []
        n = self.X.shape[0]
        batch = min(cfg.batch_size, n)
        for it in range(cfg.iterations):
            idx = self.rng.integers(0, n, size=batch)
            target_actions = self._target_actions(self.XN[idx])
            refine = it >= cfg.critic_warmup
            closs = [self.critic_update(j, idx, target_actions) for j in range(self.n_agents)]
            jobs = [self.actor_update(j, idx, update=refine) for j in range(self.n_agents)]
            for j in range(self.n_agents):
                soft_update(self.critic_targets[j], self.critics[j], cfg.tau)
                if refine:
                    soft_update(self.actor_targets[j], self.actors[j], cfg.tau)
            waiting = None
            if eval_hook is not None and cfg.eval_every > 0 and (it + 1) % cfg.eval_every == 0:
                waiting = evaluate_policies(
                    self.policy(), eval_hook.net, eval_hook.cycles, seed=eval_hook.seed
                )
                self.sim_calls += 1
            rows.append(
                HistoryRow(
                    iteration=it,
                    critic_loss=float(np.mean(closs)),
                    actor_objective=float(np.mean(jobs)),
                    eval_waiting=waiting,
                )
            )
        return TrainingHistory(
            rows=rows,
            value_losses=self._pretrain_value_losses,
            sim_calls=self.sim_calls,
        )


def train_offline(
    dataset: BatchDataset,
    config: MaddpgConfig,
    base_plan: SignalPlan | None = None,
    eval_hook: EvalHook | None = None,
) -> tuple[TrainedPolicy, TrainingHistory]:
    """Train actors from a logged batch alone; returns (policy, history).

    Gradient computation never invokes the simulator. Evaluation rollouts
    happen only through an explicit hook and are counted in the history.
    """
    try:
        trainer = OfflineTrainer(dataset, config, base_plan=base_plan)
        history = trainer.train(eval_hook=eval_hook)
    except NonFiniteGradientError as exc:
        raise TrainingDivergedError(str(exc)) from exc
    return trainer.policy(), history


def evaluate_policies(
    policy: TrainedPolicy,
    net: NetworkSpec,
    cycles: int,
    seed: int | None = None,
    warmup: int = 0,
) -> float:
    """Average waiting per tick when the actors drive the network.

    Each cycle every actor observes only its own intersection, the joint
    plan is decoded and repaired, and one cycle runs. Lower is better; with
    zero-output actors this equals the base plan's fixed-time figure.
    """
    if cycles < 1:
        raise ValueError("cycles must be >= 1")
    sim = Simulator(net, seed=net.seed if seed is None else seed)
    prev_plan = policy.base_plan
    waited = 0
    steps = 0
    for c in range(warmup + cycles):
        feats = [sim.local_features(j, prev_plan) for j in range(net.num_intersections)]
        _, plan = policy.act(feats)
        w, s = sim.run_cycle_waiting(plan)
        if c >= warmup:
            waited += w
            steps += s
        prev_plan = plan
    return waited / steps


def _trace_to_json(trace: CycleTrace) -> dict:
    return {
        "start_clock": trace.start_clock,
        "sampling_len": trace.sampling_len,
        "plan_lengths": [list(r) for r in trace.plan_lengths],
        "features": [f.tolist() for f in trace.features],
        "active_phases": [list(p) for p in trace.active_phases],
        "waiting": list(trace.waiting),
        "waiting_by_intersection": [list(p) for p in trace.waiting_by_intersection],
    }


def _trace_from_json(payload: dict) -> CycleTrace:
    return CycleTrace(
        start_clock=int(payload["start_clock"]),
        sampling_len=int(payload["sampling_len"]),
        plan_lengths=tuple(tuple(int(v) for v in r) for r in payload["plan_lengths"]),
        features=[np.asarray(f, dtype=float) for f in payload["features"]],
        active_phases=[tuple(int(v) for v in p) for p in payload["active_phases"]],
        waiting=[int(w) for w in payload["waiting"]],
        waiting_by_intersection=[tuple(int(v) for v in p) for p in payload["waiting_by_intersection"]],
    )


def save_dataset(dataset: BatchDataset, path: str | Path) -> None:
    """Write the batch as JSONL: one provenance header, then one record per line."""
    with open(path, "w") as fh:
        header = {
            "kind": "tsopt-batch",
            "version": 1,
            "episodes": dataset.episodes,
            "cycles_per_episode": dataset.cycles_per_episode,
            "eta": dataset.eta,
            "seed": dataset.seed,
            "base_plan": dataset.base_plan.to_json_dict(),
            "network_hash": dataset.network_hash,
            "network": dataset.network,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in dataset.records:
            fh.write(
                json.dumps(
                    {
                        "episode": r.episode,
                        "cycle": r.cycle,
                        "obs": [o.tolist() for o in r.obs],
                        "delta": [list(row) for row in r.delta.deltas],
                        "plan": [list(row) for row in r.plan.lengths],
                        "reward": r.reward,
                        "rewards_local": list(r.rewards_local),
                        "next_obs": [o.tolist() for o in r.next_obs],
                        "trace": _trace_to_json(r.trace),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_dataset(path: str | Path) -> BatchDataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "tsopt-batch":
            raise ValueError(f"{path} is not a batch dataset")
        records = []
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            records.append(
                TransitionRecord(
                    obs=[np.asarray(o, dtype=float) for o in raw["obs"]],
                    delta=PlanDelta(tuple(tuple(int(v) for v in row) for row in raw["delta"])),
                    plan=SignalPlan(tuple(tuple(int(v) for v in row) for row in raw["plan"])),
                    reward=float(raw["reward"]),
                    rewards_local=tuple(float(v) for v in raw["rewards_local"]),
                    next_obs=[np.asarray(o, dtype=float) for o in raw["next_obs"]],
                    trace=_trace_from_json(raw["trace"]),
                    episode=int(raw["episode"]),
                    cycle=int(raw["cycle"]),
                )
            )
    return BatchDataset(
        records=records,
        base_plan=SignalPlan.from_json_dict(header["base_plan"]),
        network=header["network"],
        network_hash=header["network_hash"],
        eta=float(header["eta"]),
        seed=int(header["seed"]),
        episodes=int(header["episodes"]),
        cycles_per_episode=int(header["cycles_per_episode"]),
    )
