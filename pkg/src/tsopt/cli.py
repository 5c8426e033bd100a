"""Command line pipeline: es, collect, train, eval, report.

Every stage writes plain files into --out and reads its inputs from files,
so stages can be rerun independently. Outputs are byte-deterministic for a
fixed config and seed: JSON is dumped with sorted keys, every CSV carries a
`# seed=... config_sha256=...` comment naming the run that produced it, and
SVGs are rendered with a fixed hash salt and no timestamps.

Exit codes: 0 success, 1 configuration error (bad flags, unreadable or
invalid config and input files), 2 runtime failure (simulation errors,
diverged training).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

from .es import EsConfig, run_es
from .marl import (
    EvalHook,
    MaddpgConfig,
    TrainedPolicy,
    collect_batch,
    evaluate_policies,
    load_dataset,
    save_dataset,
    train_offline,
)
from .plans import SignalPlan
from .scenarios import load_case
from .sim import evaluate_plan, export_traces_csv

ABLATION_TAGS = {
    "baseline": (False, False, False),
    "bounded": (True, False, False),
    "ba": (False, True, False),
    "src": (False, False, True),
    "ba_src": (False, True, True),
    "full": (True, True, True),
}


class ConfigError(Exception):
    """The run cannot start: flags, config, or input files are unusable."""


_INPUT_ERRORS = (OSError, json.JSONDecodeError, KeyError, ValueError, TypeError)


def _inputs(build):
    # Everything read or parsed before the run starts is configuration;
    # failures there exit 1 rather than 2.
    try:
        return build()
    except ConfigError:
        raise
    except _INPUT_ERRORS as exc:
        raise ConfigError(exc) from exc


def default_config() -> dict:
    # The exploration radius eta and decode bound delta both sit on the 2s
    # grid of the bundled arterial case, so trained actors never move a plan
    # further than the batch ever explored.
    train = dataclasses.asdict(MaddpgConfig())
    train["delta"] = 2
    train["iterations"] = 3000
    return {
        "case": "bundled:arterial5",
        "es": dataclasses.asdict(EsConfig()),
        "collect": {"episodes": 200, "cycles_per_episode": 8, "eta": 2.0, "seed": 0},
        "train": train,
        "eval": {"cycles": 600, "warmup": 0, "seed": None},
    }


def load_config(path: str | None, seed: int | None) -> dict:
    def build():
        cfg = default_config()
        if path is not None:
            user = json.loads(Path(path).read_text())
            if not isinstance(user, dict):
                raise ConfigError("config file must hold a JSON object")
            for key, value in user.items():
                if isinstance(value, dict) and isinstance(cfg.get(key), dict):
                    cfg[key].update(value)
                else:
                    cfg[key] = value
        if seed is not None:
            cfg["es"]["seed"] = seed
            cfg["collect"]["seed"] = seed
            cfg["train"]["seed"] = seed
            cfg["eval"]["seed"] = seed
        return cfg

    return _inputs(build)


def config_sha(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _csv_header(fh, seed, sha: str) -> None:
    fh.write(f"# seed={seed} config_sha256={sha}\n")


def _dump_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "tsopt"
    import matplotlib.pyplot as plt

    return plt


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def cmd_es(args, cfg: dict) -> int:
    case, es_cfg = _inputs(lambda: (load_case(cfg["case"]), EsConfig(**cfg["es"])))
    sha = config_sha(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    initial_fitness = evaluate_plan(
        case.initial_plan, case.net, es_cfg.eval_warmup_cycles, es_cfg.eval_cycles
    )
    result = run_es(case.initial_plan, case.net, es_cfg)
    _dump_json(out / "best_plan.json", result.best_plan.to_json_dict())
    with open(out / "curve.csv", "w") as fh:
        _csv_header(fh, es_cfg.seed, sha)
        fh.write("generation,best_fitness,mean_fitness,cycle_length,queries\n")
        for rec in result.records:
            fh.write(
                f"{rec.generation},{rec.best_fitness!r},{rec.mean_fitness!r},"
                f"{rec.plan.cycle_length()},{rec.queries_used}\n"
            )
    improvement = 100.0 * (result.best_fitness - initial_fitness) / abs(initial_fitness)
    _dump_json(
        out / "summary.json",
        {
            "case": case.name,
            "scheme": es_cfg.scheme,
            "seed": es_cfg.seed,
            "initial_fitness": initial_fitness,
            "best_fitness": result.best_fitness,
            "improvement_pct": improvement,
            "queries": result.records[-1].queries_used,
            "config_sha256": sha,
        },
    )
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    gens = [r.generation for r in result.records]
    ax.plot(gens, [r.best_fitness for r in result.records], label="generation best")
    ax.plot(gens, [r.mean_fitness for r in result.records], label="generation mean")
    ax.axhline(initial_fitness, color="gray", linestyle=":", label="initial plan")
    ax.set_xlabel("generation")
    ax.set_ylabel("fitness (negated waiting per tick)")
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, out / "curve.svg")
    plt.close(fig)
    print(
        f"es: improvement {improvement:.1f}% over initial plan "
        f"({result.records[-1].queries_used} queries), outputs in {out}"
    )
    return 0


def cmd_collect(args, cfg: dict) -> int:
    def build():
        case = load_case(cfg["case"])
        ccfg = cfg["collect"]
        if args.plan is not None:
            plan = SignalPlan.from_json_dict(json.loads(Path(args.plan).read_text()))
        else:
            plan = case.initial_plan
        return (
            case,
            plan,
            int(ccfg["episodes"]),
            int(ccfg["cycles_per_episode"]),
            float(ccfg["eta"]),
            int(ccfg["seed"]),
        )

    case, plan, episodes, cycles, eta, seed = _inputs(build)
    sha = config_sha(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = collect_batch(
        plan,
        case.net,
        episodes=episodes,
        eta=eta,
        seed=seed,
        cycles_per_episode=cycles,
    )
    save_dataset(dataset, out / "batch.jsonl")
    if args.traces:
        first = [r.trace for r in dataset.records if r.episode == 0]
        with open(out / "traces.csv", "w") as fh:
            _csv_header(fh, seed, sha)
            export_traces_csv(
                first, fh, intersection_ids=[j.id for j in case.net.intersections]
            )
    print(f"collect: {len(dataset.records)} cycles into {out / 'batch.jsonl'}")
    return 0


def _train_tags(args, tcfg: MaddpgConfig) -> list[tuple[str, MaddpgConfig]]:
    if args.ablation == "full":
        return [
            (tag, dataclasses.replace(
                tcfg,
                bounded_action=b,
                batch_augmentation=a,
                reward_clipping=s,
            ))
            for tag, (b, a, s) in ABLATION_TAGS.items()
        ]
    flags = (tcfg.bounded_action, tcfg.batch_augmentation, tcfg.reward_clipping)
    for tag, spec in ABLATION_TAGS.items():
        if spec == flags:
            return [(tag, tcfg)]
    return [("custom", tcfg)]


def cmd_train(args, cfg: dict) -> int:
    def build():
        case = load_case(cfg["case"])
        tcfg = MaddpgConfig(**cfg["train"])
        ecfg = cfg["eval"]
        return (
            case,
            tcfg,
            int(ecfg["cycles"]),
            int(ecfg["warmup"]),
            ecfg["seed"],
            load_dataset(args.batch),
        )

    case, tcfg, eval_cycles, warmup, eval_seed, dataset = _inputs(build)
    sha = config_sha(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if dataset.network_hash != case.net.spec_hash():
        print(
            "warning: batch was collected on a different network than the "
            "configured case; results may not be comparable",
            file=sys.stderr,
        )
    hook = None
    if tcfg.eval_every > 0:
        hook = EvalHook(case.net, eval_cycles, eval_seed)
    results = {}
    for tag, run_cfg in _train_tags(args, tcfg):
        policy, history = train_offline(dataset, run_cfg, eval_hook=hook)
        with open(out / f"history_{tag}.csv", "w") as fh:
            _csv_header(fh, run_cfg.seed, sha)
            fh.write("iteration,critic_loss,actor_objective,eval_waiting_time\n")
            for row in history.rows:
                ev = "" if row.eval_waiting is None else repr(row.eval_waiting)
                fh.write(f"{row.iteration},{row.critic_loss!r},{row.actor_objective!r},{ev}\n")
        policy.save(out / f"policy_{tag}.json")
        waiting = evaluate_policies(
            policy,
            case.net,
            eval_cycles,
            seed=eval_seed,
            warmup=warmup,
        )
        results[tag] = {"avg_waiting": waiting, "sim_calls_during_training": history.sim_calls}
        print(f"train[{tag}]: avg waiting per tick {waiting:.3f}")
    base_waiting = -evaluate_plan(
        dataset.base_plan,
        case.net,
        warmup_cycles=warmup,
        measured_cycles=eval_cycles,
        seed=eval_seed,
    )
    _dump_json(
        out / "train_summary.json",
        {
            "case": case.name,
            "seed": tcfg.seed,
            "base_plan_waiting": base_waiting,
            "policies": results,
            "config_sha256": sha,
        },
    )
    return 0


def cmd_eval(args, cfg: dict) -> int:
    def build():
        case = load_case(cfg["case"])
        ecfg = cfg["eval"]
        plans = [
            (Path(p).stem, SignalPlan.from_json_dict(json.loads(Path(p).read_text())))
            for p in args.plan or []
        ]
        policies = [(Path(p).stem, TrainedPolicy.load(p)) for p in args.policy or []]
        return case, int(ecfg["cycles"]), int(ecfg["warmup"]), ecfg["seed"], plans, policies

    case, cycles, warmup, seed, plans, policies = _inputs(build)
    sha = config_sha(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[tuple[str, str, float]] = []
    rows.append(
        (
            "plan",
            "initial",
            -evaluate_plan(case.initial_plan, case.net, warmup, cycles, seed=seed),
        )
    )
    for name, plan in plans:
        rows.append(
            ("plan", name, -evaluate_plan(plan, case.net, warmup, cycles, seed=seed))
        )
    for name, policy in policies:
        rows.append(
            (
                "policy",
                name,
                evaluate_policies(policy, case.net, cycles, seed=seed, warmup=warmup),
            )
        )
    with open(out / "eval.csv", "w") as fh:
        _csv_header(fh, seed, sha)
        fh.write("kind,name,avg_waiting,cycles,warmup\n")
        for kind, name, waiting in rows:
            fh.write(f"{kind},{name},{waiting!r},{cycles},{warmup}\n")
    for kind, name, waiting in rows:
        print(f"eval[{kind}:{name}]: avg waiting per tick {waiting:.3f}")
    return 0


def cmd_report(args, cfg: dict) -> int:
    out = Path(args.out)
    sha = config_sha(cfg)

    def build():
        es = json.loads((out / "summary.json").read_text())
        train = None
        if (out / "train_summary.json").exists():
            train = json.loads((out / "train_summary.json").read_text())
        return es, train

    es_summary, train_summary = _inputs(build)
    initial_waiting = -es_summary["initial_fitness"]
    es_waiting = -es_summary["best_fitness"]
    lines = [
        ("initial_waiting", initial_waiting),
        ("es_waiting", es_waiting),
        ("es_improvement_pct", es_summary["improvement_pct"]),
    ]
    bars = {"initial": initial_waiting, "es": es_waiting}
    if train_summary is not None:
        base = train_summary["base_plan_waiting"]
        lines.append(("marl_base_plan_waiting", base))
        for tag, info in sorted(train_summary["policies"].items()):
            w = info["avg_waiting"]
            lines.append((f"marl_{tag}_waiting", w))
            lines.append((f"marl_{tag}_vs_es_pct", 100.0 * (base - w) / base))
            bars[tag] = w
    with open(out / "report.csv", "w") as fh:
        _csv_header(fh, cfg["es"]["seed"], sha)
        fh.write("metric,value\n")
        for name, value in lines:
            fh.write(f"{name},{value!r}\n")
    plt = _figure()
    fig, ax = plt.subplots(figsize=(7, 4))
    names = list(bars)
    ax.bar(range(len(names)), [bars[n] for n in names], color="#4878a8")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("avg waiting per tick (s)")
    fig.tight_layout()
    _save_svg(fig, out / "report.svg")
    plt.close(fig)
    for name, value in lines:
        print(f"report: {name} = {value}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # A bad invocation is a configuration error, same exit code as a
        # bad config file.
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="tsopt",
        description="Two-stage traffic signal optimization: evolution "
        "strategies for a fixed-time plan, then offline multi-agent "
        "actor-critic refinement around it.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file; missing keys use defaults")
        p.add_argument("--seed", type=int, help="override every stage seed")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")

    p_es = sub.add_parser("es", help="optimize a fixed-time plan with evolution strategies")
    common(p_es)
    p_es.add_argument("--scheme", choices=("least_phases", "conditioned_variance"))

    p_collect = sub.add_parser("collect", help="log cycles around a plan into a batch file")
    common(p_collect)
    p_collect.add_argument("--plan", help="plan JSON to explore around (default: case initial)")
    p_collect.add_argument("--traces", action="store_true", help="also write traces.csv")

    p_train = sub.add_parser("train", help="train actor-critic agents offline from a batch")
    common(p_train)
    p_train.add_argument("--batch", required=True, help="batch.jsonl from the collect stage")
    p_train.add_argument(
        "--ablation",
        choices=("off", "full"),
        default="off",
        help="off: train the configured variant; full: all six ablation tags",
    )

    p_eval = sub.add_parser("eval", help="measure plans and trained policies")
    common(p_eval)
    p_eval.add_argument("--plan", action="append", help="plan JSON file (repeatable)")
    p_eval.add_argument("--policy", action="append", help="policy JSON file (repeatable)")

    p_report = sub.add_parser("report", help="summarize a run directory into report.csv/.svg")
    common(p_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        if getattr(args, "scheme", None):
            cfg["es"]["scheme"] = args.scheme
        handler = {
            "es": cmd_es,
            "collect": cmd_collect,
            "train": cmd_train,
            "eval": cmd_eval,
            "report": cmd_report,
        }[args.command]
        return handler(args, cfg)
    except ConfigError as exc:
        print(f"tsopt {args.command}: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # surface a one-line error, not a stack trace
        print(f"tsopt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
