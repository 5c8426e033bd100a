"""End-to-end pipeline stages through the command line entry point.

Everything runs in-process against the tiny bundled case so the whole file
stays fast; exit codes and artifact layouts are the contract under test.
"""
import json
from pathlib import Path

import pytest

from tsopt import cli
from tsopt.marl import TrainedPolicy, TrainingDivergedError, load_dataset
from tsopt.plans import SignalPlan, validate_plan
from tsopt.scenarios import two_phase_micro


def run(argv) -> int:
    try:
        return cli.main(argv)
    except SystemExit as exc:  # argparse-level failures
        return exc.code


def write_config(tmp_path: Path, **sections) -> str:
    cfg = {
        "case": "bundled:micro2",
        "es": {
            "generations": 3,
            "pairs_per_generation": 2,
            "sigma": 1.0,
            "seed": 0,
            "eval_warmup_cycles": 1,
            "eval_cycles": 2,
        },
        "collect": {"episodes": 5, "cycles_per_episode": 4, "eta": 1.0, "seed": 0},
        "train": {
            "delta": 1,
            "iterations": 2,
            "value_iterations": 5,
            "actor_init_iterations": 0,
            "critic_warmup": 1,
            "hidden": [4],
            "batch_size": 8,
            "seed": 0,
        },
        "eval": {"cycles": 3, "warmup": 0, "seed": 0},
    }
    for key, value in sections.items():
        if isinstance(value, dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def read_csv_rows(path: Path) -> list[str]:
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# seed=")
    assert "config_sha256=" in lines[0]
    return lines[1:]


# ---------------------------------------------------------------------------
# es


def test_es_writes_artifacts(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run(["es", "--config", cfg, "--out", str(out)]) == 0
    for name in ("best_plan.json", "curve.csv", "summary.json", "curve.svg"):
        assert (out / name).exists()
    rows = read_csv_rows(out / "curve.csv")
    assert rows[0] == "generation,best_fitness,mean_fitness,cycle_length,queries"
    assert len(rows) == 1 + 3
    summary = json.loads((out / "summary.json").read_text())
    assert summary["case"] == "micro2"
    assert summary["queries"] == 2 * 2 * 3
    assert summary["best_fitness"] >= summary["initial_fitness"]
    plan = SignalPlan.from_json_dict(json.loads((out / "best_plan.json").read_text()))
    case = two_phase_micro()
    assert validate_plan(plan, case.net.intersections, 1, default_max=4).ok


def test_es_runs_are_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run(["es", "--config", cfg, "--out", str(out1)]) == 0
    assert run(["es", "--config", cfg, "--out", str(out2)]) == 0
    for name in ("curve.csv", "summary.json", "best_plan.json", "curve.svg"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_es_seed_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run(["es", "--config", cfg, "--seed", "7", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 7
    assert read_csv_rows(out / "curve.csv")  # header still well formed


def test_es_scheme_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    code = run(
        ["es", "--config", cfg, "--scheme", "conditioned_variance", "--out", str(out)]
    )
    assert code == 0
    assert json.loads((out / "summary.json").read_text())["scheme"] == "conditioned_variance"


# ---------------------------------------------------------------------------
# configuration failures


def test_missing_config_file_exits_one(tmp_path):
    assert run(["es", "--config", str(tmp_path / "absent.json"),
                "--out", str(tmp_path / "o")]) == 1


def test_malformed_config_exits_one(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["es", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_unknown_bundled_case_exits_one(tmp_path):
    cfg = write_config(tmp_path, case="bundled:nowhere")
    assert run(["es", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_invalid_es_field_exits_one(tmp_path):
    cfg = write_config(tmp_path, es={"sigma": -1.0})
    assert run(["es", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_unknown_flag_exits_one(tmp_path):
    assert run(["es", "--bogus"]) == 1


def test_missing_subcommand_exits_one():
    assert run([]) == 1


def test_train_requires_batch_flag(tmp_path):
    cfg = write_config(tmp_path)
    assert run(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


# ---------------------------------------------------------------------------
# collect


def test_collect_writes_batch_and_traces(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run(["collect", "--config", cfg, "--traces", "--out", str(out)]) == 0
    ds = load_dataset(out / "batch.jsonl")
    assert len(ds) == 5 * 4
    assert ds.episodes == 5 and ds.cycles_per_episode == 4
    rows = read_csv_rows(out / "traces.csv")
    assert rows[0] == "cycle,step,intersection,active_phase,queued,waiting"
    # Episode 0 only: 4 cycles of a 4 s cycle on a 1 s grid.
    assert len(rows) == 1 + 4 * 4


def test_collect_eta_zero_replays_base(tmp_path):
    cfg = write_config(tmp_path, collect={"eta": 0.0})
    out = tmp_path / "run"
    assert run(["collect", "--config", cfg, "--out", str(out)]) == 0
    ds = load_dataset(out / "batch.jsonl")
    assert {r.plan for r in ds.records} == {ds.base_plan}


def test_collect_around_explicit_plan(tmp_path):
    plan_file = tmp_path / "plan.json"
    plan_file.write_text(json.dumps(SignalPlan(((3, 1),)).to_json_dict()))
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run(["collect", "--config", cfg, "--plan", str(plan_file),
                "--out", str(out)]) == 0
    ds = load_dataset(out / "batch.jsonl")
    assert ds.base_plan == SignalPlan(((3, 1),))


# ---------------------------------------------------------------------------
# train


def collected(tmp_path) -> tuple[str, Path]:
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run(["collect", "--config", cfg, "--out", str(out)]) == 0
    return cfg, out


def test_train_writes_history_policy_summary(tmp_path):
    cfg, out = collected(tmp_path)
    assert run(["train", "--config", cfg, "--batch", str(out / "batch.jsonl"),
                "--out", str(out)]) == 0
    rows = read_csv_rows(out / "history_full.csv")
    assert rows[0] == "iteration,critic_loss,actor_objective,eval_waiting_time"
    assert len(rows) == 1 + 2
    policy = TrainedPolicy.load(out / "policy_full.json")
    assert policy.delta_bound == 1
    summary = json.loads((out / "train_summary.json").read_text())
    assert summary["base_plan_waiting"] > 0
    assert set(summary["policies"]) == {"full"}
    info = summary["policies"]["full"]
    assert info["sim_calls_during_training"] == 0
    assert info["avg_waiting"] > 0


def test_train_ablation_grid_writes_all_tags(tmp_path):
    cfg, out = collected(tmp_path)
    assert run(["train", "--config", cfg, "--batch", str(out / "batch.jsonl"),
                "--ablation", "full", "--out", str(out)]) == 0
    summary = json.loads((out / "train_summary.json").read_text())
    assert set(summary["policies"]) == set(cli.ABLATION_TAGS)
    for tag in cli.ABLATION_TAGS:
        assert (out / f"history_{tag}.csv").exists()
        assert (out / f"policy_{tag}.json").exists()


def test_train_reruns_are_byte_identical(tmp_path):
    cfg, out = collected(tmp_path)
    out1, out2 = tmp_path / "t1", tmp_path / "t2"
    for dest in (out1, out2):
        assert run(["train", "--config", cfg, "--batch", str(out / "batch.jsonl"),
                    "--out", str(dest)]) == 0
    assert (out1 / "history_full.csv").read_bytes() == (out2 / "history_full.csv").read_bytes()
    assert (out1 / "train_summary.json").read_bytes() == (out2 / "train_summary.json").read_bytes()


def test_train_warns_on_network_mismatch(tmp_path, capsys):
    cfg, out = collected(tmp_path)
    other = write_config(tmp_path, case="bundled:arterial5")
    Path(other).rename(tmp_path / "other.json")
    code = run(["train", "--config", str(tmp_path / "other.json"),
                "--batch", str(out / "batch.jsonl"), "--out", str(tmp_path / "t")])
    err = capsys.readouterr().err
    assert "different network" in err
    # The micro batch cannot drive the arterial case; the run fails (2).
    assert code == 2


def test_train_divergence_exits_two(tmp_path, monkeypatch):
    cfg, out = collected(tmp_path)

    def boom(*args, **kwargs):
        raise TrainingDivergedError("critic 0 loss is not finite")

    monkeypatch.setattr(cli, "train_offline", boom)
    assert run(["train", "--config", cfg, "--batch", str(out / "batch.jsonl"),
                "--out", str(tmp_path / "t")]) == 2


# ---------------------------------------------------------------------------
# eval


def test_eval_rows_and_order(tmp_path):
    cfg, out = collected(tmp_path)
    assert run(["train", "--config", cfg, "--batch", str(out / "batch.jsonl"),
                "--out", str(out)]) == 0
    plan_file = tmp_path / "alt.json"
    plan_file.write_text(json.dumps(SignalPlan(((3, 1),)).to_json_dict()))
    assert run(["eval", "--config", cfg, "--plan", str(plan_file),
                "--policy", str(out / "policy_full.json"), "--out", str(out)]) == 0
    rows = read_csv_rows(out / "eval.csv")
    assert rows[0] == "kind,name,avg_waiting,cycles,warmup"
    body = [r.split(",") for r in rows[1:]]
    assert body[0][:2] == ["plan", "initial"]
    assert ["plan", "alt"] in [b[:2] for b in body]
    assert ["policy", "policy_full"] in [b[:2] for b in body]
    for b in body:
        assert float(b[2]) >= 0.0
        assert b[3] == "3" and b[4] == "0"


def test_eval_runtime_failure_exits_two(tmp_path):
    cfg = write_config(tmp_path)
    bad = tmp_path / "bad_plan.json"
    bad.write_text(json.dumps(SignalPlan(((2, 2), (3, 3))).to_json_dict()))
    assert run(["eval", "--config", cfg, "--plan", str(bad),
                "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------------------
# report


def test_report_from_es_only(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run(["es", "--config", cfg, "--out", str(out)]) == 0
    assert run(["report", "--config", cfg, "--out", str(out)]) == 0
    rows = read_csv_rows(out / "report.csv")
    assert rows[0] == "metric,value"
    metrics = {r.split(",")[0]: float(r.split(",")[1]) for r in rows[1:]}
    assert set(metrics) == {"initial_waiting", "es_waiting", "es_improvement_pct"}
    summary = json.loads((out / "summary.json").read_text())
    assert metrics["es_improvement_pct"] == pytest.approx(summary["improvement_pct"])
    assert (out / "report.svg").exists()


def test_report_includes_training_results(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert run(["es", "--config", cfg, "--out", str(out)]) == 0
    assert run(["collect", "--config", cfg, "--out", str(out)]) == 0
    assert run(["train", "--config", cfg, "--batch", str(out / "batch.jsonl"),
                "--out", str(out)]) == 0
    assert run(["report", "--config", cfg, "--out", str(out)]) == 0
    rows = read_csv_rows(out / "report.csv")
    metrics = {r.split(",")[0]: float(r.split(",")[1]) for r in rows[1:]}
    assert "marl_base_plan_waiting" in metrics
    assert "marl_full_waiting" in metrics
    train = json.loads((out / "train_summary.json").read_text())
    base = train["base_plan_waiting"]
    w = train["policies"]["full"]["avg_waiting"]
    assert metrics["marl_full_vs_es_pct"] == pytest.approx(100.0 * (base - w) / base)


def test_report_without_summary_exits_one(tmp_path):
    cfg = write_config(tmp_path)
    assert run(["report", "--config", cfg, "--out", str(tmp_path / "empty")]) == 1
