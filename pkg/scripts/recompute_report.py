"""Recompute a run directory's report figures from the raw artifacts.

Reads curve.csv, summary.json, and (if present) train_summary.json, rebuilds
every derived number from scratch, and compares against report.csv. Exit 0
when everything matches within 1e-9, 1 otherwise. Use it to confirm a report
was produced from the artifacts sitting next to it.
"""
import argparse
import csv
import json
import sys
from pathlib import Path

TOL = 1e-9


def load_report(path: Path) -> dict[str, float]:
    with open(path) as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    assert rows[0] == ["metric", "value"], f"unexpected header {rows[0]!r}"
    return {name: float(value) for name, value in rows[1:]}


def load_curve_best(path: Path) -> float:
    with open(path) as fh:
        rows = [r for r in csv.DictReader(
            line for line in fh if not line.startswith("#")
        )]
    return max(float(r["best_fitness"]) for r in rows)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", help="run directory holding report.csv")
    args = parser.parse_args()
    out = Path(args.out)

    report = load_report(out / "report.csv")
    summary = json.loads((out / "summary.json").read_text())

    expected: dict[str, float] = {}
    initial = summary["initial_fitness"]
    best = summary["best_fitness"]
    expected["initial_waiting"] = -initial
    expected["es_waiting"] = -best
    expected["es_improvement_pct"] = 100.0 * (best - initial) / abs(initial)

    curve_best = load_curve_best(out / "curve.csv")
    failures = []
    if abs(curve_best - best) > TOL:
        failures.append(
            f"summary best_fitness {best!r} != curve.csv best {curve_best!r}"
        )

    train_path = out / "train_summary.json"
    if train_path.exists():
        train = json.loads(train_path.read_text())
        base = train["base_plan_waiting"]
        expected["marl_base_plan_waiting"] = base
        for tag, info in train["policies"].items():
            w = info["avg_waiting"]
            expected[f"marl_{tag}_waiting"] = w
            expected[f"marl_{tag}_vs_es_pct"] = 100.0 * (base - w) / base

    if set(report) != set(expected):
        missing = set(expected) - set(report)
        extra = set(report) - set(expected)
        failures.append(f"metric mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name in sorted(set(report) & set(expected)):
        if abs(report[name] - expected[name]) > TOL:
            failures.append(
                f"{name}: report has {report[name]!r}, recomputed {expected[name]!r}"
            )

    if failures:
        for line in failures:
            print(f"recompute_report: MISMATCH {line}", file=sys.stderr)
        return 1
    print(f"recompute_report: {len(expected)} metrics match {out / 'report.csv'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
