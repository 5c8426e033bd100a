"""Run the whole pipeline into one directory.

Chains the five stages with a shared config, seed, and output directory:
es finds a fixed-time plan, collect logs exploration cycles around it,
train fits the agents offline, eval scores plan and policies side by side,
and report condenses everything into report.csv / report.svg.

Any stage failure stops the chain and its exit code becomes ours.
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from tsopt.cli import main as tsopt_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON config file shared by every stage")
    parser.add_argument("--seed", type=int, help="override every stage seed")
    parser.add_argument("--out", default="runs/pipeline", help="output directory")
    parser.add_argument(
        "--ablation",
        choices=("off", "full"),
        default="off",
        help="train every flag combination instead of the configured one",
    )
    args = parser.parse_args()

    common = ["--out", args.out]
    if args.config:
        common += ["--config", args.config]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]
    out = Path(args.out)

    def eval_stage():
        stage = ["eval", "--plan", str(out / "best_plan.json")]
        for policy in sorted(out.glob("policy_*.json")):
            stage += ["--policy", str(policy)]
        return stage

    stages = [
        lambda: ["es"],
        lambda: ["collect", "--plan", str(out / "best_plan.json"), "--traces"],
        lambda: ["train", "--batch", str(out / "batch.jsonl"),
                 "--ablation", args.ablation],
        eval_stage,
        lambda: ["report"],
    ]
    for build in stages:
        stage = build()
        code = tsopt_main(stage + common)
        if code != 0:
            print(f"pipeline: stage {stage[0]!r} failed with exit code {code}",
                  file=sys.stderr)
            return code
    print(f"pipeline: all stages finished, outputs in {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
