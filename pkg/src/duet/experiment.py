"""Two-arm comparison driven through the CLI: fine-tune only vs. pretrain then fine-tune.

Both arms share the ingest, vocabulary, initial encoder and fine-tuning
settings; the second arm starts fine-tuning from the last pretraining epoch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .cli import run
from .config import load_config

PIPELINE = ("ingest", "build-vocab", "embed", "mine-lcc", "mine-ldm", "pretrain")
REPORTS = ("finetune", "predict", "eval", "entropy")
BASELINE = ("finetune.init=scratch", "paths.finetuned_checkpoint=baseline.duet",
            "paths.predictions=baseline_predictions.jsonl", "paths.reports_dir=reports_baseline")


class StageFailed(RuntimeError):
    pass


@dataclass
class ArmResult:
    charge_f1: float
    charge_ce: float
    dbi: dict[int, float]


@dataclass
class Comparison:
    baseline: ArmResult
    pretrained: ArmResult

    @property
    def dbi_reduction(self) -> dict[int, float]:
        return {c: self.baseline.dbi[c] - self.pretrained.dbi[c] for c in self.baseline.dbi}

    def to_json(self) -> dict:
        return {"baseline": vars(self.baseline), "pretrained": vars(self.pretrained),
                "dbi_reduction": self.dbi_reduction}


def _run(command: str, config: Path, overrides: Sequence[str]) -> None:
    code = run(command, config, overrides)
    if code != 0:
        raise StageFailed(f"`duet {command}` exited with {code}")


def _arm(reports: Path) -> tuple[float, float]:
    tasks = {t["task"]: t for t in json.loads((reports / "eval.json").read_text())["tasks"]}
    ce = json.loads((reports / "entropy_summary.json").read_text())
    if ce["task"] != "charges":
        raise ValueError("comparison expects eval.entropy_task=charges")
    return tasks["charges"]["f1"], ce["mean"]


def compare(config: str | Path, overrides: Sequence[str] = (), synthesize: bool = True) -> Comparison:
    """Run the full pipeline for both arms and collect charge F1, charge cross-entropy and per-charge DBI."""
    config = Path(config)
    overrides = list(overrides)
    stages = (("synth-data",) if synthesize else ()) + PIPELINE
    for command in stages:
        _run(command, config, overrides)
    for command in REPORTS:
        _run(command, config, overrides + list(BASELINE))
        _run(command, config, overrides)
    cfg = load_config(config, overrides)
    baseline_ckpt = cfg.work_dir / "baseline.duet"
    _run("dbi", config, overrides + [f"eval.dbi_baseline_checkpoint={baseline_ckpt}"])
    dbi_doc = json.loads((cfg.path("reports_dir") / "dbi.json").read_text())
    base_dbi = {row["charge_id"]: row["baseline_dbi"] for row in dbi_doc["comparison"]}
    pre_dbi = {row["charge_id"]: row["dbi"] for row in dbi_doc["comparison"]}
    base_f1, base_ce = _arm(cfg.work_dir / "reports_baseline")
    pre_f1, pre_ce = _arm(cfg.path("reports_dir"))
    return Comparison(ArmResult(base_f1, base_ce, base_dbi), ArmResult(pre_f1, pre_ce, pre_dbi))


if __name__ == "__main__":
    import argparse

    ap = argparse.ArgumentParser(description="fine-tune-only vs. pretrained comparison")
    ap.add_argument("config")
    ap.add_argument("overrides", nargs="*")
    args = ap.parse_args()
    print(json.dumps(compare(args.config, args.overrides).to_json(), indent=2))
