"""Run configuration: an INI file with one section per module plus ``section.key=value`` overrides.

Run ``python -m duet.config`` to print the key reference as markdown.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from .verbalizer import DEFAULT_TEMPLATE, validate_template


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str
    doc: str


SCHEMA: dict[str, dict[str, Key]] = {
    "paths": {
        "corpus": Key(str, "cases.jsonl", "raw cases JSONL (written by synth-data, read by ingest)"),
        "catalog": Key(str, "catalog.jsonl", "label catalog JSONL"),
        "work_dir": Key(str, "work", "directory for every derived artifact; relative paths below resolve against it"),
        "vocab": Key(str, "vocab.json", "vocabulary file"),
        "init_checkpoint": Key(str, "init.duet", "freshly initialised encoder (created by build-vocab)"),
        "embeddings": Key(str, "embeddings.bin", "pretraining-corpus embeddings used for LCC mining"),
        "lcc_pools": Key(str, "lcc_pools.jsonl", "mined LCC pools"),
        "ldm_pools": Key(str, "ldm_pools.jsonl", "mined LDM pools"),
        "run_dir": Key(str, "run", "pretraining run directory (epoch-{n}.duet, loss.csv)"),
        "finetuned_checkpoint": Key(str, "finetuned.duet", "fine-tuned encoder plus task heads"),
        "predictions": Key(str, "predictions.jsonl", "per-case predictions on the test split"),
        "reports_dir": Key(str, "reports", "evaluation outputs"),
        "export": Key(str, "export/embeddings.bin", "export-embeddings target (sidecar gets .labels.csv)"),
    },
    "data": {
        "min_tokens": Key(int, "10", "drop facts with fewer tokens"),
        "min_label_count": Key(int, "100", "drop cases whose article or charge has fewer instances"),
        "test_fraction": Key(float, "0.2", "share of filtered cases held out for evaluation"),
        "finetune_fraction": Key(float, "0.5", "share of the remaining cases used for fine-tuning; the rest only pretrain"),
        "max_vocab": Key(int, "5000", "vocabulary size including special tokens"),
        "max_seq_len": Key(int, "512", "maximum tokens per sequence including the start marker"),
    },
    "encoder": {
        "embed_dim": Key(int, "64", "token embedding width"),
        "proj_dim": Key(int, "256", "width of fact and decision representations"),
        "share_heads": Key(_bool, "true", "decision projection reuses the fact projection"),
    },
    "objective": {
        "temperature": Key(float, "0.05", "softmax temperature for both contrastive losses"),
    },
    "miner": {
        "pool_size": Key(int, "15", "hard negatives per LCC pool"),
        "sweep_depth": Key(int, "100", "retrieved candidates searched before backfilling"),
        "label_negatives": Key(int, "3", "wrong articles and charges proposed per case"),
        "classifier_epochs": Key(int, "10", "miner classifier training epochs"),
        "classifier_learning_rate": Key(float, "5e-6", "miner classifier learning rate"),
        "classifier_batch_size": Key(int, "64", "miner classifier batch size"),
    },
    "pretrain": {
        "epochs": Key(int, "5", "pretraining epochs"),
        "learning_rate": Key(float, "1e-5", "AdamW learning rate"),
        "batch_size": Key(int, "32", "instances per batch (>= 2)"),
        "weight_decay": Key(float, "0.01", "decoupled weight decay"),
        "grad_clip_norm": Key(float, "1.0", "global gradient-norm clip"),
        "lcc_drop_same_label": Key(_bool, "true", "exclude in-batch facts sharing both labels with the anchor"),
    },
    "finetune": {
        "epochs": Key(int, "10", "fine-tuning epochs"),
        "learning_rate": Key(float, "5e-6", "AdamW learning rate"),
        "batch_size": Key(int, "64", "batch size"),
        "tasks": Key(_str_list, "articles,charges,term", "comma-separated subset of articles, charges, term"),
        "weight_decay": Key(float, "0.01", "decoupled weight decay"),
        "grad_clip_norm": Key(float, "1.0", "global gradient-norm clip"),
        "freeze_encoder": Key(_bool, "false", "train only the task heads"),
        "init": Key(str, "pretrained", "start from 'pretrained' (last pretraining epoch) or 'scratch' (init checkpoint)"),
    },
    "eval": {
        "averaging": Key(str, "present", "macro average over classes 'present' in gold or 'all' classes"),
        "entropy_task": Key(str, "charges", "task analysed by the entropy command"),
        "entropy_bins": Key(int, "50", "histogram bins over [0, max]"),
        "dbi_charges": Key(_int_list, "", "charge ids for DBI; empty means every catalog charge"),
        "dbi_checkpoint": Key(str, "", "checkpoint whose embeddings the dbi command scores; empty means finetuned"),
        "dbi_baseline_checkpoint": Key(str, "", "optional checkpoint to compare against (reductions reported)"),
        "export_checkpoint": Key(str, "", "checkpoint for export-embeddings; empty means finetuned"),
        "export_split": Key(str, "test", "split exported: pretrain, finetune or test"),
    },
    "verbalizer": {
        "decision_template": Key(str, DEFAULT_TEMPLATE,
                                 "placeholders {article_name} {article_content} {charge_definition} {charge_name}"),
    },
    "synth": {
        "per_charge": Key(int, "200", "synthetic cases per charge cluster"),
        "sibling_rate": Key(float, "0.015", "per-token rate of the confusable sibling's signature words"),
        "signature_rate": Key(float, "0.07", "per-token rate of the charge's own signature words"),
    },
    "run": {
        "seed": Key(int, "0", "global seed"),
        "workers": Key(int, "1", "parallel workers for per-anchor LCC mining (output is identical for any value)"),
    },
}


class RunConfig:
    """Parsed configuration; ``cfg["pretrain"]["epochs"]`` style access plus path helpers."""

    def __init__(self, values: dict[str, dict[str, Any]], base_dir: Path):
        self.values = values
        self.base_dir = base_dir

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def work_dir(self) -> Path:
        p = Path(self.values["paths"]["work_dir"])
        return p if p.is_absolute() else self.base_dir / p

    def path(self, key: str) -> Path:
        raw = Path(self.values["paths"][key])
        if raw.is_absolute():
            return raw
        if key in ("corpus", "catalog", "work_dir"):
            return self.base_dir / raw
        return self.work_dir / raw

    def resolve(self, raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p


def _apply(values: dict[str, dict[str, Any]], section: str, key: str, raw: str, origin: str) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{origin}: unknown key {section}.{key}")
    try:
        values[section][key] = SCHEMA[section][key].parse(raw)
    except ValueError as exc:
        raise ConfigError(f"{origin}: bad value for {section}.{key}: {exc}") from exc


def _validate(values: dict[str, dict[str, Any]]) -> None:
    if values["finetune"]["init"] not in ("pretrained", "scratch"):
        raise ConfigError("finetune.init must be 'pretrained' or 'scratch'")
    if values["eval"]["averaging"] not in ("present", "all"):
        raise ConfigError("eval.averaging must be 'present' or 'all'")
    if values["eval"]["export_split"] not in ("pretrain", "finetune", "test"):
        raise ConfigError("eval.export_split must be pretrain, finetune or test")
    tasks = values["finetune"]["tasks"]
    if not tasks or set(tasks) - {"articles", "charges", "term"}:
        raise ConfigError("finetune.tasks must be a non-empty subset of articles, charges, term")
    if values["pretrain"]["batch_size"] < 2:
        raise ConfigError("pretrain.batch_size must be >= 2")
    try:
        validate_template(values["verbalizer"]["decision_template"])
    except ValueError as exc:
        raise ConfigError(f"verbalizer.decision_template: {exc}") from exc


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> RunConfig:
    values = {s: {k: entry.parse(entry.default) for k, entry in keys.items()} for s, keys in SCHEMA.items()}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str  # keep key case
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(values, section, key, raw, str(path))
        base = path.resolve().parent
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        _apply(values, section, key, raw, "override")
    _validate(values)
    return RunConfig(values, base)


def reference_markdown() -> str:
    lines = ["# Configuration keys", "",
             "INI file, one section per module. Override any key on the command line with `section.key=value`.",
             "Relative `paths.*` entries other than corpus, catalog and work_dir resolve inside `paths.work_dir`.", ""]
    for section, keys in SCHEMA.items():
        lines += [f"## [{section}]", "", "| key | default | meaning |", "|---|---|---|"]
        for key, entry in keys.items():
            default = entry.default.replace("|", "\\|") or "(empty)"
            lines.append(f"| `{key}` | `{default}` | {entry.doc} |")
        lines.append("")
    return "\n".join(lines)


if __name__ == "__main__":
    print(reference_markdown())
