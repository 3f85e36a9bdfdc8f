"""Command-line pipeline: ``duet [options] COMMAND [section.key=value ...]``.

Exit status is 0 on success, 1 when inputs or configuration are invalid and 2
when a stage fails at runtime. Every output file is written atomically, and
timestamps only ever go to the log file, so reruns with the same config and
seed reproduce outputs byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

from . import corpus, miner, trainer
from .classify import FinetuneConfig, TASKS, case_label, heads_from_tensors, heads_to_tensors, init_heads, \
    predict_batch, task_label_ids
from .config import ConfigError, RunConfig, load_config
from .corpus import CorpusError, LabelCatalog, LegalCase, Vocabulary
from .encoder import CheckpointError, EncoderConfig, EncoderModel, init_params, read_checkpoint, save_checkpoint
from .evaluation import EvaluationError, dbi, dbi_json, export_embeddings, labels_path_for, macro_metrics, \
    prediction_entropy
from .io import FormatError, atomic_write_text
from .synth import SynthConfig, generate
from .verbalizer import UnknownLabelError

logger = logging.getLogger("duet")

SPLITS = ("pretrain", "finetune", "test")
VALIDATION_ERRORS = (ConfigError, CorpusError, FormatError, CheckpointError, UnknownLabelError, EvaluationError,
                     FileNotFoundError, json.JSONDecodeError)


class UsageError(ValueError):
    pass


# -- shared helpers ------------------------------------------------------------------


def split_path(cfg: RunConfig, name: str) -> Path:
    return cfg.work_dir / f"{name}.jsonl"


def catalog_path(cfg: RunConfig) -> Path:
    return cfg.work_dir / "catalog.jsonl"


def final_pretrain_checkpoint(cfg: RunConfig) -> Path:
    return cfg.path("run_dir") / f"epoch-{cfg['pretrain']['epochs']}.duet"


def _load_split(cfg: RunConfig, name: str) -> list[LegalCase]:
    cases, bad = corpus.read_cases(split_path(cfg, name))
    if bad:
        raise CorpusError(f"{split_path(cfg, name)}: malformed lines {bad[:5]}")
    return cases


def _load_catalog(cfg: RunConfig) -> LabelCatalog:
    catalog, bad = corpus.read_catalog(catalog_path(cfg))
    if bad:
        raise CorpusError(f"{catalog_path(cfg)}: malformed lines {bad[:5]}")
    return catalog


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _finetune_config(cfg: RunConfig, seed: int | None = None, **changes) -> FinetuneConfig:
    ft = cfg["finetune"]
    base = FinetuneConfig(
        epochs=ft["epochs"], learning_rate=ft["learning_rate"], batch_size=ft["batch_size"], tasks=tuple(ft["tasks"]),
        seed=cfg.seed if seed is None else seed, weight_decay=ft["weight_decay"], grad_clip_norm=ft["grad_clip_norm"],
        freeze_encoder=ft["freeze_encoder"],
    )
    return replace(base, **changes)


def _eval_checkpoint(cfg: RunConfig, key: str) -> Path:
    raw = cfg["eval"][key]
    return cfg.resolve(raw) if raw else cfg.path("finetuned_checkpoint")


def _load_finetuned(path: Path) -> tuple[EncoderModel, dict]:
    model, tensors, meta = read_checkpoint(path)
    heads = heads_from_tensors(tensors, meta)
    if not heads:
        raise CheckpointError(f"{path}: checkpoint has no task heads; run finetune first")
    return model, heads


# -- commands ------------------------------------------------------------------------


def cmd_synth_data(cfg: RunConfig) -> None:
    s = cfg["synth"]
    cases, catalog = generate(SynthConfig(per_charge=s["per_charge"], seed=cfg.seed, sibling_rate=s["sibling_rate"],
                                          signature_rate=s["signature_rate"]))
    corpus.write_cases(cfg.path("corpus"), cases)
    corpus.write_catalog(cfg.path("catalog"), catalog)
    logger.info("synth-data: wrote %d cases to %s", len(cases), cfg.path("corpus"))


def cmd_ingest(cfg: RunConfig) -> None:
    d = cfg["data"]
    cases, catalog, skipped = corpus.load_corpus(cfg.path("corpus"), cfg.path("catalog"))
    kept = corpus.filter_cases(cases, d["min_tokens"], d["min_label_count"])
    if not kept:
        raise CorpusError("no case survives filtering")
    rest, test = corpus.split_cases(kept, d["test_fraction"], cfg.seed)
    pretrain_part, finetune_part = corpus.split_cases(rest, d["finetune_fraction"], cfg.seed + 1)
    for name, part in zip(SPLITS, (pretrain_part, finetune_part, test)):
        corpus.write_cases(split_path(cfg, name), part)
    corpus.write_catalog(catalog_path(cfg), catalog)
    report = {"loaded": len(cases), "malformed_lines": skipped, "kept": len(kept), "pretrain": len(pretrain_part),
              "finetune": len(finetune_part), "test": len(test)}
    atomic_write_text(cfg.work_dir / "ingest.json", _dump(report))
    logger.info("ingest: %s", report)


def cmd_build_vocab(cfg: RunConfig) -> None:
    d, e = cfg["data"], cfg["encoder"]
    catalog = _load_catalog(cfg)
    train = _load_split(cfg, "pretrain") + _load_split(cfg, "finetune")
    vocab = corpus.build_vocab(train, catalog, d["max_vocab"], d["max_seq_len"])
    vocab.save(cfg.path("vocab"))
    model = init_params(EncoderConfig(vocab_size=len(vocab), embed_dim=e["embed_dim"], proj_dim=e["proj_dim"],
                                      seed=cfg.seed, share_heads=e["share_heads"]))
    save_checkpoint(model, cfg.path("init_checkpoint"))
    logger.info("build-vocab: %d tokens", len(vocab))


def cmd_embed(cfg: RunConfig) -> None:
    model = read_checkpoint(cfg.path("init_checkpoint"))[0]
    vocab = Vocabulary.load(cfg.path("vocab"))
    cases = _load_split(cfg, "pretrain")
    if len(vocab) != model.config.vocab_size:
        raise CheckpointError("vocabulary and init checkpoint disagree on vocabulary size")
    export_embeddings(model, cases, vocab, cfg.path("embeddings"))
    logger.info("embed: %d pretraining cases", len(cases))


def cmd_mine_lcc(cfg: RunConfig) -> None:
    m = cfg["miner"]
    index = miner.load_index(cfg.path("embeddings"), labels_path_for(cfg.path("embeddings")))
    report = miner.mine_lcc_pools(index, m["pool_size"], m["sweep_depth"], cfg.seed, cfg["run"]["workers"])
    miner.write_lcc_pools(cfg.path("lcc_pools"), report.pools)
    logger.info("mine-lcc: %d pools, %d skipped, %d backfilled", len(report.pools), len(report.skipped),
                sum(p.backfilled for p in report.pools))


def cmd_mine_ldm(cfg: RunConfig) -> None:
    m = cfg["miner"]
    catalog = _load_catalog(cfg)
    vocab = Vocabulary.load(cfg.path("vocab"))
    init_model = read_checkpoint(cfg.path("init_checkpoint"))[0]
    # the classifier heads use a seed distinct from the task heads of the fine-tuned model
    clf_config = _finetune_config(cfg, seed=cfg.seed + 1, epochs=m["classifier_epochs"],
                                  learning_rate=m["classifier_learning_rate"],
                                  batch_size=m["classifier_batch_size"], tasks=("articles", "charges"),
                                  freeze_encoder=False)
    clf = miner.train_miner_classifier(_load_split(cfg, "finetune"), catalog, vocab, init_model.config, clf_config)
    pools = miner.mine_ldm_pools(clf, _load_split(cfg, "pretrain"), m["label_negatives"])
    miner.write_ldm_pools(cfg.path("ldm_pools"), pools)
    logger.info("mine-ldm: %d pools", len(pools))


def cmd_pretrain(cfg: RunConfig) -> None:
    p = cfg["pretrain"]
    catalog = _load_catalog(cfg)
    vocab = Vocabulary.load(cfg.path("vocab"))
    cases = _load_split(cfg, "pretrain")
    model = read_checkpoint(cfg.path("init_checkpoint"))[0]
    lcc = miner.read_lcc_pools(cfg.path("lcc_pools"))
    ldm = miner.read_ldm_pools(cfg.path("ldm_pools"), cases)
    data = trainer.PretrainData.build(cases, lcc, ldm, catalog, vocab, cfg["verbalizer"]["decision_template"])
    config = trainer.PretrainConfig(epochs=p["epochs"], learning_rate=p["learning_rate"], batch_size=p["batch_size"],
                                    temperature=cfg["objective"]["temperature"], weight_decay=p["weight_decay"],
                                    seed=cfg.seed, grad_clip_norm=p["grad_clip_norm"],
                                    lcc_drop_same_label=p["lcc_drop_same_label"])
    result = trainer.pretrain(model, data, config, cfg.path("run_dir"))
    logger.info("pretrain: epoch means %s", result.epoch_means())


def cmd_finetune(cfg: RunConfig) -> None:
    catalog = _load_catalog(cfg)
    vocab = Vocabulary.load(cfg.path("vocab"))
    cases = _load_split(cfg, "finetune")
    source = final_pretrain_checkpoint(cfg) if cfg["finetune"]["init"] == "pretrained" else cfg.path("init_checkpoint")
    model = read_checkpoint(source)[0]
    config = _finetune_config(cfg)
    heads = init_heads(model.config.proj_dim, {t: task_label_ids(t, catalog) for t in config.tasks}, cfg.seed)
    seqs = [corpus.tokenize(c.fact_text, vocab) for c in cases]
    result = trainer.finetune(model, heads, seqs, cases, config)
    tensors, meta = heads_to_tensors(result.heads)
    meta["init"] = cfg["finetune"]["init"]
    save_checkpoint(result.model, cfg.path("finetuned_checkpoint"), tensors, meta)
    logger.info("finetune from %s: epoch losses %s", source, result.epoch_losses)


def cmd_predict(cfg: RunConfig) -> None:
    model, heads = _load_finetuned(cfg.path("finetuned_checkpoint"))
    vocab = Vocabulary.load(cfg.path("vocab"))
    cases = _load_split(cfg, "test")
    preds = predict_batch(model, heads, [corpus.tokenize(c.fact_text, vocab) for c in cases])
    lines = []
    for k, case in enumerate(cases):
        rec = {"case_id": case.case_id,
               "gold": {t: case_label(case, t) for t in heads},
               "pred": {t: int(preds[t][k].label) for t in heads}}
        lines.append(json.dumps(rec, sort_keys=True) + "\n")
    atomic_write_text(cfg.path("predictions"), "".join(lines))
    logger.info("predict: %d cases", len(cases))


def cmd_eval(cfg: RunConfig) -> None:
    catalog = _load_catalog(cfg)
    gold: dict[str, list[int]] = {}
    pred: dict[str, list[int]] = {}
    with open(cfg.path("predictions"), encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                for task, label in rec["gold"].items():
                    gold.setdefault(task, []).append(int(label))
                    pred.setdefault(task, []).append(int(rec["pred"][task]))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{cfg.path('predictions')}:{n}: bad prediction record ({exc})") from exc
    reports = []
    for task in TASKS:
        if task not in gold:
            continue
        ids = task_label_ids(task, catalog)
        pos = {label: i for i, label in enumerate(ids)}
        try:
            g = [pos[x] for x in gold[task]]
            p = [pos[x] for x in pred[task]]
        except KeyError as exc:
            raise EvaluationError(f"{task}: label {exc} is not in the catalog") from exc
        report = macro_metrics(g, p, len(ids), task, cfg["eval"]["averaging"])
        out = report.to_json()
        for row in out["per_class"]:
            row["label"] = ids[row["label"]]
        reports.append(out)
    atomic_write_text(cfg.path("reports_dir") / "eval.json", _dump({"tasks": reports}))
    logger.info("eval: %s", {r["task"]: round(r["f1"], 4) for r in reports})


def cmd_entropy(cfg: RunConfig) -> None:
    e = cfg["eval"]
    model, heads = _load_finetuned(cfg.path("finetuned_checkpoint"))
    if e["entropy_task"] not in heads:
        raise ConfigError(f"eval.entropy_task={e['entropy_task']!r} has no head in the checkpoint")
    vocab = Vocabulary.load(cfg.path("vocab"))
    report = prediction_entropy(model, heads, _load_split(cfg, "test"), vocab, e["entropy_task"], e["entropy_bins"])
    out_dir = cfg.path("reports_dir")
    atomic_write_text(out_dir / "entropy.csv", report.to_csv())
    summary = {"task": e["entropy_task"], "mean": report.mean, "n": len(report.case_ids),
               "quantiles": {str(q): v for q, v in report.quantiles.items()},
               "bin_edges": report.bin_edges.tolist(), "counts": report.counts.tolist()}
    atomic_write_text(out_dir / "entropy_summary.json", _dump(summary))
    logger.info("entropy: mean %.6f over %d cases", report.mean, len(report.case_ids))


def _dbi_for(cfg: RunConfig, checkpoint: Path, cases: Sequence[LegalCase], charges: list[int], vocab: Vocabulary):
    from .encoder import encode_batch

    model = read_checkpoint(checkpoint)[0]
    H, _ = encode_batch(model, [corpus.tokenize(c.fact_text, vocab) for c in cases], "fact")
    return dbi(H, [c.charge_id for c in cases], charges)


def cmd_dbi(cfg: RunConfig) -> None:
    e = cfg["eval"]
    catalog = _load_catalog(cfg)
    vocab = Vocabulary.load(cfg.path("vocab"))
    cases = _load_split(cfg, "test")
    charges = e["dbi_charges"] or catalog.charge_ids()
    report = _dbi_for(cfg, _eval_checkpoint(cfg, "dbi_checkpoint"), cases, charges, vocab)
    baseline = None
    if e["dbi_baseline_checkpoint"]:
        baseline = _dbi_for(cfg, cfg.resolve(e["dbi_baseline_checkpoint"]), cases, charges, vocab)
    atomic_write_text(cfg.path("reports_dir") / "dbi.json", dbi_json(report, baseline) + "\n")
    logger.info("dbi: mean %.6f", report.mean)


def cmd_export_embeddings(cfg: RunConfig) -> None:
    model = read_checkpoint(_eval_checkpoint(cfg, "export_checkpoint"))[0]
    vocab = Vocabulary.load(cfg.path("vocab"))
    cases = _load_split(cfg, cfg["eval"]["export_split"])
    sidecar = export_embeddings(model, cases, vocab, cfg.path("export"))
    logger.info("export-embeddings: %d rows, labels in %s", len(cases), sidecar)


# -- registry ------------------------------------------------------------------------


def _inputs_after_ingest(*extra: str) -> Callable[[RunConfig], list[Path]]:
    def inputs(cfg: RunConfig) -> list[Path]:
        out = [catalog_path(cfg)]
        for item in extra:
            if item in SPLITS:
                out.append(split_path(cfg, item))
            elif item == "pretrained":
                out.append(final_pretrain_checkpoint(cfg) if cfg["finetune"]["init"] == "pretrained"
                           else cfg.path("init_checkpoint"))
            elif item == "dbi_checkpoints":
                out.append(_eval_checkpoint(cfg, "dbi_checkpoint"))
                if cfg["eval"]["dbi_baseline_checkpoint"]:
                    out.append(cfg.resolve(cfg["eval"]["dbi_baseline_checkpoint"]))
            elif item == "export_checkpoint":
                out += [_eval_checkpoint(cfg, "export_checkpoint"), split_path(cfg, cfg["eval"]["export_split"])]
            elif item == "embeddings_sidecar":
                out.append(labels_path_for(cfg.path("embeddings")))
            else:
                out.append(cfg.path(item))
        return out

    return inputs


COMMANDS: dict[str, tuple[Callable[[RunConfig], None], Callable[[RunConfig], list[Path]], str]] = {
    "synth-data": (cmd_synth_data, lambda cfg: [], "write the six-cluster synthetic corpus and catalog"),
    "ingest": (cmd_ingest, lambda cfg: [cfg.path("corpus"), cfg.path("catalog")],
               "filter the corpus and split it into pretrain / finetune / test"),
    "build-vocab": (cmd_build_vocab, _inputs_after_ingest("pretrain", "finetune"),
                    "build the vocabulary and the initial encoder checkpoint"),
    "embed": (cmd_embed, _inputs_after_ingest("pretrain", "vocab", "init_checkpoint"),
              "embed the pretraining split for retrieval"),
    "mine-lcc": (cmd_mine_lcc, lambda cfg: [cfg.path("embeddings"), labels_path_for(cfg.path("embeddings"))],
                 "mine positive and hard-negative cases per anchor"),
    "mine-ldm": (cmd_mine_ldm, _inputs_after_ingest("pretrain", "finetune", "vocab", "init_checkpoint"),
                 "mine confusable articles and charges per anchor"),
    "pretrain": (cmd_pretrain, _inputs_after_ingest("pretrain", "vocab", "init_checkpoint", "lcc_pools", "ldm_pools"),
                 "dual-view contrastive pretraining"),
    "finetune": (cmd_finetune, _inputs_after_ingest("finetune", "vocab", "pretrained"),
                 "train task heads and encoder on the finetune split"),
    "predict": (cmd_predict, _inputs_after_ingest("test", "vocab", "finetuned_checkpoint"),
                "predict article, charge and term for the test split"),
    "eval": (cmd_eval, _inputs_after_ingest("predictions"), "accuracy and macro P/R/F1 per task"),
    "entropy": (cmd_entropy, _inputs_after_ingest("test", "vocab", "finetuned_checkpoint"),
                "per-case prediction cross-entropy and histogram"),
    "dbi": (cmd_dbi, _inputs_after_ingest("test", "vocab", "dbi_checkpoints"), "Davies-Bouldin index per charge"),
    "export-embeddings": (cmd_export_embeddings, _inputs_after_ingest("vocab", "export_checkpoint"),
                          "write fact embeddings and the labels sidecar"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-c", "--config", help="INI config file")
    common.add_argument("--workers", type=int, help="cap on parallel workers (overrides run.workers)")
    common.add_argument("--log-file", help="log destination (default: <work_dir>/duet.log)")
    parser = _Parser(prog="duet", description="Dual-view contrastive pretraining pipeline for judgment prediction.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (_, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, parents=[common], description=help_text)
        p.add_argument("overrides", nargs="*", metavar="section.key=value")
    return parser


def _setup_logging(path: Path) -> logging.Handler:
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def run(command: str, config_path: str | Path | None = None, overrides: Sequence[str] = (),
        workers: int | None = None, log_file: str | Path | None = None) -> int:
    """Run one pipeline command; returns the process exit code."""
    if command not in COMMANDS:
        print(f"duet: error: unknown command {command!r}", file=sys.stderr)
        return 1
    try:
        overrides = list(overrides)
        if workers is not None:
            if workers < 1:
                raise ConfigError("--workers must be >= 1")
            overrides.append(f"run.workers={workers}")
        cfg = load_config(config_path, overrides)
    except ConfigError as exc:
        print(f"duet: error: {exc}", file=sys.stderr)
        return 1
    func, inputs, _ = COMMANDS[command]
    handler = _setup_logging(Path(log_file) if log_file else cfg.work_dir / "duet.log")
    try:
        missing = [str(p) for p in inputs(cfg) if not p.exists()]
        if missing:
            raise FileNotFoundError(f"missing input(s): {', '.join(missing)}")
        logger.info("start %s (seed %d)", command, cfg.seed)
        func(cfg)
        logger.info("done %s", command)
        return 0
    except VALIDATION_ERRORS as exc:
        logger.error("%s failed: %s", command, exc)
        print(f"duet: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        logger.exception("%s failed", command)
        print(f"duet: {command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"duet: error: {exc}", file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    return run(args.command, args.config, args.overrides, args.workers, args.log_file)


if __name__ == "__main__":
    sys.exit(main())
