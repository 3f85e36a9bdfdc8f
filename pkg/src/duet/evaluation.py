"""Macro metrics, prediction cross-entropy, Davies-Bouldin separability and embedding export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .classify import ClassifierHeads, case_label, log_softmax
from .corpus import LegalCase, Vocabulary, tokenize
from .encoder import EncoderModel, encode_batch
from .io import atomic_write_bytes, atomic_write_text, csv_text, matrix_bytes

Averaging = Literal["present", "all"]


class EvaluationError(ValueError):
    pass


@dataclass
class ClassScore:
    label: int
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class TaskReport:
    task: str
    acc: float
    mp: float
    mr: float
    f1: float
    per_class: list[ClassScore] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "acc": self.acc,
            "mp": self.mp,
            "mr": self.mr,
            "f1": self.f1,
            "per_class": [vars(c) for c in self.per_class],
        }


def macro_metrics(gold: Sequence[int], pred: Sequence[int], num_classes: int, task: str = "",
                  averaging: Averaging = "present") -> TaskReport:
    """Accuracy and macro precision/recall/F1.

    Classes never predicted get precision 0, classes never in ``gold`` get
    recall 0. With ``averaging="present"`` the macro means run over classes
    that occur in ``gold``; ``"all"`` uses every class in ``range(num_classes)``.
    """
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gold.shape != pred.shape:
        raise EvaluationError(f"length mismatch: {gold.size} gold vs {pred.size} predicted")
    if gold.size and (min(gold.min(), pred.min()) < 0 or max(gold.max(), pred.max()) >= num_classes):
        raise EvaluationError(f"labels must lie in [0, {num_classes})")
    if gold.size == 0:
        return TaskReport(task, 0.0, 0.0, 0.0, 0.0, [])
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (gold, pred), 1)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    prec = np.divide(tp, predicted, out=np.zeros(num_classes), where=predicted > 0)
    rec = np.divide(tp, support, out=np.zeros(num_classes), where=support > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(num_classes), where=denom > 0)
    if averaging == "present":
        classes = np.flatnonzero(support > 0)
    elif averaging == "all":
        classes = np.arange(num_classes)
    else:
        raise ValueError(f"unknown averaging {averaging!r}")
    per_class = [ClassScore(int(k), float(prec[k]), float(rec[k]), float(f1[k]), int(support[k])) for k in classes]
    return TaskReport(
        task,
        float(tp.sum() / gold.size),
        float(prec[classes].mean()),
        float(rec[classes].mean()),
        float(f1[classes].mean()),
        per_class,
    )


# -- prediction cross-entropy ----------------------------------------------------------


@dataclass
class EntropyReport:
    case_ids: list[str]
    values: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    quantiles: dict[float, float]

    def to_csv(self) -> str:
        return csv_text(("case_id", "entropy"), ((c, repr(float(v))) for c, v in zip(self.case_ids, self.values)))


QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)


def entropy_report(case_ids: Sequence[str], values: np.ndarray, bins: int = 50) -> EntropyReport:
    values = np.asarray(values, dtype=np.float64)
    top = float(values.max()) if values.size else 0.0
    edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    quants = {q: float(np.quantile(values, q)) for q in QUANTILES} if values.size else {}
    mean = float(values.mean()) if values.size else 0.0
    return EntropyReport(list(case_ids), values, edges, counts, mean, quants)


def gold_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """-ln P(gold) per row; exactly 0 when the gold class takes all the mass."""
    lsm = log_softmax(np.asarray(logits, dtype=np.float64))
    return np.maximum(-lsm[np.arange(len(targets)), targets], 0.0)


def prediction_entropy(model: EncoderModel, heads: ClassifierHeads, cases: Sequence[LegalCase], vocab: Vocabulary,
                       task: str, bins: int = 50) -> EntropyReport:
    head = heads[task]
    if not cases:
        return entropy_report([], np.zeros(0), bins)
    H, _ = encode_batch(model, [tokenize(c.fact_text, vocab) for c in cases], "fact")
    targets = np.array([head.index_of(case_label(c, task)) for c in cases])
    return entropy_report([c.case_id for c in cases], gold_cross_entropy(H @ head.W + head.b, targets), bins)


# -- Davies-Bouldin --------------------------------------------------------------------


@dataclass
class DbiReport:
    charges: list[int]
    dbi: np.ndarray
    centroids: np.ndarray
    scatter: np.ndarray
    separation: np.ndarray

    def to_json(self) -> list[dict]:
        return [{"charge_id": int(c), "dbi": float(d), "s": float(s)}
                for c, d, s in zip(self.charges, self.dbi, self.scatter)]

    @property
    def mean(self) -> float:
        return float(self.dbi.mean())


def dbi(embeddings: np.ndarray, charge_labels: Sequence[int], selected_charges: Sequence[int]) -> DbiReport:
    """Per-cluster Davies-Bouldin ratios over the selected charges, Euclidean throughout."""
    X = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(charge_labels)
    selected = list(selected_charges)
    if len(selected) < 2:
        raise EvaluationError("need at least 2 selected charges")
    if len(set(selected)) != len(selected):
        raise EvaluationError("selected charges must be distinct")
    if X.shape[0] != labels.shape[0]:
        raise EvaluationError("embeddings and labels must align")
    k = len(selected)
    cents = np.zeros((k, X.shape[1]))
    scatter = np.zeros(k)
    for i, c in enumerate(selected):
        members = X[labels == c]
        if members.shape[0] == 0:
            raise EvaluationError(f"charge {c} has no members")
        cents[i] = members.mean(axis=0)
        scatter[i] = np.linalg.norm(members - cents[i], axis=1).mean()
    sep = np.linalg.norm(cents[:, None, :] - cents[None, :, :], axis=2)
    off = ~np.eye(k, dtype=bool)
    if np.any(sep[off] == 0.0):
        raise EvaluationError("two selected charges have coincident centroids")
    ratios = np.where(off, (scatter[:, None] + scatter[None, :]) / np.where(off, sep, 1.0), -np.inf)
    return DbiReport(selected, ratios.max(axis=1), cents, scatter, sep)


def dbi_reduction(baseline: DbiReport, candidate: DbiReport) -> dict[int, float]:
    """Per-charge ``baseline - candidate``; positive values mean the candidate separates better."""
    if baseline.charges != candidate.charges:
        raise EvaluationError("reports cover different charges")
    return {int(c): float(b - x) for c, b, x in zip(baseline.charges, baseline.dbi, candidate.dbi)}


def dbi_json(report: DbiReport, baseline: DbiReport | None = None) -> str:
    out: dict = {"clusters": report.to_json(), "mean_dbi": report.mean}
    if baseline is not None:
        deltas = dbi_reduction(baseline, report)
        out["comparison"] = [{"charge_id": c, "baseline_dbi": float(b), "dbi": float(x), "reduction": deltas[c]}
                             for c, b, x in zip(report.charges, baseline.dbi, report.dbi)]
    return json.dumps(out, indent=2)


# -- embedding export --------------------------------------------------------------------


def labels_csv(cases: Sequence[LegalCase]) -> str:
    return csv_text(("case_id", "article_id", "charge_id"), ((c.case_id, c.article_id, c.charge_id) for c in cases))


def labels_path_for(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".labels.csv")


def export_embeddings(model: EncoderModel, cases: Sequence[LegalCase], vocab: Vocabulary, path: str | Path) -> Path:
    """Write fact embeddings in the binary matrix format plus ``<path>.labels.csv``; returns the sidecar path."""
    if cases:
        H, _ = encode_batch(model, [tokenize(c.fact_text, vocab) for c in cases], "fact")
    else:
        H = np.zeros((0, model.config.proj_dim))
    atomic_write_bytes(path, matrix_bytes(H))
    sidecar = labels_path_for(path)
    atomic_write_text(sidecar, labels_csv(cases))
    return sidecar
