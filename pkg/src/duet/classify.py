"""Linear classification heads on the fact representation, fine-tuning and prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import NUM_TERM_CLASSES, LabelCatalog, LegalCase, TokenSequence
from .encoder import EncoderGradients, EncoderModel, encode_batch, encode_batch_backward, xavier_bound
from .optim import AdamW, clip_global_norm

logger = logging.getLogger(__name__)

TASKS = ("articles", "charges", "term")


class TrainingError(RuntimeError):
    pass


@dataclass
class ClassifierHead:
    W: np.ndarray
    b: np.ndarray
    label_ids: list[int]

    def __post_init__(self):
        self._pos = {lab: i for i, lab in enumerate(self.label_ids)}

    def index_of(self, label: int) -> int:
        try:
            return self._pos[label]
        except KeyError:
            raise ValueError(f"label {label} is not one of this head's labels") from None


ClassifierHeads = dict[str, ClassifierHead]


@dataclass
class FinetuneConfig:
    epochs: int = 10
    learning_rate: float = 5e-6
    batch_size: int = 64
    tasks: tuple[str, ...] = TASKS
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    freeze_encoder: bool = False

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise ValueError("at least one task is required")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("invalid fine-tuning hyperparameters")


def task_label_ids(task: str, catalog: LabelCatalog) -> list[int]:
    if task == "articles":
        return catalog.article_ids()
    if task == "charges":
        return catalog.charge_ids()
    if task == "term":
        return list(range(NUM_TERM_CLASSES))
    raise ValueError(f"unknown task {task!r}")


def case_label(case: LegalCase, task: str) -> int:
    return {"articles": case.article_id, "charges": case.charge_id, "term": case.term_id}[task]


def init_heads(proj_dim: int, labels: dict[str, list[int]], seed: int) -> ClassifierHeads:
    rng = np.random.default_rng(seed)
    heads = {}
    for task in TASKS:
        if task not in labels:
            continue
        ids = list(labels[task])
        if not ids:
            raise ValueError(f"task {task} has no labels")
        a = xavier_bound(proj_dim, len(ids))
        W = rng.uniform(-a, a, size=(proj_dim, len(ids))).astype(np.float32).astype(np.float64)
        heads[task] = ClassifierHead(W, np.zeros(len(ids)), ids)
    return heads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row softmax cross-entropy and its gradient w.r.t. the logits (per row, unscaled)."""
    lsm = log_softmax(logits)
    rows = np.arange(len(targets))
    losses = -lsm[rows, targets]
    grad = np.exp(lsm)
    grad[rows, targets] -= 1.0
    return losses, grad


def finetune_loss_and_grads(model: EncoderModel, heads: ClassifierHeads, seqs: Sequence[TokenSequence],
                            targets: dict[str, np.ndarray], grads: EncoderGradients | None,
                            head_grads: dict[str, dict[str, np.ndarray]] | None) -> dict[str, float]:
    """Mean (over the batch) cross-entropy per task; gradients of the task SUM are accumulated.

    ``targets`` holds head indices (not label ids). Pass ``grads=None`` to skip
    the encoder backward pass.
    """
    H, cache = encode_batch(model, seqs, "fact")
    n = len(seqs)
    gH = np.zeros_like(H)
    out = {}
    for task, tgt in targets.items():
        head = heads[task]
        losses, glog = cross_entropy(H @ head.W + head.b, tgt)
        out[task] = float(losses.mean())
        glog /= n
        if head_grads is not None:
            head_grads[task]["W"] += H.T @ glog
            head_grads[task]["b"] += glog.sum(axis=0)
        gH += glog @ head.W.T
    if grads is not None:
        encode_batch_backward(model, cache, "fact", gH, grads)
    return out


@dataclass
class FinetuneResult:
    model: EncoderModel
    heads: ClassifierHeads
    epoch_losses: list[dict[str, float]] = field(default_factory=list)


def finetune(model: EncoderModel, heads: ClassifierHeads, seqs: Sequence[TokenSequence],
             cases: Sequence[LegalCase], config: FinetuneConfig) -> FinetuneResult:
    """Jointly train the encoder and the task heads with summed cross-entropy.

    ``seqs[i]`` is the tokenized fact of ``cases[i]``. The model and heads are
    updated in place and also returned.
    """
    if len(seqs) != len(cases):
        raise ValueError("seqs and cases must align")
    if not cases:
        raise TrainingError("empty training set")
    missing = [t for t in config.tasks if t not in heads]
    if missing:
        raise ValueError(f"no head for tasks {missing}")
    targets = {t: np.array([heads[t].index_of(case_label(c, t)) for c in cases]) for t in config.tasks}

    opt = AdamW(config.learning_rate, config.weight_decay)
    result = FinetuneResult(model, heads)
    n = len(cases)
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        sums = {t: 0.0 for t in config.tasks}
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            grads = None if config.freeze_encoder else EncoderGradients.zeros_like(model)
            hgrads = {t: {"W": np.zeros_like(heads[t].W), "b": np.zeros_like(heads[t].b)} for t in config.tasks}
            losses = finetune_loss_and_grads(model, heads, [seqs[i] for i in idx],
                                             {t: tg[idx] for t, tg in targets.items()}, grads, hgrads)
            if not all(np.isfinite(v) for v in losses.values()):
                raise TrainingError(f"non-finite fine-tuning loss at epoch {epoch}: {losses}")
            for t, v in losses.items():
                sums[t] += v * len(idx)
            params = {f"head.{t}.{k}": getattr(heads[t], k) for t in config.tasks for k in ("W", "b")}
            flat_grads = {f"head.{t}.{k}": hgrads[t][k] for t in config.tasks for k in ("W", "b")}
            if grads is not None:
                params.update(model.parameters())
                flat_grads.update(grads.arrays)
            clip_global_norm(flat_grads, config.grad_clip_norm)
            opt.step(params, flat_grads)
            model.snap_to_storage()
            for t in config.tasks:
                heads[t].W[...] = heads[t].W.astype(np.float32)
                heads[t].b[...] = heads[t].b.astype(np.float32)
        epoch_means = {t: s / n for t, s in sums.items()}
        logger.info("finetune epoch %d: %s", epoch, epoch_means)
        result.epoch_losses.append(epoch_means)
    return result


@dataclass
class Prediction:
    label: int
    probs: np.ndarray


def predict_batch(model: EncoderModel, heads: ClassifierHeads,
                  seqs: Sequence[TokenSequence]) -> dict[str, list[Prediction]]:
    if not seqs:
        return {t: [] for t in heads}
    H, _ = encode_batch(model, seqs, "fact")
    out = {}
    for task, head in heads.items():
        logits = H @ head.W + head.b
        probs = np.exp(log_softmax(logits))
        probs /= probs.sum(axis=1, keepdims=True)
        # argmax returns the first maximum, i.e. the smallest label id
        best = logits.argmax(axis=1)
        out[task] = [Prediction(head.label_ids[k], p) for k, p in zip(best, probs)]
    return out


def predict(model: EncoderModel, heads: ClassifierHeads, seq: TokenSequence) -> dict[str, Prediction]:
    return {t: preds[0] for t, preds in predict_batch(model, heads, [seq]).items()}


def heads_to_tensors(heads: ClassifierHeads) -> tuple[dict[str, np.ndarray], dict]:
    tensors, meta = {}, {}
    for task, head in heads.items():
        tensors[f"head.{task}.W"] = head.W
        tensors[f"head.{task}.b"] = head.b
        meta[task] = list(head.label_ids)
    return tensors, {"heads": meta}


def heads_from_tensors(tensors: dict[str, np.ndarray], meta: dict) -> ClassifierHeads:
    heads = {}
    for task, ids in meta.get("heads", {}).items():
        heads[task] = ClassifierHead(tensors[f"head.{task}.W"], tensors[f"head.{task}.b"], list(ids))
    return heads
