"""Dual-view contrastive pretraining; fine-tuning and prediction are re-exported from ``classify``."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .classify import (  # noqa: F401  (re-exported)
    ClassifierHead,
    ClassifierHeads,
    FinetuneConfig,
    FinetuneResult,
    Prediction,
    TrainingError,
    finetune,
    init_heads,
    predict,
    predict_batch,
)
from .corpus import LabelCatalog, LegalCase, TokenSequence, Vocabulary, tokenize
from .encoder import EncoderGradients, EncoderModel, encode_batch, encode_batch_backward, save_checkpoint
from .io import atomic_write_text, csv_text
from .miner import LccPool, LdmPool
from .objective import DEFAULT_TEMPERATURE, ContrastiveInstance, RowInstance, row_info_nce
from .optim import AdamW, clip_global_norm
from .verbalizer import DEFAULT_TEMPLATE, render_decision

logger = logging.getLogger(__name__)

Pair = tuple[int, int]


class DuplicateError(ValueError):
    pass


@dataclass
class PretrainConfig:
    epochs: int = 5
    learning_rate: float = 1e-5
    batch_size: int = 32
    temperature: float = DEFAULT_TEMPERATURE
    weight_decay: float = 0.01
    seed: int = 0
    grad_clip_norm: float = 1.0
    # drop in-batch facts that share both labels with the anchor from its LCC negatives
    lcc_drop_same_label: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate < 0 or self.temperature <= 0 or self.weight_decay < 0:
            raise ValueError("rates must be positive")


@dataclass(frozen=True)
class BatchItem:
    fact: str
    pos_fact: str
    neg_fact: str
    pos_decision: Pair
    neg_decision: Pair


BatchPools = list[BatchItem]


# -- batch assembly ------------------------------------------------------------------


def lcc_candidates(batch: Sequence[BatchItem], collapse: bool = False,
                   labels: Mapping[str, Pair] | None = None) -> list[tuple[str, str, list[str]]]:
    """Per instance: (anchor, positive, negatives) case ids, negatives in the in-batch order.

    Without ``collapse`` a case id that appears twice in one instance raises
    :class:`DuplicateError`. With ``collapse`` repeats, the anchor and the
    positive are removed from the negatives. When ``labels`` is given,
    in-batch cases sharing both labels with the anchor are removed as well,
    since a negative must differ in article or charge.
    """
    if len(batch) < 2:
        raise ValueError("in-batch negatives need at least 2 instances")
    out = []
    for i, it in enumerate(batch):
        others = [b for j, b in enumerate(batch) if j != i]
        negs = [it.neg_fact] + [o.fact for o in others] + [o.pos_fact for o in others] + [o.neg_fact for o in others]
        if collapse:
            seen = {it.fact, it.pos_fact}
            kept = []
            for n in negs:
                if labels is not None and labels[n] == labels[it.fact]:
                    continue
                if n not in seen:
                    seen.add(n)
                    kept.append(n)
            negs = kept
        else:
            ids = [it.fact, it.pos_fact, *negs]
            if len(set(ids)) != len(ids):
                raise DuplicateError(f"instance {i}: a case id is used in more than one role")
        out.append((it.fact, it.pos_fact, negs))
    return out


def ldm_candidates(batch: Sequence[BatchItem], collapse: bool = True) -> tuple[list[tuple[str, Pair, list[Pair]]], int]:
    """Per instance: (anchor fact, positive decision, negative decisions); also the number dropped.

    Decisions are identified by their (article, charge) pair, which determines
    the rendered text.
    """
    if len(batch) < 2:
        raise ValueError("in-batch negatives need at least 2 instances")
    out, dropped = [], 0
    for i, it in enumerate(batch):
        others = [b for j, b in enumerate(batch) if j != i]
        negs = [it.neg_decision] + [o.pos_decision for o in others] + [o.neg_decision for o in others]
        if collapse:
            seen = {it.pos_decision}
            kept = []
            for n in negs:
                if n not in seen:
                    seen.add(n)
                    kept.append(n)
            dropped += len(negs) - len(kept)
            negs = kept
        out.append((it.fact, it.pos_decision, negs))
    return out, dropped


def assemble_lcc_batch(batch: Sequence[BatchItem], embeddings: Mapping[str, np.ndarray],
                       temperature: float = DEFAULT_TEMPERATURE, collapse: bool = False,
                       labels: Mapping[str, Pair] | None = None) -> list[ContrastiveInstance]:
    """Fact-view instances: each fact against its hard negative and every other batch fact."""
    return [
        ContrastiveInstance(embeddings[a], embeddings[p], [embeddings[n] for n in negs], temperature)
        for a, p, negs in lcc_candidates(batch, collapse, labels)
    ]


def assemble_ldm_batch(batch: Sequence[BatchItem], fact_embeddings: Mapping[str, np.ndarray],
                       decision_embeddings: Mapping[Pair, np.ndarray], temperature: float = DEFAULT_TEMPERATURE,
                       collapse: bool = True) -> list[ContrastiveInstance]:
    """Decision-view instances; a decision equal to the instance's own positive is never a negative."""
    cands, dropped = ldm_candidates(batch, collapse)
    if dropped:
        logger.warning("collapsed %d duplicate decisions in batch of %d", dropped, len(batch))
    return [
        ContrastiveInstance(fact_embeddings[a], decision_embeddings[p], [decision_embeddings[n] for n in negs],
                            temperature)
        for a, p, negs in cands
    ]


# -- pretraining -------------------------------------------------------------------------


@dataclass
class PretrainData:
    """Tokenized facts and decisions plus the mined pools, keyed for fast lookup."""

    fact_seqs: dict[str, TokenSequence]
    decision_seqs: dict[Pair, TokenSequence]
    labels: dict[str, Pair]
    lcc: dict[str, LccPool]
    ldm: dict[str, LdmPool]
    anchors: list[str]

    @classmethod
    def build(cls, cases: Sequence[LegalCase], lcc_pools: Sequence[LccPool], ldm_pools: Sequence[LdmPool],
              catalog: LabelCatalog, vocab: Vocabulary, template: str = DEFAULT_TEMPLATE) -> "PretrainData":
        fact_seqs = {c.case_id: tokenize(c.fact_text, vocab) for c in cases}
        labels = {c.case_id: c.labels() for c in cases}
        lcc = {p.anchor_id: p for p in lcc_pools}
        ldm = {p.anchor_id: p for p in ldm_pools}
        for p in lcc_pools:
            for cid in (p.positive_id, *p.negative_ids):
                if cid not in fact_seqs:
                    raise ValueError(f"pool of {p.anchor_id} references unknown case {cid}")
        anchors = [c.case_id for c in cases if c.case_id in lcc and c.case_id in ldm]
        if len(anchors) < len(cases):
            logger.warning("%d of %d cases lack an LCC or LDM pool and are not pretraining anchors",
                           len(cases) - len(anchors), len(cases))
        pairs = set()
        for cid in anchors:
            pairs.add(labels[cid])
            pairs.update(ldm[cid].decision_negative_ids)
        decision_seqs = {pr: tokenize(render_decision(*pr, catalog, template).text, vocab) for pr in sorted(pairs)}
        return cls(fact_seqs, decision_seqs, labels, lcc, ldm, anchors)

    def sample_item(self, anchor: str, rng: np.random.Generator) -> BatchItem:
        lp, dp = self.lcc[anchor], self.ldm[anchor]
        neg_fact = lp.negative_ids[int(rng.integers(len(lp.negative_ids)))]
        neg_dec = dp.decision_negative_ids[int(rng.integers(len(dp.decision_negative_ids)))]
        return BatchItem(anchor, lp.positive_id, neg_fact, self.labels[anchor], neg_dec)


@dataclass
class StepResult:
    loss_lcc: float
    loss_ldm: float
    grad_norm: float

    @property
    def loss_total(self) -> float:
        return self.loss_lcc + self.loss_ldm


def pretrain_loss_and_grads(model: EncoderModel, batch: Sequence[BatchItem], data: PretrainData,
                            temperature: float, grads: EncoderGradients | None,
                            drop_same_label: bool = True,
                            views: Sequence[str] = ("lcc", "ldm")) -> tuple[float, float]:
    """Mean LCC and LDM losses over the batch; accumulates gradients of their sum into ``grads``.

    ``views`` picks which losses contribute gradients (both by default); both
    values are always returned.
    """
    fact_ids: list[str] = []
    for it in batch:
        for cid in (it.fact, it.pos_fact, it.neg_fact):
            if cid not in fact_ids:
                fact_ids.append(cid)
    pairs: list[Pair] = []
    for it in batch:
        for pr in (it.pos_decision, it.neg_decision):
            if pr not in pairs:
                pairs.append(pr)
    frow = {cid: k for k, cid in enumerate(fact_ids)}
    drow = {pr: k for k, pr in enumerate(pairs)}

    HF, fcache = encode_batch(model, [data.fact_seqs[c] for c in fact_ids], "fact")
    HD, dcache = encode_batch(model, [data.decision_seqs[p] for p in pairs], "decision")

    lcc = [RowInstance(frow[a], [frow[p]] + [frow[n] for n in negs]) for a, p, negs in
           lcc_candidates(batch, True, data.labels if drop_same_label else None)]
    ldm_c, _ = ldm_candidates(batch, True)
    ldm = [RowInstance(frow[a], [drow[p]] + [drow[n] for n in negs]) for a, p, negs in ldm_c]

    l_lcc, gA1, gC1 = row_info_nce(HF, HF, lcc, temperature)
    l_ldm, gA2, gD = row_info_nce(HF, HD, ldm, temperature)
    if grads is not None:
        use_lcc, use_ldm = float("lcc" in views), float("ldm" in views)
        encode_batch_backward(model, fcache, "fact", use_lcc * (gA1 + gC1) + use_ldm * gA2, grads)
        encode_batch_backward(model, dcache, "decision", use_ldm * gD, grads)
    return float(l_lcc.mean()), float(l_ldm.mean())


def pretrain_step(model: EncoderModel, batch: Sequence[BatchItem], data: PretrainData, config: PretrainConfig,
                  optimizer: AdamW) -> StepResult:
    """One AdamW update on the summed LCC + LDM loss of ``batch``; updates ``model`` in place."""
    grads = EncoderGradients.zeros_like(model)
    loss_lcc, loss_ldm = pretrain_loss_and_grads(model, batch, data, config.temperature, grads,
                                                 config.lcc_drop_same_label)
    if not (np.isfinite(loss_lcc) and np.isfinite(loss_ldm)):
        raise TrainingError(
            f"non-finite pretraining loss (lcc={loss_lcc}, ldm={loss_ldm}) on batch anchors "
            f"{[it.fact for it in batch][:8]}"
        )
    norm = clip_global_norm(grads.arrays, config.grad_clip_norm)
    optimizer.step(model.parameters(), grads.arrays)
    model.snap_to_storage()
    return StepResult(loss_lcc, loss_ldm, norm)


def epoch_batches(anchors: Sequence[str], batch_size: int, rng: np.random.Generator) -> list[list[str]]:
    order = rng.permutation(len(anchors))
    batches = [[anchors[i] for i in order[s:s + batch_size]] for s in range(0, len(anchors), batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


@dataclass
class LossRecord:
    epoch: int
    step: int
    loss_lcc: float
    loss_ldm: float

    @property
    def loss_total(self) -> float:
        return self.loss_lcc + self.loss_ldm


@dataclass
class PretrainResult:
    model: EncoderModel
    log: list[LossRecord] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def epoch_means(self) -> dict[int, float]:
        by_epoch: dict[int, list[float]] = {}
        for r in self.log:
            by_epoch.setdefault(r.epoch, []).append(r.loss_total)
        return {e: float(np.mean(v)) for e, v in sorted(by_epoch.items())}


def loss_log_csv(log: Sequence[LossRecord]) -> str:
    return csv_text(("epoch", "step", "loss_lcc", "loss_ldm", "loss_total"),
                    ((r.epoch, r.step, repr(r.loss_lcc), repr(r.loss_ldm), repr(r.loss_total)) for r in log))


def pretrain(model: EncoderModel, data: PretrainData, config: PretrainConfig,
             run_dir: str | Path | None = None) -> PretrainResult:
    """Run dual-view pretraining in place.

    Hard negatives are resampled every step from an RNG seeded by
    ``(seed, epoch)``. With ``run_dir`` set, ``epoch-0.duet`` (the initial
    state), ``epoch-{n}.duet`` and ``loss.csv`` are written there.
    """
    result = PretrainResult(model)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        p = run_dir / "epoch-0.duet"
        save_checkpoint(model, p)
        result.checkpoints.append(p)
    if config.epochs and len(data.anchors) < 2:
        raise TrainingError("pretraining needs at least 2 anchors with pools")
    opt = AdamW(config.learning_rate, config.weight_decay)
    step = 0
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        for ids in epoch_batches(data.anchors, config.batch_size, rng):
            batch = [data.sample_item(a, rng) for a in ids]
            res = pretrain_step(model, batch, data, config, opt)
            step += 1
            result.log.append(LossRecord(epoch, step, res.loss_lcc, res.loss_ldm))
        logger.info("pretrain epoch %d: mean loss %.5f", epoch, result.epoch_means().get(epoch, float("nan")))
        if run_dir is not None:
            p = run_dir / f"epoch-{epoch}.duet"
            save_checkpoint(model, p)
            result.checkpoints.append(p)
            atomic_write_text(run_dir / "loss.csv", loss_log_csv(result.log))
    if run_dir is not None and config.epochs == 0:
        atomic_write_text(run_dir / "loss.csv", loss_log_csv(result.log))
    return result
