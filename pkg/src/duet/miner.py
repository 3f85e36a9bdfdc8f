"""Hard-negative pools for the clustering (LCC) and decision-matching (LDM) objectives."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np

from .classify import (
    ClassifierHeads,
    FinetuneConfig,
    finetune,
    init_heads,
    task_label_ids,
)
from .corpus import LabelCatalog, LegalCase, TokenSequence, Vocabulary, tokenize
from .encoder import EncoderConfig, EncoderModel, encode_batch, init_params
from .io import atomic_write_text, read_matrix

logger = logging.getLogger(__name__)

LCC_POOL_SIZE = 15
LABEL_NEGATIVES = 3
DEFAULT_SWEEP_DEPTH = 100


class MiningError(ValueError):
    pass


@dataclass
class CorpusIndex:
    case_ids: list[str]
    embeddings: np.ndarray
    labels: list[tuple[int, int]]
    _row: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.case_ids) != len(self.labels) or len(self.case_ids) != self.embeddings.shape[0]:
            raise ValueError("index rows are not aligned")
        self._row = {cid: i for i, cid in enumerate(self.case_ids)}
        if len(self._row) != len(self.case_ids):
            raise ValueError("duplicate case ids in index")

    def __len__(self) -> int:
        return len(self.case_ids)

    def row(self, case_id: str) -> int:
        try:
            return self._row[case_id]
        except KeyError:
            raise MiningError(f"case {case_id!r} is not in the index") from None


@dataclass
class LccPool:
    anchor_id: str
    positive_id: str
    negative_ids: list[str]
    backfilled: bool = False

    def to_json(self) -> dict:
        return {"anchor": self.anchor_id, "positive": self.positive_id, "negatives": self.negative_ids,
                "backfilled": self.backfilled}


@dataclass
class LdmPool:
    anchor_id: str
    true_pair: tuple[int, int]
    neg_articles: list[int]
    neg_charges: list[int]
    decision_negative_ids: list[tuple[int, int]]

    def to_json(self) -> dict:
        return {"anchor": self.anchor_id, "neg_articles": self.neg_articles, "neg_charges": self.neg_charges}


@dataclass
class MinerClassifier:
    model: EncoderModel
    heads: ClassifierHeads
    vocab: Vocabulary


# -- retrieval -------------------------------------------------------------------


def embed_corpus(model: EncoderModel, cases: Sequence[LegalCase], vocab: Vocabulary) -> CorpusIndex:
    if len(vocab) != model.config.vocab_size:
        raise MiningError(f"vocabulary has {len(vocab)} tokens but the model expects {model.config.vocab_size}")
    if not cases:
        return CorpusIndex([], np.zeros((0, model.config.proj_dim)), [])
    seqs = [tokenize(c.fact_text, vocab) for c in cases]
    H, _ = encode_batch(model, seqs, "fact")
    return CorpusIndex([c.case_id for c in cases], H, [c.labels() for c in cases])


def load_index(matrix_path: str | Path, labels_path: str | Path) -> CorpusIndex:
    """Import an external embedding matrix plus its ``case_id,article_id,charge_id`` sidecar."""
    matrix = read_matrix(matrix_path)
    ids, labels = [], []
    with open(labels_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["case_id"])
            labels.append((int(row["article_id"]), int(row["charge_id"])))
    return CorpusIndex(ids, matrix, labels)


def _unit_rows(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return M / norms


def _ranking(index: CorpusIndex, unit: np.ndarray, anchor_row: int) -> np.ndarray:
    # row-wise sums keep each similarity independent of its row position
    sims = np.sum(unit * unit[anchor_row], axis=1)
    order = np.lexsort((np.asarray(index.case_ids), -sims))
    return order[order != anchor_row]


def topk_retrieve(index: CorpusIndex, anchor_id: str, k: int) -> list[str]:
    """Case ids of the ``k`` most cosine-similar other rows; ties go to the smaller case id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    anchor_row = index.row(anchor_id)
    order = _ranking(index, _unit_rows(index.embeddings), anchor_row)
    return [index.case_ids[i] for i in order[:k]]


# -- clustering pools --------------------------------------------------------------


@dataclass
class LccMiningReport:
    pools: list[LccPool]
    skipped: list[str]


def _mine_one(index: CorpusIndex, unit: np.ndarray, row: int, pool_size: int, sweep_depth: int,
              seed: int) -> LccPool | None:
    label = index.labels[row]
    order = _ranking(index, unit, row)
    same = [i for i in order if index.labels[i] == label]
    if not same:
        return None
    diff_sweep = [i for i in order[:sweep_depth] if index.labels[i] != label]
    negatives = diff_sweep[:pool_size]
    backfilled = False
    if len(negatives) < pool_size:
        backfilled = True
        chosen = set(negatives)
        rest = np.array([i for i in order if index.labels[i] != label and i not in chosen], dtype=np.int64)
        if len(negatives) == 0 and rest.size == 0:
            raise MiningError("no case with a different label exists in the corpus")
        rng = np.random.default_rng([seed, row])
        need = pool_size - len(negatives)
        if rest.size >= need:
            extra = rng.choice(rest, size=need, replace=False)
        else:
            everything = np.array(negatives + rest.tolist(), dtype=np.int64)
            extra = np.concatenate([rest, rng.choice(everything, size=need - rest.size, replace=True)])
        negatives = negatives + [int(i) for i in extra]
    return LccPool(index.case_ids[row], index.case_ids[same[0]], [index.case_ids[i] for i in negatives], backfilled)


def mine_lcc_pools(index: CorpusIndex, pool_size: int = LCC_POOL_SIZE, sweep_depth: int = DEFAULT_SWEEP_DEPTH,
                   seed: int = 0, workers: int = 1) -> LccMiningReport:
    """Mine a positive and ``pool_size`` hard negatives for every case in ``index``.

    Negatives are the top-ranked different-label cases among the first
    ``sweep_depth`` retrieved; short pools are topped up with seeded random
    different-label cases and flagged ``backfilled``. Anchors whose label pair
    has no other member are skipped.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    unit = _unit_rows(index.embeddings)
    rows = range(len(index))

    def work(r):
        return _mine_one(index, unit, r, pool_size, sweep_depth, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(work, rows))
    else:
        results = [work(r) for r in rows]
    pools, skipped = [], []
    for r, pool in zip(rows, results):
        if pool is None:
            skipped.append(index.case_ids[r])
        else:
            pools.append(pool)
    if skipped:
        logger.warning("skipped %d anchors without a same-label partner", len(skipped))
    return LccMiningReport(pools, skipped)


# -- decision pools ------------------------------------------------------------------


def train_miner_classifier(cases: Sequence[LegalCase], catalog: LabelCatalog, vocab: Vocabulary,
                           encoder_config: EncoderConfig | None = None,
                           config: FinetuneConfig | None = None) -> MinerClassifier:
    """Train article and charge heads (plus encoder) used to propose confusable labels."""
    if not cases:
        raise MiningError("empty training set")
    for task, labels in (("articles", {c.article_id for c in cases}), ("charges", {c.charge_id for c in cases})):
        if len(labels) < 2:
            raise MiningError(f"{task}: need at least 2 distinct labels to train a classifier")
    config = config or FinetuneConfig(tasks=("articles", "charges"))
    if set(config.tasks) != {"articles", "charges"}:
        config = FinetuneConfig(**{**config.__dict__, "tasks": ("articles", "charges")})
    encoder_config = encoder_config or EncoderConfig(vocab_size=len(vocab), seed=config.seed)
    model = init_params(encoder_config)
    heads = init_heads(encoder_config.proj_dim,
                       {t: task_label_ids(t, catalog) for t in ("articles", "charges")}, config.seed)
    seqs = [tokenize(c.fact_text, vocab) for c in cases]
    finetune(model, heads, seqs, cases, config)
    return MinerClassifier(model, heads, vocab)


def classifier_logits(clf: MinerClassifier, seqs: Sequence[TokenSequence]) -> dict[str, np.ndarray]:
    H, _ = encode_batch(clf.model, seqs, "fact")
    return {t: H @ h.W + h.b for t, h in clf.heads.items()}


def top_wrong_labels(logits: np.ndarray, label_ids: Sequence[int], true_label: int, n: int) -> list[int]:
    """The ``n`` highest-logit labels other than ``true_label``; ties go to the smaller id."""
    label_ids = np.asarray(label_ids)
    if len(label_ids) < n + 1:
        raise MiningError(f"need at least {n + 1} labels, catalog has {len(label_ids)}")
    order = np.lexsort((label_ids, -np.asarray(logits, dtype=np.float64)))
    return [int(label_ids[i]) for i in order if label_ids[i] != true_label][:n]


def mine_label_negatives(clf: MinerClassifier, case: LegalCase,
                         n: int = LABEL_NEGATIVES) -> tuple[list[int], list[int]]:
    logits = classifier_logits(clf, [tokenize(case.fact_text, clf.vocab)])
    arts = top_wrong_labels(logits["articles"][0], clf.heads["articles"].label_ids, case.article_id, n)
    chgs = top_wrong_labels(logits["charges"][0], clf.heads["charges"].label_ids, case.charge_id, n)
    return arts, chgs


def build_decision_pool(true_pair: tuple[int, int], neg_articles: Sequence[int], neg_charges: Sequence[int],
                        anchor_id: str = "") -> LdmPool:
    """All article x charge combinations of true-plus-negative labels, minus the true pair."""
    a_true, c_true = true_pair
    for name, negs, true in (("articles", neg_articles, a_true), ("charges", neg_charges, c_true)):
        if len(set(negs)) != len(negs):
            raise MiningError(f"duplicate negative {name}: {list(negs)}")
        if true in negs:
            raise MiningError(f"negative {name} contain the true label {true}")
    articles = sorted([a_true, *neg_articles])
    charges = sorted([c_true, *neg_charges])
    pairs = [(a, c) for a, c in product(articles, charges) if (a, c) != (a_true, c_true)]
    return LdmPool(anchor_id, (a_true, c_true), [int(a) for a in neg_articles], [int(c) for c in neg_charges], pairs)


def mine_ldm_pools(clf: MinerClassifier, cases: Sequence[LegalCase], n: int = LABEL_NEGATIVES,
                   batch_size: int = 256) -> list[LdmPool]:
    pools = []
    for start in range(0, len(cases), batch_size):
        chunk = cases[start:start + batch_size]
        logits = classifier_logits(clf, [tokenize(c.fact_text, clf.vocab) for c in chunk])
        for k, case in enumerate(chunk):
            arts = top_wrong_labels(logits["articles"][k], clf.heads["articles"].label_ids, case.article_id, n)
            chgs = top_wrong_labels(logits["charges"][k], clf.heads["charges"].label_ids, case.charge_id, n)
            pools.append(build_decision_pool(case.labels(), arts, chgs, case.case_id))
    return pools


# -- persistence -----------------------------------------------------------------------


def write_lcc_pools(path: str | Path, pools: Sequence[LccPool]) -> None:
    atomic_write_text(path, "".join(json.dumps(p.to_json()) + "\n" for p in pools))


def read_lcc_pools(path: str | Path) -> list[LccPool]:
    pools = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                pools.append(LccPool(str(o["anchor"]), str(o["positive"]), [str(x) for x in o["negatives"]],
                                     bool(o.get("backfilled", False))))
    return pools


def write_ldm_pools(path: str | Path, pools: Sequence[LdmPool]) -> None:
    atomic_write_text(path, "".join(json.dumps(p.to_json()) + "\n" for p in pools))


def read_ldm_pools(path: str | Path, cases: Sequence[LegalCase]) -> list[LdmPool]:
    """Read LDM pools; true labels come from ``cases`` since the file stores only negatives."""
    by_id = {c.case_id: c for c in cases}
    pools = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            o = json.loads(line)
            anchor = str(o["anchor"])
            if anchor not in by_id:
                raise MiningError(f"LDM pool anchor {anchor!r} is not in the corpus")
            pools.append(build_decision_pool(by_id[anchor].labels(), [int(x) for x in o["neg_articles"]],
                                             [int(x) for x in o["neg_charges"]], anchor))
    return pools
