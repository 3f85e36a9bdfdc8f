"""Case ingestion, filtering, vocabulary and tokenization."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, START = "[PAD]", "[UNK]", "[CLS]"
SPECIALS = (PAD, UNK, START)
PAD_ID, UNK_ID, START_ID = 0, 1, 2
DEFAULT_MAX_SEQ_LEN = 512
NUM_TERM_CLASSES = 11

# ASCII word runs stay whole; anything else that is not whitespace
# (CJK characters, punctuation) becomes a single-character token.
_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+|\S")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class LegalCase:
    case_id: str
    fact_text: str
    article_id: int
    charge_id: int
    term_id: int

    def labels(self) -> tuple[int, int]:
        return (self.article_id, self.charge_id)

    def to_json(self) -> dict:
        return {
            "case_id": self.case_id,
            "fact": self.fact_text,
            "article_id": self.article_id,
            "charge_id": self.charge_id,
            "term_id": self.term_id,
        }


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    text: str


@dataclass
class LabelCatalog:
    """Law-article texts and charge definitions keyed by label id."""

    articles: dict[int, CatalogEntry] = field(default_factory=dict)
    charges: dict[int, CatalogEntry] = field(default_factory=dict)

    def article_ids(self) -> list[int]:
        return sorted(self.articles)

    def charge_ids(self) -> list[int]:
        return sorted(self.charges)

    def texts(self) -> list[str]:
        out = []
        for table in (self.articles, self.charges):
            for key in sorted(table):
                out.append(table[key].name)
                out.append(table[key].text)
        return out

    def to_records(self) -> list[dict]:
        recs = []
        for kind, table in (("article", self.articles), ("charge", self.charges)):
            for key in sorted(table):
                recs.append({"kind": kind, "id": key, "name": table[key].name, "text": table[key].text})
        return recs


@dataclass
class Vocabulary:
    tokens: list[str]
    max_seq_len: int = DEFAULT_MAX_SEQ_LEN
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != SPECIALS:
            raise CorpusError(f"vocabulary must start with {SPECIALS}")
        if self.max_seq_len < 1:
            raise CorpusError("max_seq_len must be >= 1")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def detokenize(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids if i != PAD_ID]

    def save(self, path: str | Path) -> None:
        from .io import atomic_write_text

        atomic_write_text(path, json.dumps({"max_seq_len": self.max_seq_len, "tokens": self.tokens}, ensure_ascii=False))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(tokens=list(data["tokens"]), max_seq_len=int(data["max_seq_len"]))


@dataclass(frozen=True)
class TokenSequence:
    """Token ids with the start marker first; PAD entries are ignored by the encoder."""

    ids: np.ndarray

    @property
    def length(self) -> int:
        return int(np.count_nonzero(self.ids != PAD_ID))

    def padded(self, size: int) -> "TokenSequence":
        if size < len(self.ids):
            raise ValueError("cannot pad to a shorter length")
        out = np.full(size, PAD_ID, dtype=np.int64)
        out[: len(self.ids)] = self.ids
        return TokenSequence(out)


def split_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    toks = split_tokens(text)[: vocab.max_seq_len - 1]
    ids = [START_ID] + [vocab.id_of(t) for t in toks]
    return TokenSequence(np.asarray(ids, dtype=np.int64))


def build_vocab(cases: Iterable[LegalCase], catalog: LabelCatalog | None, max_vocab: int,
                max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> Vocabulary:
    if max_vocab < len(SPECIALS):
        raise CorpusError("max_vocab must leave room for the special tokens")
    counts: Counter[str] = Counter()
    for case in cases:
        counts.update(split_tokens(case.fact_text))
    if catalog is not None:
        for text in catalog.texts():
            counts.update(split_tokens(text))
    for special in SPECIALS:
        counts.pop(special, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_vocab - len(SPECIALS)]]
    return Vocabulary(tokens=list(SPECIALS) + kept, max_seq_len=max_seq_len)


def _parse_case(obj: dict) -> LegalCase:
    return LegalCase(
        case_id=str(obj["case_id"]),
        fact_text=str(obj["fact"]),
        article_id=int(obj["article_id"]),
        charge_id=int(obj["charge_id"]),
        term_id=int(obj["term_id"]),
    )


def read_cases(path: str | Path) -> tuple[list[LegalCase], list[int]]:
    """Parse a cases JSONL file; returns the cases and the 1-based numbers of skipped lines."""
    cases, skipped = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if isinstance(obj["article_id"], bool) or isinstance(obj["charge_id"], bool):
                    raise TypeError("boolean label")
                cases.append(_parse_case(obj))
            except (ValueError, KeyError, TypeError) as exc:
                logger.warning("%s:%d: skipping malformed case (%s)", path, lineno, exc)
                skipped.append(lineno)
    return cases, skipped


def read_catalog(path: str | Path) -> tuple[LabelCatalog, list[int]]:
    catalog, skipped = LabelCatalog(), []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                kind, key = obj["kind"], int(obj["id"])
                entry = CatalogEntry(name=str(obj["name"]), text=str(obj["text"]))
                if not entry.name.strip() or not entry.text.strip():
                    raise ValueError("empty name or text")
                if kind == "article":
                    catalog.articles[key] = entry
                elif kind == "charge":
                    catalog.charges[key] = entry
                else:
                    raise ValueError(f"unknown kind {kind!r}")
            except (ValueError, KeyError, TypeError) as exc:
                logger.warning("%s:%d: skipping malformed catalog entry (%s)", path, lineno, exc)
                skipped.append(lineno)
    return catalog, skipped


def check_catalog_coverage(cases: Iterable[LegalCase], catalog: LabelCatalog) -> None:
    for case in cases:
        if case.article_id not in catalog.articles:
            raise CorpusError(f"case {case.case_id}: article {case.article_id} not in catalog")
        if case.charge_id not in catalog.charges:
            raise CorpusError(f"case {case.case_id}: charge {case.charge_id} not in catalog")


def load_corpus(path: str | Path, catalog_path: str | Path) -> tuple[list[LegalCase], LabelCatalog, int]:
    """Load cases and catalog. Returns ``(cases, catalog, n_skipped)``.

    Malformed lines in either file are logged and skipped; a case whose labels
    are missing from the catalog is fatal.
    """
    for p in (path, catalog_path):
        if not Path(p).is_file():
            raise FileNotFoundError(p)
    cases, bad_cases = read_cases(path)
    catalog, bad_catalog = read_catalog(catalog_path)
    check_catalog_coverage(cases, catalog)
    return cases, catalog, len(bad_cases) + len(bad_catalog)


def write_cases(path: str | Path, cases: Iterable[LegalCase]) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, "".join(json.dumps(c.to_json(), ensure_ascii=False) + "\n" for c in cases))


def write_catalog(path: str | Path, catalog: LabelCatalog) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in catalog.to_records()))


def filter_cases(cases: list[LegalCase], min_tokens: int, min_label_count: int) -> list[LegalCase]:
    """Drop short cases, multi-label cases and cases with rare labels.

    A case_id seen with more than one distinct (article, charge) pair is
    dropped entirely. Rare-label removal repeats until no label falls below
    ``min_label_count``.
    """
    if min_tokens < 0 or min_label_count < 0:
        raise ValueError("thresholds must be non-negative")

    label_sets: dict[str, set[tuple[int, int]]] = defaultdict(set)
    for c in cases:
        label_sets[c.case_id].add(c.labels())
    seen: set[str] = set()
    kept = []
    for c in cases:
        if len(label_sets[c.case_id]) > 1 or c.case_id in seen:
            continue
        seen.add(c.case_id)
        if len(split_tokens(c.fact_text)) < min_tokens:
            continue
        kept.append(c)

    while True:
        arts = Counter(c.article_id for c in kept)
        chgs = Counter(c.charge_id for c in kept)
        nxt = [c for c in kept if arts[c.article_id] >= min_label_count and chgs[c.charge_id] >= min_label_count]
        if len(nxt) == len(kept):
            return nxt
        kept = nxt


def term_bucket(months: float, boundaries: tuple[float, ...] | None = None) -> int:
    """Map a prison term in months onto one of the 11 term classes.

    ``boundaries`` are inclusive upper bounds for classes 0..9; anything
    longer lands in class 10.
    """
    if boundaries is None:
        boundaries = (0, 6, 9, 12, 24, 36, 60, 84, 120, 300)
    if len(boundaries) != NUM_TERM_CLASSES - 1:
        raise ValueError("need exactly 10 boundaries")
    for i, b in enumerate(boundaries):
        if months <= b:
            return i
    return NUM_TERM_CLASSES - 1


def split_cases(cases: list[LegalCase], fraction: float, seed: int) -> tuple[list[LegalCase], list[LegalCase]]:
    """Seeded two-way split; returns ``(rest, held_out)`` with ``round(n * fraction)`` held out.

    Both parts keep the input order.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    rng = np.random.default_rng([seed, 7])
    n_out = int(round(len(cases) * fraction))
    out_idx = set(rng.permutation(len(cases))[:n_out].tolist())
    rest = [c for i, c in enumerate(cases) if i not in out_idx]
    held = [c for i, c in enumerate(cases) if i in out_idx]
    return rest, held
