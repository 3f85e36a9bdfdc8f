"""Deterministic synthetic corpus: six confusable charge clusters with overlapping vocabulary.

Charges come in three confusable pairs. Each pair shares a block of "group"
tokens, each charge owns a few signature tokens, and all facts draw most of
their words from a common pool. Facts also leak signature tokens of their
sibling charge, so the pairs overlap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import CatalogEntry, LabelCatalog, LegalCase, split_cases, term_bucket

CHARGE_NAMES = (
    "Provoking Troubles",
    "Robbery",
    "Fraud",
    "Intentional Homicide",
    "Theft",
    "Intentional Injury",
)
# confusable pairs (by charge id)
SIBLING = {0: 5, 5: 0, 1: 4, 4: 1, 2: 3, 3: 2}
GROUP = {0: 0, 5: 0, 1: 1, 4: 1, 2: 2, 3: 2}
BASE_MONTHS = {0: 8, 1: 48, 2: 30, 3: 180, 4: 12, 5: 24}
ARTICLE_NUMBERS = (293, 263, 266, 232, 264, 234)


@dataclass(frozen=True)
class SynthConfig:
    per_charge: int = 200
    seed: int = 0
    common_words: int = 300
    group_words: int = 25
    signature_words: int = 12
    min_len: int = 24
    max_len: int = 48
    group_rate: float = 0.18
    signature_rate: float = 0.07
    sibling_rate: float = 0.015
    cross_article_rate: float = 0.1


def _words(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i:03d}" for i in range(n)]


def generate(cfg: SynthConfig = SynthConfig()) -> tuple[list[LegalCase], LabelCatalog]:
    rng = np.random.default_rng(cfg.seed)
    common = _words("w", cfg.common_words)
    zipf = 1.0 / np.arange(1, cfg.common_words + 1)
    zipf /= zipf.sum()
    groups = [_words(f"g{g}x", cfg.group_words) for g in range(3)]
    sigs = [_words(f"s{c}x", cfg.signature_words) for c in range(6)]

    catalog = LabelCatalog()
    for c, name in enumerate(CHARGE_NAMES):
        art_words = " ".join(groups[GROUP[c]][:6] + sigs[c][:4])
        catalog.articles[c] = CatalogEntry(
            f"Article {ARTICLE_NUMBERS[c]}",
            f"Article {ARTICLE_NUMBERS[c]} Provision : whoever {art_words} shall be sentenced .",
        )
        def_words = " ".join(sigs[c][4:8] + groups[GROUP[c]][6:9])
        catalog.charges[c] = CatalogEntry(name, f"{name} Definition : {name} refers to {def_words} .")

    cases = []
    order = [(c, k) for c in range(6) for k in range(cfg.per_charge)]
    for n, (charge, _) in enumerate(order):
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        kinds = rng.random(length)
        toks = []
        for u in kinds:
            if u < cfg.signature_rate:
                toks.append(sigs[charge][int(rng.integers(cfg.signature_words))])
            elif u < cfg.signature_rate + cfg.sibling_rate:
                toks.append(sigs[SIBLING[charge]][int(rng.integers(cfg.signature_words))])
            elif u < cfg.signature_rate + cfg.sibling_rate + cfg.group_rate:
                toks.append(groups[GROUP[charge]][int(rng.integers(cfg.group_words))])
            else:
                toks.append(common[int(rng.choice(cfg.common_words, p=zipf))])
        article = SIBLING[charge] if rng.random() < cfg.cross_article_rate else charge
        months = max(0.0, BASE_MONTHS[charge] * float(rng.lognormal(0.0, 0.5)))
        cases.append(LegalCase(f"c{n:05d}", " ".join(toks), article, charge, term_bucket(months)))
    perm = rng.permutation(len(cases))
    return [cases[i] for i in perm], catalog


def split(cases: list[LegalCase], test_fraction: float, seed: int) -> tuple[list[LegalCase], list[LegalCase]]:
    return split_cases(cases, test_fraction, seed)
