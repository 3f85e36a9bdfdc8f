import numpy as np
import pytest

from duet.corpus import CatalogEntry, LabelCatalog, LegalCase
from duet.synth import SynthConfig, generate


def make_catalog(n_articles: int = 4, n_charges: int = 4) -> LabelCatalog:
    cat = LabelCatalog()
    for a in range(n_articles):
        cat.articles[a] = CatalogEntry(f"Article {100 + a}", f"whoever commits act {a} shall be punished")
    for c in range(n_charges):
        cat.charges[c] = CatalogEntry(f"Charge{c}", f"charge {c} means doing thing {c}")
    return cat


@pytest.fixture
def catalog():
    return make_catalog()


@pytest.fixture(scope="session")
def synth_corpus():
    """The default six-cluster synthetic corpus (1200 cases) and its catalog."""
    return generate(SynthConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def case(cid, text="a b c", article=0, charge=0, term=0) -> LegalCase:
    return LegalCase(cid, text, article, charge, term)
