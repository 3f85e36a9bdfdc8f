import pytest

from duet.corpus import CatalogEntry, LabelCatalog, build_vocab, tokenize
from duet.verbalizer import DEFAULT_TEMPLATE, UnknownLabelError, render_decision, validate_template

from conftest import make_catalog


@pytest.fixture
def table4():
    cat = LabelCatalog()
    cat.articles[234] = CatalogEntry("Article 234", "Whoever intentionally injures another person shall be sentenced.")
    cat.charges[7] = CatalogEntry("Intentional Injury", "Intentional Injury refers to harming the body of another.")
    cat.charges[8] = CatalogEntry("Affray", "Affray refers to gathering people to fight.")
    return cat


class TestRender:
    def test_components(self, table4):
        text = render_decision(234, 7, table4).text
        assert text.startswith("Article 234.") and text.endswith("Charge: Intentional Injury.")

    def test_exact_format(self, table4):
        d = render_decision(234, 7, table4)
        assert d.text == ("Article 234. Whoever intentionally injures another person shall be sentenced. "
                          "Intentional Injury refers to harming the body of another. Charge: Intentional Injury.")
        assert (d.article_id, d.charge_id) == (234, 7)

    def test_deterministic(self, table4):
        assert render_decision(234, 7, table4) == render_decision(234, 7, table4)

    def test_charge_change_touches_only_charge_parts(self, table4):
        a, b = render_decision(234, 7, table4).text, render_decision(234, 8, table4).text
        prefix = "Article 234. Whoever intentionally injures another person shall be sentenced. "
        assert a.startswith(prefix) and b.startswith(prefix)
        assert a[len(prefix):] == "Intentional Injury refers to harming the body of another. Charge: Intentional Injury."
        assert b[len(prefix):] == "Affray refers to gathering people to fight. Charge: Affray."

    @pytest.mark.parametrize("art,chg", [(1, 7), (234, 99)])
    def test_unknown(self, table4, art, chg):
        with pytest.raises(UnknownLabelError):
            render_decision(art, chg, table4)

    def test_injective_and_long_enough(self):
        cat = make_catalog(4, 4)
        texts = {render_decision(a, c, cat).text for a in range(4) for c in range(4)}
        assert len(texts) == 16
        vocab = build_vocab([], cat, 500)
        assert all(tokenize(t, vocab).length >= 4 for t in texts)

    def test_custom_template(self, table4):
        tpl = "<{article_name}|{article_content}|{charge_definition}|{charge_name}>"
        assert render_decision(234, 8, table4, tpl).text.startswith("<Article 234|")


class TestTemplate:
    def test_default_valid(self):
        validate_template(DEFAULT_TEMPLATE)

    @pytest.mark.parametrize("tpl", ["{article_name} {charge_name}",
                                     "{charge_name} {article_name} {article_content} {charge_definition}"])
    def test_invalid(self, tpl):
        with pytest.raises(ValueError):
            validate_template(tpl)
