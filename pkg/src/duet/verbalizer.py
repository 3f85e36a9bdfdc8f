"""Render (law article, charge) pairs into decision text."""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import LabelCatalog

DEFAULT_TEMPLATE = "{article_name}. {article_content} {charge_definition} Charge: {charge_name}."
_PLACEHOLDERS = ("{article_name}", "{article_content}", "{charge_definition}", "{charge_name}")


class UnknownLabelError(KeyError):
    pass


@dataclass(frozen=True)
class LegalDecision:
    article_id: int
    charge_id: int
    text: str


def validate_template(template: str) -> None:
    positions = [template.find(p) for p in _PLACEHOLDERS]
    if any(p < 0 for p in positions):
        raise ValueError(f"template must contain all of {_PLACEHOLDERS}")
    if positions != sorted(positions):
        raise ValueError("template placeholders must appear in article-name, content, definition, charge-name order")


def render_decision(article_id: int, charge_id: int, catalog: LabelCatalog,
                    template: str = DEFAULT_TEMPLATE) -> LegalDecision:
    try:
        article = catalog.articles[article_id]
    except KeyError:
        raise UnknownLabelError(f"unknown article {article_id}") from None
    try:
        charge = catalog.charges[charge_id]
    except KeyError:
        raise UnknownLabelError(f"unknown charge {charge_id}") from None
    text = template.format(
        article_name=article.name,
        article_content=article.text,
        charge_definition=charge.text,
        charge_name=charge.name,
    )
    return LegalDecision(article_id, charge_id, text)
