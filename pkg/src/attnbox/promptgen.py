"""Prompt and query construction: label remapping, templates, captions.

Builds the conditioning prompt for the detector (template or caption mode)
and the query text sent to the vision-language model for each proposal
strategy.  The engine never tokenizes; caption handling trusts the
producer-supplied token offset of the label.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ValidationError

TOKEN_BUDGET = 75

# Classes rendered with an indefinite article in the template.
ARTICLE_LABELS = frozenset({"person", "baby", "naked person"})

QUERY_KINDS = ("choice-artdl", "choice-iconart", "score", "per-class")

_CHOICE_ARTDL = "Who is in the painting? Choose from the following: {classes}"
_CHOICE_ICONART = "Which of the options are in the painting? Choose from the following: {classes}"
_SCORE = (
    "Which of the Christian iconographic symbols are in the painting? "
    "Choose from the following: {classes}\n"
    "For each symbol, give a score from 0 to 1 of how confident you are.\n"
    "Put your answer in a dictionary first and then reason your answer.\n"
    "Be as accurate as possible.\n"
    "If none of the symbols are present, output 'None'"
)
_PER_CLASS = "Is {label} in the painting?"


@dataclass(frozen=True)
class LabelRemapTable:
    """Ordered (source, rendered) pairs; unlisted labels map to themselves."""

    pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        sources = [src for src, _ in self.pairs]
        if len(set(sources)) != len(sources):
            raise ValidationError("remap table: duplicate source labels")

    def apply(self, label: str) -> str:
        for source, rendered in self.pairs:
            if source == label:
                return rendered
        return label


# Rendered class names used when the original dataset labels are too
# abstract or too specific for the text encoder.
ICONART_REMAP = LabelRemapTable(
    pairs=(
        ("Saint Sebastien", "person"),
        ("child Jesus", "baby"),
        ("nudity", "naked person"),
    )
)


@dataclass(frozen=True)
class PromptSpec:
    """A conditioning prompt plus how it was built."""

    text: str
    rendered_label: str
    mode: str  # "template" | "caption"
    fallback: bool = False

    def __post_init__(self):
        if not self.text:
            raise ValidationError("empty prompt")
        if self.rendered_label.lower() not in self.text.lower():
            raise ValidationError(
                f"prompt {self.text!r} does not contain label {self.rendered_label!r}"
            )


def remap_label(label: str, table: LabelRemapTable = ICONART_REMAP) -> str:
    return table.apply(label)


def template_prompt(rendered_label: str) -> PromptSpec:
    """"A painting of X", with an article for the handful that need one."""
    if not rendered_label:
        raise ValidationError("empty label")
    if rendered_label in ARTICLE_LABELS:
        text = f"A painting of a {rendered_label}"
    else:
        text = f"A painting of {rendered_label}"
    return PromptSpec(text=text, rendered_label=rendered_label, mode="template")


def caption_prompt(
    caption: str,
    rendered_label: str,
    token_budget: int = TOKEN_BUDGET,
    label_token_start: int | None = None,
) -> PromptSpec:
    """Use the caption as-is when it contains the label early enough.

    ``label_token_start`` is the producer-reported token index of the
    label inside the caption (None when absent).  When the label is
    missing or starts at or beyond the budget, the template is prepended;
    the caption itself is never discarded.
    """
    contained = rendered_label.lower() in caption.lower()
    if contained and label_token_start is not None and label_token_start < token_budget:
        return PromptSpec(text=caption, rendered_label=rendered_label, mode="caption")
    template = template_prompt(rendered_label)
    return PromptSpec(
        text=f"{template.text}. {caption}",
        rendered_label=rendered_label,
        mode="caption",
        fallback=True,
    )


def build_vlm_query(vocabulary: Sequence[str], kind: str) -> str | list[str]:
    """Query text for a proposal strategy; per-class returns one per label."""
    if not vocabulary:
        raise ValidationError("empty vocabulary")
    classes = ", ".join(vocabulary)
    if kind == "choice-artdl":
        return _CHOICE_ARTDL.format(classes=classes)
    if kind == "choice-iconart":
        return _CHOICE_ICONART.format(classes=classes)
    if kind == "score":
        return _SCORE.format(classes=classes)
    if kind == "per-class":
        return [_PER_CLASS.format(label=label) for label in vocabulary]
    raise ValidationError(f"unknown query kind {kind!r}; expected one of {QUERY_KINDS}")
