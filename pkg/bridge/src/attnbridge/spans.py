"""Token span computation: where a label's tokens sit inside a prompt.

Spans are computed by the bridge (the producer) from the conditioning
tokenizer's output; the engine never tokenizes.
"""
from __future__ import annotations

from typing import Sequence

from .nada1_writer import BridgeExportError


def find_span(prompt_tokens: Sequence, label_tokens: Sequence) -> tuple[int, ...]:
    """Indices of the first occurrence of label_tokens inside prompt_tokens.

    Tokens can be strings or ids, anything comparable with ==.  Raises
    BridgeExportError when the label is not present, so callers fail
    before any model work starts.
    """
    n = len(label_tokens)
    if n == 0:
        raise BridgeExportError("label tokenized to nothing")
    for start in range(len(prompt_tokens) - n + 1):
        if all(prompt_tokens[start + i] == label_tokens[i] for i in range(n)):
            return tuple(range(start, start + n))
    raise BridgeExportError(
        f"label tokens {list(label_tokens)!r} not found in prompt tokens"
    )


def compute_label_spans(
    prompt_tokens: Sequence,
    labels_to_tokens: dict[str, Sequence],
) -> dict[str, tuple[int, ...]]:
    """Span per label; every label must occur in the prompt."""
    return {
        label: find_span(prompt_tokens, tokens)
        for label, tokens in labels_to_tokens.items()
    }
