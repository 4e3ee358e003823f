"""Deterministic stand-in backends: no models, no weights, no GPU.

Outputs are derived from a stable hash of the inputs, so repeated runs
produce identical metadata and payloads.  These back the conformance
tests and pipeline dry-runs; the shapes and invariants match what the
real backends produce.
"""
from __future__ import annotations

import hashlib
import string

import numpy as np

DEFAULT_GRIDS = ((64, 64), (32, 32), (16, 16), (8, 8))
DEFAULT_HEADS = 4


def _seed_from(*parts) -> int:
    digest = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


def word_tokenize(text: str) -> list[str]:
    """Lowercased words with surrounding punctuation stripped."""
    tokens = []
    for raw in text.lower().split():
        word = raw.strip(string.punctuation)
        if word:
            tokens.append(word)
    return tokens


class SyntheticDiffusion:
    """Emits plausible cross-attention blocks for any image and prompt."""

    name = "synthetic"

    def __init__(self, grids=DEFAULT_GRIDS, heads: int = DEFAULT_HEADS, seed: int = 0):
        self.grids = tuple(grids)
        self.heads = heads
        self.seed = seed

    def tokenize(self, text: str) -> list[str]:
        return word_tokenize(text)

    def attention_blocks(self, image_ref: str, prompt: str,
                         inversion_steps: int, reconstruction_steps: int):
        """Yield per-head blocks of shape (heads, T, H_k, W_k), timestep-major.

        The inversion step count participates in the seed, mirroring how a
        different inversion changes the real reconstruction trace.
        """
        t = len(self.tokenize(prompt))
        for j in range(reconstruction_steps):
            for k, (h, w) in enumerate(self.grids):
                rng = np.random.default_rng(
                    _seed_from(self.seed, image_ref, prompt, inversion_steps, j, k)
                )
                yield rng.random((self.heads, t, h, w), dtype=np.float32)


class SyntheticEncoder:
    """Unit-norm embeddings derived from the item id alone."""

    name = "synthetic"

    def __init__(self, dim: int = 512, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def encode_image(self, image_ref: str) -> np.ndarray:
        rng = np.random.default_rng(_seed_from(self.seed, "image", image_ref))
        vec = rng.standard_normal(self.dim)
        return (vec / np.linalg.norm(vec)).astype(np.float32)

    def encode_text(self, text: str) -> np.ndarray:
        rng = np.random.default_rng(_seed_from(self.seed, "text", text))
        vec = rng.standard_normal(self.dim)
        return (vec / np.linalg.norm(vec)).astype(np.float32)


class SyntheticVlm:
    """Canned-but-deterministic replies shaped like real transcripts."""

    name = "synthetic"

    def __init__(self, classes=(), seed: int = 0):
        self.classes = tuple(classes)
        self.seed = seed

    def respond(self, image_ref: str, query: str) -> str:
        rng = np.random.default_rng(_seed_from(self.seed, image_ref, query))
        if query.startswith("Is ") and query.endswith(" in the painting?"):
            return "Yes, it is." if rng.uniform() < 0.5 else "No, it is not."
        if "score from 0 to 1" in query:
            if not self.classes or rng.uniform() < 0.2:
                return "None"
            scored = {c: round(float(rng.uniform()), 2) for c in self.classes}
            body = ", ".join(f'"{c}": {s}' for c, s in scored.items())
            return "{" + body + "} based on the composition."
        if self.classes:
            pick = self.classes[int(rng.integers(0, len(self.classes)))]
            return f"The painting shows {pick}."
        return "The painting shows a figure."

    def caption(self, image_ref: str, label: str) -> str:
        rng = np.random.default_rng(_seed_from(self.seed, "caption", image_ref, label))
        scenery = ("by candlelight", "under a stormy sky", "in a gilded interior",
                   "beside a river", "among onlookers")
        where = scenery[int(rng.integers(0, len(scenery)))]
        return f"A somber scene with {label} {where}."
