import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from attnbox.dataio import AttentionStack, EmbeddingMatrix


def random_stack(rng: np.random.Generator, image_id: str = "img") -> AttentionStack:
    """A small random stack with mixed grids and multi-token spans."""
    j = int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    t = int(rng.integers(2, 6))
    grids = [(int(rng.integers(2, 9)), int(rng.integers(2, 9))) for _ in range(k)]
    data = tuple(
        tuple(
            rng.uniform(0, 1, size=(t, h, w)).astype(np.float32) for h, w in grids
        )
        for _ in range(j)
    )
    n_span = int(rng.integers(1, t + 1))
    tokens = rng.choice(t, size=n_span, replace=False)
    spans = {"alpha": tuple(int(x) for x in tokens), "beta": (0,)}
    return AttentionStack(image_id=image_id, label_spans=spans, data=data)


def random_embeddings(rng: np.random.Generator, n: int | None = None, d: int | None = None) -> EmbeddingMatrix:
    n = n or int(rng.integers(1, 30))
    d = d or int(rng.integers(1, 40))
    return EmbeddingMatrix(
        ids=tuple(f"e{i}" for i in range(n)),
        values=rng.standard_normal((n, d)).astype(np.float32),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
