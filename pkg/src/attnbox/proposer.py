"""Per-image class proposals: trained MLP, transcript parsers, baselines.

The MLP path is self-contained numpy in double precision: Glorot-uniform
init, ReLU hidden layers, softmax cross-entropy or per-class sigmoid BCE,
decoupled-weight-decay adaptive-moment updates.  Training is bit
deterministic for a fixed seed (single-threaded batch loop, seeded
shuffles, last partial batch kept).

Transcript parsers never crash on arbitrary text: malformed score
dictionaries raise TranscriptParseError with the failing offset and are
counted (not fatal) by the batch driver.
"""
from __future__ import annotations

import re
import string
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataio.nada1 import (
    KIND_MLP_CHECKPOINT,
    RecordReader,
    _open_sink,
    _open_source,
    encode_header,
)
from .dataio.streams import TranscriptRecord
from .dataio.types import EmbeddingMatrix, ImageRecord
from .errors import FormatError, TranscriptParseError, ValidationError

HIDDEN_DIM = 384
SCORE_TAU = 0.5
CLIP_SIMILARITY_THRESHOLD = 0.28
MULTI_LABEL_THRESHOLD = 0.5

HEAD_SINGLE = "single"
HEAD_MULTI = "multi"

LOSS_CROSS_ENTROPY = "cross_entropy"
LOSS_BCE = "bce"

_YES_WORD = re.compile(r"\byes\b", re.IGNORECASE)


@dataclass
class ProposalSet:
    """Labels proposed for one image, each with a score in [0, 1]."""

    image_id: str
    entries: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        self.entries = tuple((str(l), float(s)) for l, s in self.entries)
        labels = [l for l, _ in self.entries]
        if len(set(labels)) != len(labels):
            raise ValidationError(f"proposals for {self.image_id}: duplicate labels")
        for label, score in self.entries:
            if not 0.0 <= score <= 1.0:
                raise ValidationError(
                    f"proposals for {self.image_id}: score {score} for {label!r} outside [0, 1]"
                )

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(l for l, _ in self.entries)


# ---------------------------------------------------------------------------
# MLP classifier
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MlpModel:
    """Fully connected ReLU network in float64, weights stored (out, in)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = HEAD_SINGLE

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        self.validate()

    def validate(self):
        if self.head not in (HEAD_SINGLE, HEAD_MULTI):
            raise ValidationError(f"unknown head mode {self.head!r}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValidationError("model needs matching weight/bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValidationError(f"layer {i}: inconsistent weight/bias shapes")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValidationError(f"layer {i}: dimension chain broken")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {i}: non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def forward(self, x: np.ndarray) -> list[np.ndarray]:
        """Activations per layer; index 0 is the input, last is the logits."""
        acts = [np.asarray(x, dtype=np.float64)]
        h = acts[0]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = z if i == len(self.weights) - 1 else np.maximum(z, 0.0)
            acts.append(h)
        return acts


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 512
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    loss: str = LOSS_CROSS_ENTROPY
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValidationError("train config: epochs >= 0, batch >= 1, lr > 0 required")
        if self.loss not in (LOSS_CROSS_ENTROPY, LOSS_BCE):
            raise ValidationError(f"unknown loss {self.loss!r}")


@dataclass
class TrainResult:
    model: MlpModel
    epoch_losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


def init_mlp(input_dim: int, output_dim: int, layers: int, head: str, seed: int) -> MlpModel:
    """Glorot-uniform weights, zero biases; `layers` counts affine layers."""
    if layers < 1:
        raise ValidationError("model needs at least one layer")
    dims = [input_dim] + [HIDDEN_DIM] * (layers - 1) + [output_dim]
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights=weights, biases=biases, head=head)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def compute_loss(model: MlpModel, x: np.ndarray, targets: np.ndarray, loss: str) -> float:
    """Mean loss over a batch; targets are class indices (CE) or 0/1 (BCE)."""
    logits = model.forward(x)[-1]
    if loss == LOSS_CROSS_ENTROPY:
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        picked = shifted[np.arange(len(targets)), targets]
        return float((log_z - picked).mean())
    y = np.asarray(targets, dtype=np.float64)
    # Stable elementwise BCE on logits: max(z,0) - z*y + log(1 + exp(-|z|)).
    per = np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    return float(per.mean())


def loss_and_gradients(
    model: MlpModel, x: np.ndarray, targets: np.ndarray, loss: str
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Backprop; returns (loss, weight grads, bias grads)."""
    acts = model.forward(x)
    logits = acts[-1]
    n = x.shape[0]
    if loss == LOSS_CROSS_ENTROPY:
        probs = _softmax(logits)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        value = float((log_z - shifted[np.arange(n), targets]).mean())
        delta = probs
        delta[np.arange(n), targets] -= 1.0
        delta /= n
    elif loss == LOSS_BCE:
        y = np.asarray(targets, dtype=np.float64)
        per = np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
        value = float(per.mean())
        delta = (_sigmoid(logits) - y) / per.size
    else:
        raise ValidationError(f"unknown loss {loss!r}")

    grads_w: list[np.ndarray] = [np.empty(0)] * len(model.weights)
    grads_b: list[np.ndarray] = [np.empty(0)] * len(model.biases)
    g = delta
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = g.T @ acts[i]
        grads_b[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ model.weights[i]) * (acts[i] > 0)
    return value, grads_w, grads_b


def wscp_train(
    embeddings: EmbeddingMatrix,
    labels_by_id: Mapping[str, Sequence[str] | str],
    classes: Sequence[str],
    layers: int,
    head: str,
    config: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Train the embedding classifier; deterministic for a fixed seed."""
    classes = list(classes)
    class_index = {c: i for i, c in enumerate(classes)}
    ids = []
    for image_id in labels_by_id:
        if image_id not in embeddings.ids:
            raise ValidationError(f"labeled id {image_id!r} missing from embedding matrix")
        ids.append(image_id)
    if not ids:
        raise ValidationError("no labeled examples to train on")

    row_index = {item_id: i for i, item_id in enumerate(embeddings.ids)}
    x = embeddings.values[[row_index[i] for i in ids]].astype(np.float64)

    if head == HEAD_SINGLE:
        targets = np.empty(len(ids), dtype=np.int64)
        for pos, image_id in enumerate(ids):
            image_labels = labels_by_id[image_id]
            if isinstance(image_labels, str):
                image_labels = [image_labels]
            if len(image_labels) != 1:
                raise ValidationError(
                    f"single-label training needs exactly one label per image, "
                    f"{image_id!r} has {len(image_labels)}"
                )
            label = image_labels[0]
            if label not in class_index:
                raise ValidationError(f"unknown label {label!r} for {image_id!r}")
            targets[pos] = class_index[label]
    elif head == HEAD_MULTI:
        targets = np.zeros((len(ids), len(classes)), dtype=np.float64)
        for pos, image_id in enumerate(ids):
            image_labels = labels_by_id[image_id]
            if isinstance(image_labels, str):
                image_labels = [image_labels]
            for label in image_labels:
                if label not in class_index:
                    raise ValidationError(f"unknown label {label!r} for {image_id!r}")
                targets[pos, class_index[label]] = 1.0
    else:
        raise ValidationError(f"unknown head mode {head!r}")

    model = init_mlp(embeddings.dim, len(classes), layers, head, config.seed)
    params = model.weights + model.biases
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(config.seed)
    step = 0
    epoch_losses: list[float] = []
    n = len(ids)
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            batch = perm[start : start + config.batch_size]
            value, grads_w, grads_b = loss_and_gradients(
                model, x[batch], targets[batch], config.loss
            )
            epoch_loss += value * len(batch)
            step += 1
            correction1 = 1.0 - config.beta1**step
            correction2 = 1.0 - config.beta2**step
            for p, m, v, g in zip(params, m_state, v_state, grads_w + grads_b):
                m += (1.0 - config.beta1) * (g - m)
                v += (1.0 - config.beta2) * (g * g - v)
                p *= 1.0 - config.learning_rate * config.weight_decay
                p -= config.learning_rate * (m / correction1) / (
                    np.sqrt(v / correction2) + config.eps
                )
        epoch_losses.append(epoch_loss / n)
    model.validate()
    return TrainResult(model=model, epoch_losses=epoch_losses)


def wscp_infer(model: MlpModel, embedding: np.ndarray) -> np.ndarray:
    """Per-class scores: softmax for single-label, sigmoid for multi-label."""
    vec = np.asarray(embedding, dtype=np.float64)
    if vec.ndim == 1:
        vec = vec[None, :]
        squeeze = True
    else:
        squeeze = False
    if vec.shape[1] != model.input_dim:
        raise ValidationError(
            f"embedding dim {vec.shape[1]} does not match model input {model.input_dim}"
        )
    logits = model.forward(vec)[-1]
    scores = _softmax(logits) if model.head == HEAD_SINGLE else _sigmoid(logits)
    return scores[0] if squeeze else scores


def select_labels(
    image_id: str,
    scores: np.ndarray,
    classes: Sequence[str],
    head: str,
    threshold: float = MULTI_LABEL_THRESHOLD,
) -> ProposalSet:
    """Decision rule: argmax (single-label) or score > threshold (multi)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(classes),):
        raise ValidationError("scores length does not match class list")
    if head == HEAD_SINGLE:
        best = int(np.argmax(scores))  # ties resolve to the lowest index
        return ProposalSet(image_id=image_id, entries=((classes[best], float(scores[best])),))
    if head == HEAD_MULTI:
        entries = tuple(
            (classes[i], float(scores[i])) for i in range(len(classes)) if scores[i] > threshold
        )
        return ProposalSet(image_id=image_id, entries=entries)
    raise ValidationError(f"unknown head mode {head!r}")


# ---------------------------------------------------------------------------
# Transcript parsing
# ---------------------------------------------------------------------------


def _trimmed(label: str) -> str:
    return label.strip(string.punctuation + string.whitespace).lower()


def zscp_parse_choice(transcript: TranscriptRecord, vocabulary: Sequence[str]) -> ProposalSet:
    """Containment scan of vocabulary labels in the response, longest first.

    A matched span is claimed so shorter overlapping labels cannot also
    match inside it; matched labels get score 1.0.
    """
    if transcript.kind != "choice":
        raise ValidationError(f"expected a choice transcript, got {transcript.kind!r}")
    text = transcript.response.lower()
    claimed: list[tuple[int, int]] = []
    matched: list[str] = []
    for label in sorted(vocabulary, key=lambda l: (-len(_trimmed(l)), vocabulary.index(l))):
        needle = _trimmed(label)
        if not needle:
            continue
        found = False
        start = 0
        while True:
            pos = text.find(needle, start)
            if pos < 0:
                break
            end = pos + len(needle)
            if all(end <= c0 or pos >= c1 for c0, c1 in claimed):
                claimed.append((pos, end))
                found = True
            start = pos + 1
        if found:
            matched.append(label)
    ordered = [label for label in vocabulary if label in matched]
    return ProposalSet(image_id=transcript.image_id, entries=tuple((l, 1.0) for l in ordered))


_NUMBER = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?$")


def _parse_score_dict(response: str) -> dict[str, float] | None:
    """First balanced {...} in the response as label->number, None if absent.

    Raises TranscriptParseError (with offset into the response) when a
    dictionary is present but an entry is not a label: number pair.
    """
    start = response.find("{")
    if start < 0:
        return None
    depth = 0
    end = -1
    for pos in range(start, len(response)):
        ch = response[pos]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                end = pos
                break
    if end < 0:
        raise TranscriptParseError("unbalanced dictionary braces", start)
    body = response[start + 1 : end]
    result: dict[str, float] = {}
    cursor = start + 1
    for item in body.split(","):
        offset = cursor
        cursor += len(item) + 1
        if not item.strip():
            continue
        if ":" not in item:
            raise TranscriptParseError(f"entry {item.strip()!r} has no ':'", offset)
        key, _, value = item.partition(":")
        key = key.strip().strip("\"'").strip()
        value = value.strip().strip("\"'").strip()
        if not key:
            raise TranscriptParseError("entry with empty label", offset)
        if not _NUMBER.match(value):
            raise TranscriptParseError(f"score {value!r} is not a number", offset)
        result[key] = float(value)
    return result


def zscp_parse_score(
    transcript: TranscriptRecord,
    vocabulary: Sequence[str],
    tau: float = SCORE_TAU,
) -> ProposalSet:
    """Parse a score-prompt response; keep labels with score strictly > tau.

    Scores outside [0, 1] are clipped.  A literal "None" reply or a reply
    without any dictionary yields an empty set.
    """
    if transcript.kind != "score":
        raise ValidationError(f"expected a score transcript, got {transcript.kind!r}")
    scores = _parse_score_dict(transcript.response)
    if scores is None:
        return ProposalSet(image_id=transcript.image_id, entries=())
    by_lower = {label.lower(): label for label in vocabulary}
    entries = []
    seen = set()
    for key, value in scores.items():
        label = by_lower.get(key.strip().lower())
        if label is None or label in seen:
            continue
        seen.add(label)
        clipped = min(max(value, 0.0), 1.0)
        if clipped > tau:
            entries.append((label, clipped))
    return ProposalSet(image_id=transcript.image_id, entries=tuple(entries))


def yesno_parse(transcript: TranscriptRecord) -> bool:
    """True iff the response contains "yes" as a standalone word."""
    if transcript.kind != "yesno":
        raise ValidationError(f"expected a yesno transcript, got {transcript.kind!r}")
    return _YES_WORD.search(transcript.response) is not None


def propose_from_transcripts(
    transcripts: Iterable[TranscriptRecord],
    vocabulary: Sequence[str],
    kind: str,
    tau: float = SCORE_TAU,
) -> tuple[list[ProposalSet], int]:
    """Batch-parse transcripts of one kind; returns (proposals, skip count).

    Malformed score records are skipped and counted, never fatal.  For the
    per-class yes/no kind, one transcript per (image, label) is expected
    and positives accumulate into the image's proposal set.
    """
    skipped = 0
    if kind in ("choice", "score"):
        by_image: dict[str, ProposalSet] = {}
        for rec in transcripts:
            if rec.kind != kind:
                raise ValidationError(f"transcript kind {rec.kind!r} does not match {kind!r}")
            try:
                if kind == "choice":
                    by_image[rec.image_id] = zscp_parse_choice(rec, vocabulary)
                else:
                    by_image[rec.image_id] = zscp_parse_score(rec, vocabulary, tau)
            except TranscriptParseError:
                skipped += 1
        return list(by_image.values()), skipped
    if kind == "yesno":
        positives: dict[str, list[str]] = {}
        vocab_set = set(vocabulary)
        for rec in transcripts:
            if rec.kind != "yesno":
                raise ValidationError(f"transcript kind {rec.kind!r} does not match 'yesno'")
            if rec.label is None or rec.label not in vocab_set:
                skipped += 1
                continue
            positives.setdefault(rec.image_id, [])
            if yesno_parse(rec) and rec.label not in positives[rec.image_id]:
                positives[rec.image_id].append(rec.label)
        return [
            ProposalSet(image_id=image_id, entries=tuple((l, 1.0) for l in labels))
            for image_id, labels in positives.items()
        ], skipped
    raise ValidationError(f"unknown transcript kind {kind!r}")


# ---------------------------------------------------------------------------
# Similarity and oracle proposers
# ---------------------------------------------------------------------------


def clip_propose(
    image_id: str,
    image_embedding: np.ndarray,
    class_embeddings: EmbeddingMatrix,
    threshold: float = CLIP_SIMILARITY_THRESHOLD,
) -> ProposalSet:
    """Cosine-similarity proposer: keep classes strictly above the threshold."""
    vec = np.asarray(image_embedding, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != class_embeddings.dim:
        raise ValidationError("image embedding dimension mismatch")
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise ValidationError("zero-norm image embedding")
    entries = []
    for label, row in zip(class_embeddings.ids, class_embeddings.values):
        row = row.astype(np.float64)
        row_norm = np.linalg.norm(row)
        if row_norm == 0.0:
            raise ValidationError(f"zero-norm class embedding for {label!r}")
        similarity = float(vec @ row / (norm * row_norm))
        if similarity > threshold:
            entries.append((label, min(max(similarity, 0.0), 1.0)))
    return ProposalSet(image_id=image_id, entries=tuple(entries))


def oracle_propose(record: ImageRecord) -> ProposalSet:
    """Ground-truth labels as proposals with score 1.0."""
    return ProposalSet(
        image_id=record.id, entries=tuple((label, 1.0) for label in record.gt_labels)
    )


# ---------------------------------------------------------------------------
# Checkpoint container (kind 3)
# ---------------------------------------------------------------------------

_HEAD_CODES = {HEAD_SINGLE: 0, HEAD_MULTI: 1}
_HEAD_NAMES = {code: name for name, code in _HEAD_CODES.items()}


def save_mlp_checkpoint(model: MlpModel, sink) -> int:
    """Kind-3 record: head byte, layer dims, then float64 weights/biases."""
    model.validate()
    parts = [encode_header(KIND_MLP_CHECKPOINT)]
    parts.append(struct.pack("<BI", _HEAD_CODES[model.head], len(model.weights)))
    for w in model.weights:
        parts.append(struct.pack("<II", w.shape[1], w.shape[0]))
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    payload = b"".join(parts)
    stream, close = _open_sink(sink)
    try:
        stream.write(payload)
    finally:
        if close:
            stream.close()
    return len(payload)


def load_mlp_checkpoint(source) -> MlpModel:
    stream, close = _open_source(source)
    try:
        r = RecordReader(stream)
        r.check_header(KIND_MLP_CHECKPOINT, "an MLP checkpoint")
        head_code, n_layers = struct.unpack("<BI", r.read_exact(5, "checkpoint header"))
        if head_code not in _HEAD_NAMES:
            raise FormatError(f"unknown head code {head_code}")
        if n_layers < 1:
            raise FormatError("checkpoint with no layers")
        dims = [struct.unpack("<II", r.read_exact(8, "layer dims")) for _ in range(n_layers)]
        weights = []
        biases = []
        for fan_in, fan_out in dims:
            raw_w = r.read_exact(fan_in * fan_out * 8, "layer weights")
            raw_b = r.read_exact(fan_out * 8, "layer biases")
            weights.append(np.frombuffer(raw_w, dtype="<f8").reshape(fan_out, fan_in).copy())
            biases.append(np.frombuffer(raw_b, dtype="<f8").copy())
        return MlpModel(weights=weights, biases=biases, head=_HEAD_NAMES[head_code])
    finally:
        if close:
            stream.close()
