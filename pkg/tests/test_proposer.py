"""Classifier training/inference, transcript parsing, checkpoint format."""
import io

import numpy as np
import pytest

from attnbox.dataio import EmbeddingMatrix, ImageRecord, TranscriptRecord
from attnbox.dataio.manifest import ARTDL_CLASSES
from attnbox.errors import TranscriptParseError, ValidationError
from attnbox.proposer import (
    HEAD_MULTI,
    HEAD_SINGLE,
    LOSS_BCE,
    LOSS_CROSS_ENTROPY,
    MlpModel,
    ProposalSet,
    TrainConfig,
    clip_propose,
    compute_loss,
    init_mlp,
    load_mlp_checkpoint,
    loss_and_gradients,
    oracle_propose,
    propose_from_transcripts,
    save_mlp_checkpoint,
    select_labels,
    wscp_infer,
    wscp_train,
    yesno_parse,
    zscp_parse_choice,
    zscp_parse_score,
)
from reference_impls import finite_difference_gradients, softmax_regression_accuracy


def separable_clusters(rng, n_classes=10, dim=512, per_class=200, spread=0.05):
    centers = rng.normal(size=(n_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    x = np.repeat(centers, per_class, axis=0) + spread * rng.normal(
        size=(n_classes * per_class, dim)
    )
    y = np.repeat(np.arange(n_classes), per_class)
    return x, y


class TestGradients:
    @pytest.mark.parametrize("loss", [LOSS_CROSS_ENTROPY, LOSS_BCE])
    def test_analytic_matches_finite_differences(self, loss, rng):
        for trial in range(5):
            model = init_mlp(4, 2, layers=2, head=HEAD_SINGLE, seed=trial)
            x = rng.standard_normal((3, 4))
            if loss == LOSS_CROSS_ENTROPY:
                targets = rng.integers(0, 2, size=3)
            else:
                targets = rng.integers(0, 2, size=(3, 2)).astype(np.float64)
            _, grads_w, grads_b = loss_and_gradients(model, x, targets, loss)
            params = model.weights + model.biases
            fd = finite_difference_gradients(
                lambda: compute_loss(model, x, targets, loss), params
            )
            for analytic, numeric in zip(grads_w + grads_b, fd):
                denom = np.maximum(np.abs(numeric), 1.0)
                assert np.max(np.abs(analytic - numeric) / denom) < 1e-6


class TestTraining:
    def test_zero_epochs_equals_init(self, rng):
        emb = EmbeddingMatrix(
            ids=("a", "b"), values=rng.standard_normal((2, 8)).astype(np.float32)
        )
        config = TrainConfig(epochs=0, seed=3)
        result = wscp_train(emb, {"a": "x", "b": "y"}, ["x", "y"], 2, HEAD_SINGLE, config)
        fresh = init_mlp(8, 2, layers=2, head=HEAD_SINGLE, seed=3)
        for w1, w2 in zip(result.model.weights, fresh.weights):
            assert np.array_equal(w1, w2)
        for b1, b2 in zip(result.model.biases, fresh.biases):
            assert np.array_equal(b1, b2)

    def test_separable_clusters_reach_high_accuracy(self):
        rng = np.random.default_rng(0)
        x, y = separable_clusters(rng, n_classes=4, dim=64, per_class=60)
        # Independent check that the set really is separable.
        assert softmax_regression_accuracy(x, y, 4) >= 0.99
        ids = tuple(f"i{n}" for n in range(len(x)))
        emb = EmbeddingMatrix(ids=ids, values=x.astype(np.float32))
        labels = {f"i{n}": f"c{y[n]}" for n in range(len(x))}
        classes = [f"c{k}" for k in range(4)]
        config = TrainConfig(epochs=60, learning_rate=1e-3, seed=0)
        result = wscp_train(emb, labels, classes, 2, HEAD_SINGLE, config)
        scores = wscp_infer(result.model, emb.values.astype(np.float64))
        accuracy = (scores.argmax(axis=1) == y).mean()
        assert accuracy >= 0.99

    def test_loss_decreases_over_first_epochs(self, rng):
        x, y = separable_clusters(rng, n_classes=3, dim=16, per_class=40)
        emb = EmbeddingMatrix(
            ids=tuple(f"i{n}" for n in range(len(x))), values=x.astype(np.float32)
        )
        labels = {f"i{n}": f"c{y[n]}" for n in range(len(x))}
        config = TrainConfig(epochs=3, learning_rate=1e-3, batch_size=32, seed=1)
        result = wscp_train(emb, labels, [f"c{k}" for k in range(3)], 2, HEAD_SINGLE, config)
        assert result.epoch_losses[1] < result.epoch_losses[0]

    def test_bit_deterministic(self, rng):
        x, y = separable_clusters(rng, n_classes=2, dim=12, per_class=20)
        emb = EmbeddingMatrix(
            ids=tuple(f"i{n}" for n in range(len(x))), values=x.astype(np.float32)
        )
        labels = {f"i{n}": [f"c{y[n]}"] for n in range(len(x))}
        config = TrainConfig(epochs=5, learning_rate=1e-3, batch_size=16, seed=9, loss=LOSS_BCE)
        runs = []
        for _ in range(2):
            result = wscp_train(emb, labels, ["c0", "c1"], 3, HEAD_MULTI, config)
            buf = io.BytesIO()
            save_mlp_checkpoint(result.model, buf)
            runs.append(buf.getvalue())
        assert runs[0] == runs[1]

    def test_multi_label_targets(self, rng):
        emb = EmbeddingMatrix(ids=("a", "b"), values=rng.standard_normal((2, 6)).astype(np.float32))
        labels = {"a": ["x", "y"], "b": ["y"]}
        config = TrainConfig(epochs=2, learning_rate=1e-3, loss=LOSS_BCE, seed=0)
        result = wscp_train(emb, labels, ["x", "y"], 2, HEAD_MULTI, config)
        assert result.model.output_dim == 2

    def test_single_label_requires_one_label(self, rng):
        emb = EmbeddingMatrix(ids=("a",), values=rng.standard_normal((1, 4)).astype(np.float32))
        with pytest.raises(ValidationError, match="exactly one"):
            wscp_train(emb, {"a": ["x", "y"]}, ["x", "y"], 2, HEAD_SINGLE, TrainConfig(epochs=1))

    def test_missing_embedding_rejected(self, rng):
        emb = EmbeddingMatrix(ids=("a",), values=rng.standard_normal((1, 4)).astype(np.float32))
        with pytest.raises(ValidationError, match="missing"):
            wscp_train(emb, {"zzz": "x"}, ["x"], 2, HEAD_SINGLE, TrainConfig(epochs=1))


class TestInference:
    def test_zero_model_single_label_uniform(self):
        model = MlpModel(
            weights=[np.zeros((10, 16))], biases=[np.zeros(10)], head=HEAD_SINGLE
        )
        scores = wscp_infer(model, np.ones(16))
        assert np.allclose(scores, 0.1)

    def test_zero_model_multi_label_half(self):
        model = MlpModel(weights=[np.zeros((5, 8))], biases=[np.zeros(5)], head=HEAD_MULTI)
        scores = wscp_infer(model, np.ones(8))
        assert np.allclose(scores, 0.5)

    def test_softmax_shift_invariance(self, rng):
        model = init_mlp(6, 4, layers=1, head=HEAD_SINGLE, seed=0)
        vec = rng.standard_normal(6)
        base = wscp_infer(model, vec)
        shifted = MlpModel(
            weights=[model.weights[0].copy()],
            biases=[model.biases[0] + 3.7],
            head=HEAD_SINGLE,
        )
        assert np.allclose(wscp_infer(shifted, vec), base, atol=1e-12)

    def test_dimension_mismatch(self):
        model = init_mlp(6, 2, layers=1, head=HEAD_SINGLE, seed=0)
        with pytest.raises(ValidationError, match="dim"):
            wscp_infer(model, np.ones(7))


class TestSelectLabels:
    def test_argmax_single(self):
        out = select_labels("i", np.array([0.1, 0.7, 0.2]), ["a", "b", "c"], HEAD_SINGLE)
        assert out.entries == (("b", 0.7),)

    def test_argmax_tie_lowest_index(self):
        out = select_labels("i", np.array([0.4, 0.4, 0.2]), ["a", "b", "c"], HEAD_SINGLE)
        assert out.entries[0][0] == "a"

    def test_multi_threshold(self):
        out = select_labels("i", np.array([0.6, 0.4, 0.9]), ["a", "b", "c"], HEAD_MULTI)
        assert out.labels == ("a", "c")

    def test_multi_all_below_threshold_empty(self):
        out = select_labels("i", np.array([0.2, 0.49, 0.5]), ["a", "b", "c"], HEAD_MULTI)
        assert out.entries == ()


class TestChoiceParsing:
    def test_containment(self):
        t = TranscriptRecord(
            image_id="i",
            kind="choice",
            response="The painting shows Mary, mother of Jesus and Saint Peter.",
        )
        out = zscp_parse_choice(t, ARTDL_CLASSES)
        assert set(out.labels) == {"Mary, mother of Jesus", "Saint Peter"}
        assert all(s == 1.0 for _, s in out.entries)

    def test_no_match_empty(self):
        t = TranscriptRecord(image_id="i", kind="choice", response="A bowl of fruit.")
        assert zscp_parse_choice(t, ARTDL_CLASSES).entries == ()

    def test_repeated_label_counted_once(self):
        t = TranscriptRecord(
            image_id="i", kind="choice", response="Saint Peter. Saint Peter again."
        )
        out = zscp_parse_choice(t, ARTDL_CLASSES)
        assert out.labels == ("Saint Peter",)

    def test_longest_label_claims_span(self):
        vocab = ["John", "John the Baptist"]
        t = TranscriptRecord(image_id="i", kind="choice", response="I see John the Baptist.")
        out = zscp_parse_choice(t, vocab)
        assert out.labels == ("John the Baptist",)

    def test_idempotent(self):
        t = TranscriptRecord(image_id="i", kind="choice", response="Mary Magdalene kneels.")
        a = zscp_parse_choice(t, ARTDL_CLASSES)
        b = zscp_parse_choice(t, ARTDL_CLASSES)
        assert a.entries == b.entries


class TestScoreParsing:
    VOCAB = ["mary", "angel", "ruins"]

    def test_threshold_keeps_high_scores(self):
        t = TranscriptRecord(
            image_id="i", kind="score", response='{"mary": 0.9, "angel": 0.3} because...'
        )
        out = zscp_parse_score(t, self.VOCAB, tau=0.5)
        assert out.entries == (("mary", 0.9),)

    def test_none_response_empty(self):
        t = TranscriptRecord(image_id="i", kind="score", response="None")
        assert zscp_parse_score(t, self.VOCAB).entries == ()

    def test_boundary_is_strict(self):
        t = TranscriptRecord(image_id="i", kind="score", response='{"ruins": 0.5}')
        assert zscp_parse_score(t, self.VOCAB, tau=0.5).entries == ()

    def test_out_of_range_scores_clipped(self):
        t = TranscriptRecord(image_id="i", kind="score", response='{"mary": 1.4, "angel": -0.2}')
        out = zscp_parse_score(t, self.VOCAB)
        assert out.entries == (("mary", 1.0),)

    def test_unknown_labels_dropped(self):
        t = TranscriptRecord(image_id="i", kind="score", response='{"dog": 0.9, "MARY": 0.8}')
        out = zscp_parse_score(t, self.VOCAB)
        assert out.entries == (("mary", 0.8),)

    def test_malformed_dict_raises_with_offset(self):
        t = TranscriptRecord(image_id="i", kind="score", response='xx {"mary" 0.9}')
        with pytest.raises(TranscriptParseError) as info:
            zscp_parse_score(t, self.VOCAB)
        assert info.value.offset >= 3

    def test_unbalanced_braces_raise(self):
        t = TranscriptRecord(image_id="i", kind="score", response='{"mary": 0.9')
        with pytest.raises(TranscriptParseError):
            zscp_parse_score(t, self.VOCAB)

    def test_reasoning_text_around_dict(self):
        t = TranscriptRecord(
            image_id="i",
            kind="score",
            response="Let me think. {'angel': 0.75, 'ruins': 0.2} The angel is clear.",
        )
        out = zscp_parse_score(t, self.VOCAB)
        assert out.entries == (("angel", 0.75),)


class TestYesNo:
    def test_yes_positive(self):
        t = TranscriptRecord(image_id="i", kind="yesno", response="Yes, Saint Peter is depicted.", label="x")
        assert yesno_parse(t) is True

    def test_no_negative(self):
        t = TranscriptRecord(image_id="i", kind="yesno", response="No.", label="x")
        assert yesno_parse(t) is False

    def test_word_boundary(self):
        t = TranscriptRecord(image_id="i", kind="yesno", response="Eyes are visible", label="x")
        assert yesno_parse(t) is False


class TestBatchParsing:
    def test_yesno_aggregation(self):
        transcripts = [
            TranscriptRecord(image_id="a", kind="yesno", response="Yes", label="mary"),
            TranscriptRecord(image_id="a", kind="yesno", response="no", label="angel"),
            TranscriptRecord(image_id="b", kind="yesno", response="nope", label="mary"),
        ]
        proposals, skipped = propose_from_transcripts(transcripts, ["mary", "angel"], "yesno")
        assert skipped == 0
        by_id = {p.image_id: p for p in proposals}
        assert by_id["a"].entries == (("mary", 1.0),)
        assert by_id["b"].entries == ()

    def test_score_errors_counted_not_fatal(self):
        transcripts = [
            TranscriptRecord(image_id="a", kind="score", response='{"mary": 0.9}'),
            TranscriptRecord(image_id="b", kind="score", response='{"mary" oops}'),
        ]
        proposals, skipped = propose_from_transcripts(transcripts, ["mary"], "score")
        assert skipped == 1
        assert [p.image_id for p in proposals] == ["a"]


class TestClipProposer:
    def test_identical_vector_included(self):
        vec = np.array([1.0, 2.0, 3.0])
        classes = EmbeddingMatrix(ids=("a",), values=vec[None].astype(np.float32))
        out = clip_propose("i", vec, classes)
        assert out.labels == ("a",)
        assert out.entries[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_excluded(self):
        classes = EmbeddingMatrix(ids=("a",), values=np.array([[0.0, 1.0]], dtype=np.float32))
        out = clip_propose("i", np.array([1.0, 0.0]), classes)
        assert out.entries == ()

    def test_threshold_is_strict(self):
        # Similarity exactly equal to the threshold is excluded.
        classes = EmbeddingMatrix(
            ids=("same", "orth"),
            values=np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32),
        )
        at_one = clip_propose("i", np.array([1.0, 0.0]), classes, threshold=1.0)
        assert at_one.entries == ()
        at_zero = clip_propose("i", np.array([1.0, 0.0]), classes, threshold=0.0)
        assert at_zero.labels == ("same",)  # orth sits exactly at 0.0

    def test_zero_norm_rejected(self):
        classes = EmbeddingMatrix(ids=("a",), values=np.array([[1.0, 0.0]], dtype=np.float32))
        with pytest.raises(ValidationError, match="zero-norm"):
            clip_propose("i", np.zeros(2), classes)


class TestOracle:
    def test_gt_labels_proposed(self):
        rec = ImageRecord(id="i", width=10, height=10, gt_labels=("mary", "angel"))
        out = oracle_propose(rec)
        assert out.entries == (("mary", 1.0), ("angel", 1.0))

    def test_empty_gt_empty(self):
        rec = ImageRecord(id="i", width=10, height=10)
        assert oracle_propose(rec).entries == ()


class TestProposalSet:
    def test_duplicate_labels_rejected(self):
        with pytest.raises(ValidationError, match="duplicate"):
            ProposalSet(image_id="i", entries=(("a", 0.5), ("a", 0.6)))

    def test_out_of_range_score_rejected(self):
        with pytest.raises(ValidationError, match="outside"):
            ProposalSet(image_id="i", entries=(("a", 1.5),))


class TestCheckpoint:
    def test_round_trip_bit_identical(self, rng):
        model = init_mlp(12, 5, layers=3, head=HEAD_MULTI, seed=2)
        first = io.BytesIO()
        save_mlp_checkpoint(model, first)
        back = load_mlp_checkpoint(io.BytesIO(first.getvalue()))
        assert back.head == model.head
        for w1, w2 in zip(model.weights, back.weights):
            assert w1.tobytes() == w2.tobytes()
        second = io.BytesIO()
        save_mlp_checkpoint(back, second)
        assert first.getvalue() == second.getvalue()
