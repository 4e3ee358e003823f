"""Formats, manifests, and streams: round trips and structured errors."""
import io
import json

import numpy as np
import pytest

from attnbox.dataio import (
    ARTDL_CLASSES,
    ICONART_CLASSES,
    AttentionStack,
    Box,
    DatasetManifest,
    EmbeddingMatrix,
    ImageRecord,
    TranscriptRecord,
    load_manifest,
    manifest_from_dict,
    read_attention_stack,
    read_detection_stream,
    read_embedding_matrix,
    read_proposal_stream,
    read_transcript_stream,
    save_manifest,
    write_attention_stack,
    write_detection_stream,
    write_embedding_matrix,
    write_proposal_stream,
    write_transcript_stream,
)
from attnbox.errors import FormatError, TruncationError, ValidationError

from conftest import random_embeddings, random_stack


def tiny_stack(values=(0.0, 0.0, 0.0, 0.0)):
    data = ((np.array(values, dtype=np.float32).reshape(1, 2, 2),),)
    return AttentionStack(image_id="one", label_spans={"x": (0,)}, data=data)


class TestStackFormat:
    def test_zero_tensor_round_trip(self):
        stack = tiny_stack()
        buf = io.BytesIO()
        n = write_attention_stack(stack, buf)
        assert n == len(buf.getvalue())
        back = read_attention_stack(io.BytesIO(buf.getvalue()))
        assert back == stack
        assert back.data[0][0].tobytes() == b"\x00" * 16

    def test_mixed_grid_round_trip_bit_identical(self):
        rng = np.random.default_rng(5)
        data = tuple(
            tuple(
                rng.uniform(0, 2, size=(3, h, w)).astype(np.float32)
                for h, w in ((64, 64), (32, 32))
            )
            for _ in range(2)
        )
        stack = AttentionStack(
            image_id="mixed", label_spans={"a": (0, 1), "b": (2,)}, data=data
        )
        first = io.BytesIO()
        write_attention_stack(stack, first)
        back = read_attention_stack(io.BytesIO(first.getvalue()))
        assert back.image_id == stack.image_id
        assert back.label_spans == stack.label_spans
        assert back.grids == ((64, 64), (32, 32))
        assert back == stack
        second = io.BytesIO()
        write_attention_stack(back, second)
        assert first.getvalue() == second.getvalue()

    def test_invalid_span_writes_nothing(self):
        with pytest.raises(ValidationError):
            AttentionStack(
                image_id="bad",
                label_spans={"x": (5,)},  # T is 1
                data=((np.zeros((1, 2, 2), dtype=np.float32),),),
            )
        # Mutating a valid stack after construction is also caught before
        # any bytes are written.
        stack = tiny_stack()
        stack.label_spans["x"] = (9,)
        sink = io.BytesIO()
        with pytest.raises(ValidationError):
            write_attention_stack(stack, sink)
        assert sink.getvalue() == b""

    def test_bad_magic(self):
        stack = tiny_stack()
        buf = io.BytesIO()
        write_attention_stack(stack, buf)
        corrupted = b"XXXX" + buf.getvalue()[4:]
        with pytest.raises(FormatError, match="bad magic"):
            read_attention_stack(io.BytesIO(corrupted))

    def test_truncation_names_expected_vs_actual(self):
        stack = tiny_stack(values=(0.1, 0.2, 0.3, 0.4))
        buf = io.BytesIO()
        write_attention_stack(stack, buf)
        raw = buf.getvalue()
        sliced = raw[: len(raw) - 6]
        with pytest.raises(TruncationError, match=r"expected 16 bytes, got 10"):
            read_attention_stack(io.BytesIO(sliced))

    def test_unknown_version_rejected(self):
        stack = tiny_stack()
        buf = io.BytesIO()
        write_attention_stack(stack, buf)
        raw = bytearray(buf.getvalue())
        raw[4] = 99
        with pytest.raises(FormatError, match="version"):
            read_attention_stack(io.BytesIO(bytes(raw)))

    def test_non_finite_payload_rejected(self):
        stack = tiny_stack(values=(0.1, 0.2, 0.3, 0.4))
        buf = io.BytesIO()
        write_attention_stack(stack, buf)
        raw = bytearray(buf.getvalue())
        raw[-4:] = np.array([np.nan], dtype="<f4").tobytes()
        with pytest.raises(ValidationError, match="non-finite"):
            read_attention_stack(io.BytesIO(bytes(raw)))

    def test_random_round_trips(self, rng):
        for i in range(25):
            stack = random_stack(rng, image_id=f"s{i}")
            buf = io.BytesIO()
            write_attention_stack(stack, buf)
            assert read_attention_stack(io.BytesIO(buf.getvalue())) == stack


class TestEmbeddingFormat:
    def test_minimal_round_trip(self):
        m = EmbeddingMatrix(ids=("img1",), values=np.array([[1, 0, 0]], dtype=np.float32))
        buf = io.BytesIO()
        write_embedding_matrix(m, buf)
        assert read_embedding_matrix(io.BytesIO(buf.getvalue())) == m

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValidationError, match="duplicate ids"):
            EmbeddingMatrix(ids=("img1", "img1"), values=np.zeros((2, 3), dtype=np.float32))

    def test_large_round_trip_bit_identical(self):
        rng = np.random.default_rng(11)
        m = EmbeddingMatrix(
            ids=tuple(f"img{i}" for i in range(100)),
            values=rng.standard_normal((100, 512)).astype(np.float32),
        )
        first = io.BytesIO()
        write_embedding_matrix(m, first)
        back = read_embedding_matrix(io.BytesIO(first.getvalue()))
        assert back == m
        second = io.BytesIO()
        write_embedding_matrix(back, second)
        assert first.getvalue() == second.getvalue()

    def test_wrong_kind_rejected(self):
        m = EmbeddingMatrix(ids=("a",), values=np.zeros((1, 2), dtype=np.float32))
        buf = io.BytesIO()
        write_embedding_matrix(m, buf)
        with pytest.raises(FormatError, match="kind"):
            read_attention_stack(io.BytesIO(buf.getvalue()))


class TestManifest:
    def test_builtin_vocabularies(self):
        assert len(ARTDL_CLASSES) == 10
        assert "Saint Sebastian" in ARTDL_CLASSES
        assert "Mary, mother of Jesus" in ARTDL_CLASSES
        assert len(ICONART_CLASSES) == 7
        assert "baby" in ICONART_CLASSES

    def test_degenerate_box_rejected(self):
        doc = {
            "name": "t",
            "classes": ["a"],
            "images": [
                {
                    "id": "i1",
                    "width": 100,
                    "height": 100,
                    "gt_labels": ["a"],
                    "gt_boxes": [["a", [10, 10, 5, 20]]],
                }
            ],
        }
        with pytest.raises(ValidationError, match="degenerate box"):
            manifest_from_dict(doc)

    def test_label_outside_vocabulary(self):
        doc = {
            "name": "t",
            "classes": ["a"],
            "images": [{"id": "i1", "width": 10, "height": 10, "gt_labels": ["b"]}],
        }
        with pytest.raises(ValidationError, match="outside vocabulary"):
            manifest_from_dict(doc)

    def test_save_load_round_trip(self, tmp_path):
        manifest = DatasetManifest(
            name="demo",
            classes=("a", "b"),
            images=(
                ImageRecord(
                    id="i1",
                    width=640,
                    height=480,
                    gt_labels=("a",),
                    gt_boxes=(("a", Box(0, 0, 10, 10)),),
                ),
            ),
        )
        path = tmp_path / "m.json"
        save_manifest(manifest, path)
        back = load_manifest(path)
        assert back.name == manifest.name
        assert back.classes == manifest.classes
        assert back.images[0].gt_boxes == manifest.images[0].gt_boxes

    def test_invalid_json_is_structured(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ValidationError, match="invalid JSON"):
            load_manifest(path)

    def test_box_outside_image_rejected(self):
        with pytest.raises(ValidationError, match="outside"):
            ImageRecord(
                id="i", width=50, height=50, gt_labels=("a",),
                gt_boxes=(("a", Box(0, 0, 60, 10)),),
            )


class TestStreams:
    def test_proposal_round_trip(self, tmp_path):
        path = tmp_path / "p.jsonl"
        records = [("i1", [("a", 0.5), ("b", 1.0)]), ("i2", [])]
        assert write_proposal_stream(records, path) == 2
        assert read_proposal_stream(path) == records

    def test_detection_round_trip(self, tmp_path):
        path = tmp_path / "d.jsonl"
        records = [("i1", "a", Box(0, 0, 5, 5), 0.9)]
        assert write_detection_stream(records, path) == 1
        assert read_detection_stream(path) == records

    def test_transcript_round_trip(self, tmp_path):
        path = tmp_path / "t.jsonl"
        records = [
            TranscriptRecord(image_id="i1", kind="choice", response="Mary is shown."),
            TranscriptRecord(image_id="i1", kind="yesno", response="Yes.", label="angel"),
        ]
        write_transcript_stream(records, path)
        assert read_transcript_stream(path) == records

    def test_unknown_transcript_kind_rejected(self):
        with pytest.raises(FormatError, match="kind"):
            TranscriptRecord(image_id="i", kind="riddle", response="?")

    def test_malformed_line_reports_position(self, tmp_path):
        path = tmp_path / "p.jsonl"
        path.write_text('{"image_id": "a", "proposals": []}\nnonsense\n', encoding="utf-8")
        with pytest.raises(FormatError, match=":2"):
            read_proposal_stream(path)
