"""Prompt construction and VLM query texts."""
import pytest

from attnbox.dataio.manifest import ARTDL_CLASSES, ICONART_CLASSES
from attnbox.errors import ValidationError
from attnbox.promptgen import (
    ICONART_REMAP,
    LabelRemapTable,
    build_vlm_query,
    caption_prompt,
    remap_label,
    template_prompt,
)


class TestRemap:
    def test_nudity(self):
        assert remap_label("nudity") == "naked person"

    def test_child_jesus(self):
        assert remap_label("child Jesus") == "baby"

    def test_saint_sebastien(self):
        assert remap_label("Saint Sebastien") == "person"

    def test_unlisted_identity(self):
        assert remap_label("Mary, mother of Jesus") == "Mary, mother of Jesus"

    def test_idempotent_on_outputs(self):
        for source, _ in ICONART_REMAP.pairs:
            rendered = remap_label(source)
            assert remap_label(rendered) == rendered

    def test_duplicate_sources_rejected(self):
        with pytest.raises(ValidationError, match="duplicate"):
            LabelRemapTable(pairs=(("a", "b"), ("a", "c")))


class TestTemplate:
    def test_plain(self):
        spec = template_prompt("Mary, mother of Jesus")
        assert spec.text == "A painting of Mary, mother of Jesus"
        assert spec.fallback is False

    def test_article_class(self):
        assert template_prompt("baby").text == "A painting of a baby"
        assert template_prompt("person").text == "A painting of a person"
        assert template_prompt("naked person").text == "A painting of a naked person"

    def test_default_branch(self):
        assert template_prompt("ruins").text == "A painting of ruins"

    def test_empty_label_rejected(self):
        with pytest.raises(ValidationError):
            template_prompt("")


class TestCaption:
    def test_contained_label_keeps_caption(self):
        spec = caption_prompt("A baby sleeps in a manger", "baby", 75, label_token_start=2)
        assert spec.text == "A baby sleeps in a manger"
        assert spec.fallback is False

    def test_missing_label_prepends_template(self):
        spec = caption_prompt("Figures gather at dusk", "angel", 75, label_token_start=None)
        assert spec.text == "A painting of angel. Figures gather at dusk"
        assert spec.fallback is True

    def test_label_beyond_budget_prepends(self):
        caption = "words " * 79 + "angel"
        spec = caption_prompt(caption, "angel", 75, label_token_start=80)
        assert spec.fallback is True
        assert spec.text.startswith("A painting of angel. ")
        assert caption in spec.text  # the caption is only prepended, never dropped

    def test_label_in_caption_is_case_insensitive(self):
        spec = caption_prompt("An Angel hovers", "angel", 75, label_token_start=1)
        assert spec.fallback is False


class TestQueries:
    def test_choice_artdl(self):
        q = build_vlm_query(ARTDL_CLASSES, "choice-artdl")
        assert q.startswith("Who is in the painting? Choose from the following:")
        for label in ARTDL_CLASSES:
            assert label in q

    def test_choice_iconart(self):
        q = build_vlm_query(ICONART_CLASSES, "choice-iconart")
        assert q.startswith("Which of the options are in the painting?")

    def test_per_class(self):
        qs = build_vlm_query(["angel"], "per-class")
        assert qs == ["Is angel in the painting?"]

    def test_score_contains_none_instruction(self):
        q = build_vlm_query(ICONART_CLASSES, "score")
        assert "If none of the symbols are present, output 'None'" in q
        assert "give a score from 0 to 1" in q
        assert "Put your answer in a dictionary first" in q

    def test_each_label_exactly_once_as_list_item(self):
        q = build_vlm_query(ICONART_CLASSES, "choice-iconart")
        listed = q.split(": ", 1)[1].split(", ")
        assert listed == list(ICONART_CLASSES)

    def test_empty_vocabulary_rejected(self):
        with pytest.raises(ValidationError, match="empty"):
            build_vlm_query([], "score")

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValidationError, match="unknown query kind"):
            build_vlm_query(["a"], "riddle")


class TestPromptSpecInvariant:
    def test_rendered_label_always_in_text(self):
        for label in list(ARTDL_CLASSES) + ["person", "baby", "naked person", "ruins"]:
            spec = template_prompt(label)
            assert label.lower() in spec.text.lower()
        spec = caption_prompt("nothing relevant", "angel", 75, None)
        assert "angel" in spec.text.lower()
