import logging

import pytest

from progdistill.adapter import (AdapterError, TeacherInput,
                                 adapt_best_text_match, adapt_simple_query,
                                 adapt_step, adapt_verify_property,
                                 indefinite_article, is_plural)
from progdistill.backends import perfect_registry
from progdistill.dsl import parse
from progdistill.interpreter import StepRecord, execute
from progdistill.questions import GenConfig, generate_qa
from progdistill.worlds import ScenePatch, crop

from conftest import store_for

ATTRS = {"red", "blue", "green", "small", "large", "open", "turned on"}


class TestVerifyPropertyTemplate:
    def test_golden_flower_red(self):
        assert adapt_verify_property("flower", "red") == "Is this flower red?"

    def test_door_open(self):
        assert adapt_verify_property("door", "open") == "Is this door open?"

    def test_multiword_attribute(self):
        assert adapt_verify_property("tv", "turned on") == "Is this tv turned on?"

    def test_empty_tokens_rejected(self):
        with pytest.raises(AdapterError):
            adapt_verify_property("", "red")
        with pytest.raises(AdapterError):
            adapt_verify_property("flower", "")


class TestBestTextMatchTemplate:
    def test_golden_noun_singular(self):
        out = adapt_best_text_match(["bread", "sandwich"], center_word="food",
                                    plural=False, attribute_vocab=ATTRS)
        assert out == "Is this a bread or sandwich?"

    def test_adjective_singular_uses_center_word(self):
        out = adapt_best_text_match(["red", "blue"], center_word="flower",
                                    plural=False, attribute_vocab=ATTRS)
        assert out == "Is this flower red or blue?"

    def test_noun_plural_drops_article(self):
        out = adapt_best_text_match(["apple", "orange"], center_word="fruits",
                                    plural=True, attribute_vocab=ATTRS)
        assert out == "Are these apple or orange?"

    def test_adjective_plural(self):
        out = adapt_best_text_match(["red", "blue"], center_word="flowers",
                                    plural=True, attribute_vocab=ATTRS)
        assert out == "Are these flowers red or blue?"

    def test_article_an_for_vowel_first_option(self):
        out = adapt_best_text_match(["apple", "pear"], center_word="fruit",
                                    plural=False, attribute_vocab=ATTRS)
        assert out == "Is this an apple or pear?"

    def test_three_options_join_with_or(self):
        out = adapt_best_text_match(["bread", "sandwich", "cake"],
                                    center_word="food", plural=False,
                                    attribute_vocab=ATTRS)
        assert out == "Is this a bread or sandwich or cake?"

    def test_errors(self):
        with pytest.raises(AdapterError):
            adapt_best_text_match(["bread"], attribute_vocab=ATTRS)
        with pytest.raises(AdapterError):
            adapt_best_text_match(["bread", "red"], center_word="x",
                                  attribute_vocab=ATTRS)
        with pytest.raises(AdapterError):
            adapt_best_text_match(["red", "blue"], center_word=None,
                                  attribute_vocab=ATTRS)
        with pytest.raises(AdapterError):
            adapt_best_text_match(["bread", ""], attribute_vocab=ATTRS)


class TestSimpleQueryTemplate:
    def test_golden_question_gains_question_mark(self):
        assert adapt_simple_query("What color is this table") == \
            "What color is this table?"

    def test_already_terminated_unchanged(self):
        assert adapt_simple_query("What is this?") == "What is this?"

    def test_extra_question_marks_collapse_to_one(self):
        assert adapt_simple_query("Really??") == "Really?"

    def test_empty_question_warns_and_passes_through(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert adapt_simple_query("") == ""
        assert "empty" in caplog.text


class TestPluralityAndArticles:
    @pytest.mark.parametrize("word,plural", [
        ("flowers", True), ("flower", False), ("children", True),
        ("people", True), ("glass", False), ("bus", False),
        ("scissors", True), ("dog", False), (None, False), ("", False),
    ])
    def test_is_plural(self, word, plural):
        assert is_plural(word) is plural

    def test_article(self):
        assert indefinite_article("apple") == "an"
        assert indefinite_article("bread") == "a"


class TestAdaptStep:
    def _patch(self):
        return ScenePatch("s", (0, 0, 10, 10), origin_label="flower",
                          visible_objects=("o00",))

    def test_verify_step(self):
        step = StepRecord(2, "verify_property", self._patch(),
                          ("flower", "red"), True, "flower")
        out = adapt_step(step, attribute_vocab=ATTRS, question_id="q7")
        assert isinstance(out, TeacherInput)
        assert out.sub_question == "Is this flower red?"
        assert out.sub_image is step.receiver
        assert out.source == ("q7", 2, "verify_property")

    def test_btm_step_center_and_plural_from_provenance(self):
        step = StepRecord(0, "best_text_match", self._patch(),
                          (("red", "blue"),), "red", "flower")
        out = adapt_step(step, attribute_vocab=ATTRS)
        assert out.sub_question == "Is this flower red or blue?"

    def test_simple_query_step(self):
        step = StepRecord(1, "simple_query", self._patch(),
                          ("What color is this flower",), "red", "flower")
        out = adapt_step(step, attribute_vocab=ATTRS)
        assert out.sub_question == "What color is this flower?"

    def test_sub_image_region_identity(self, flower_scene, world):
        registry = perfect_registry(store_for(flower_scene), world)
        source = ('ps = image.find("flower")\n'
                  'return ps[0].verify_property("flower", "red")\n')
        trace = execute(parse(source), flower_scene, registry, "q")
        step = trace.steps[1]
        out = adapt_step(step, attribute_vocab=world.all_attributes())
        assert out.sub_image.region == step.receiver.region

    def test_non_distillable_kind_rejected(self):
        step = StepRecord(0, "find", self._patch(), ("flower",), None, None)
        with pytest.raises(AdapterError):
            adapt_step(step, attribute_vocab=ATTRS)

    def test_empty_question_step_rejected(self):
        step = StepRecord(0, "simple_query", self._patch(), ("",), "x", None)
        with pytest.raises(AdapterError):
            adapt_step(step, attribute_vocab=ATTRS)

    def test_totality_over_generated_traces(self, world, small_store):
        """Every distillable step from generated programs adapts cleanly."""
        registry = perfect_registry(small_store, world)
        vocab = world.all_attributes()
        gen = GenConfig(world=world)
        adapted = 0
        for sid in small_store.ids():
            scene = small_store.get(sid)
            for qa in generate_qa(scene, gen, 0):
                trace = execute(parse(qa.program), scene, registry,
                                qa.question_id)
                for step in trace.steps:
                    if step.module_kind in ("verify_property",
                                            "best_text_match", "simple_query"):
                        out = adapt_step(step, attribute_vocab=vocab,
                                         question_id=qa.question_id)
                        assert out.sub_question
                        assert out.sub_image.region == step.receiver.region
                        adapted += 1
        assert adapted > 150
