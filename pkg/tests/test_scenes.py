import numpy as np
import pytest

from aquila.errors import ConfigurationError
from aquila.scenes import (
    SHORT_ANSWER_PROMPT,
    SceneObject,
    Vocabulary,
    caption_for,
    enumerate_sentences,
    make_dataset,
    relation,
    render,
    tokenize,
)


def test_same_seed_is_bit_identical():
    a, b = make_dataset(20, 5), make_dataset(20, 5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        assert (x.scene, x.caption, x.prompt, x.answer) == (y.scene, y.caption, y.prompt, y.answer)


def test_different_seeds_differ():
    assert [s.caption for s in make_dataset(20, 1)] != [s.caption for s in make_dataset(20, 2)]


def test_caption_words_match_the_scene():
    for sample in make_dataset(50, 3):
        objs = sorted(sample.scene, key=lambda o: o.sort_key)
        words = tokenize(sample.caption)
        assert words[1:3] == [objs[0].color, objs[0].shape]
        if len(objs) > 1:
            assert words[-2:] == [objs[1].color, objs[1].shape]
        else:
            assert len(words) == 3


def test_scene_sizes_and_distinct_cells():
    for sample in make_dataset(60, 4):
        assert 1 <= len(sample.scene) <= 3
        assert len({(o.row, o.col) for o in sample.scene}) == len(sample.scene)
        assert len({(o.shape, o.color) for o in sample.scene}) == len(sample.scene)


def test_vocabulary_equals_enumerated_grammar():
    # written out by hand from the caption, question and prompt templates
    expected = {
        "a", "red", "green", "blue", "circle", "square", "triangle",
        "above", "below", "left", "right", "of",
        "what", "color", "is", "the", "?", "shape", "one", "how", "many", "shapes", "are", "there",
        "answer", "question", "using", "single", "word", "or", "phrase", ".",
        "two", "three",
    }
    vocab = Vocabulary.from_grammar()
    assert set(vocab.words[3:]) == expected
    assert len(vocab) == 37
    assert {w for s in enumerate_sentences() for w in tokenize(s)} == expected


def test_relations():
    a, b = SceneObject("circle", "red", 0, 1), SceneObject("square", "blue", 2, 1)
    assert relation(a, b) == "above" and relation(b, a) == "below"
    c = SceneObject("triangle", "green", 0, 3)
    assert relation(a, c) == "left of" and relation(c, a) == "right of"


def test_caption_is_order_independent():
    objs = (SceneObject("square", "red", 1, 1), SceneObject("circle", "green", 3, 0))
    assert caption_for(objs) == caption_for(objs[::-1]) == "a green circle below a red square"


def test_render_paints_scene_colors_only_in_object_cells():
    obj = SceneObject("square", "blue", 2, 3)
    img = render((obj,), 64)
    cell = img[32:48, 48:64]
    assert cell.any()
    img[32:48, 48:64] = 0
    assert not img.any()


def test_instruction_samples_have_single_word_answers():
    vocab = Vocabulary.from_grammar()
    prompt = vocab.encode(SHORT_ANSWER_PROMPT)
    samples = make_dataset(80, 6, vocab, instruct=True)
    qa = [s for s in samples if s.prompt]
    assert 0 < len(qa) < len(samples)
    for s in qa:
        assert len(s.answer) == 1
        assert s.prompt[-len(prompt) :] == prompt
        ids, sup = s.sequence(vocab)
        assert sup == [False] * (1 + len(s.prompt)) + [True, True]


def test_round_trip_encoding():
    vocab = Vocabulary.from_grammar()
    text = "a red circle left of a blue triangle"
    assert vocab.decode(vocab.encode(text)) == text
    with pytest.raises(ConfigurationError):
        vocab.encode("a purple circle")


def test_empty_dataset_is_rejected():
    with pytest.raises(ConfigurationError):
        make_dataset(0, 1)
