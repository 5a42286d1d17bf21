from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crystal.errors import ContractError, VocabularyError
from crystal.taskgen import (
    ANSWERS, COLORS, KINDS, VOCAB, Obj, Scene, make_sample, make_split, render, sample_seed,
)


def oracle_answer(sample):
    """Recompute the label from the scene object list only."""
    words = VOCAB.decode(sample.question)
    objs = sample.scene.objects
    if sample.kind == "count":
        color, shape = words[2], words[3]
        return str(sum(1 for o in objs if (o.color, o.shape) == (color, shape)))
    if sample.kind == "exist":
        color, shape = words[3], words[4]
        return "yes" if any((o.color, o.shape) == (color, shape) for o in objs) else "no"
    a = next(o for o in objs if (o.color, o.shape) == (words[0], words[1]))
    b = next(o for o in objs if (o.color, o.shape) == (words[6], words[7]))
    return "left" if a.center[1] < b.center[1] else "right"


def test_vocab_dense_and_small():
    assert len(VOCAB) < 64
    assert [VOCAB[t] for t in VOCAB.tokens] == list(range(len(VOCAB)))
    for special in ("BOS", "SEP", "ANS", "EOS", "PAD", "LAT", "LAT0", "LAT15"):
        assert special in VOCAB.ids


def test_vocab_unknown_token():
    with pytest.raises(VocabularyError):
        VOCAB["purple"]


def test_render_empty_scene_white():
    assert np.all(render(Scene(())) == 1.0)


def test_render_circle_matches_distance_oracle():
    obj = Obj("circle", "red", (20, 28), 3)
    img = render(Scene((obj,)))
    for y in range(64):
        for x in range(64):
            inside = (y - 20) ** 2 + (x - 28) ** 2 <= 9
            assert tuple(img[y, x]) == ((1.0, 0.0, 0.0) if inside else (1.0, 1.0, 1.0))


def test_render_color_does_not_change_support():
    objs = [Obj("triangle", "red", (12, 12)), Obj("square", "blue", (44, 36))]
    recolored = [Obj(o.shape, "green", o.center) for o in objs]
    a, b = render(Scene(tuple(objs))), render(Scene(tuple(recolored)))
    assert np.array_equal(np.any(a != 1.0, axis=-1), np.any(b != 1.0, axis=-1))


def test_count_three_red_circles():
    # search for a seed whose count sample asks about red circles with answer 3
    for seed in range(2000):
        s = make_sample(seed, "count")
        if VOCAB.decode(s.question) == ["how", "many", "red", "circle"] and s.answer_text() == "3":
            break
    else:
        pytest.fail("no red-circle count-3 sample in first 2000 seeds")
    assert sum(1 for o in s.scene.objects if (o.color, o.shape) == ("red", "circle")) == 3


def test_exist_negative():
    for seed in range(50):
        s = make_sample(seed, "exist")
        if s.answer_text() == "no":
            assert oracle_answer(s) == "no"
            return
    pytest.fail("no negative exist sample")


def test_same_seed_same_sample():
    a, b = make_sample(42, "relation"), make_sample(42, "relation")
    assert a.question == b.question and a.answer == b.answer
    assert a.image.tobytes() == b.image.tobytes()


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**40), st.sampled_from(KINDS))
def test_generator_label_matches_oracle(seed, kind):
    s = make_sample(seed, kind)
    assert s.answer_text() == oracle_answer(s)
    assert VOCAB.token(s.answer[0]) in ANSWERS
    assert len(s.question) <= 12
    objs = s.scene.objects
    assert 2 <= len(objs) <= 5
    for i, a in enumerate(objs):
        for b in objs[i + 1 :]:
            dist = np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
            assert dist > a.radius + b.radius


def test_split_all_count():
    split = make_split(0, 100, (1.0, 0.0, 0.0))
    assert len(split) == 100 and all(s.kind == "count" for s in split)


def test_split_mix_dict_form():
    split = make_split(0, 50, {"relation": 1.0})
    assert all(s.kind == "relation" for s in split)


def test_count_answers_cover_all_values():
    freq = Counter(s.answer_text() for s in make_split(1, 1000))
    assert set(freq) == {str(i) for i in range(6)}
    assert max(freq.values()) / 1000 <= 0.4


def test_mixed_answer_marginals_balanced():
    freq = Counter(s.answer_text() for s in make_split(2, 1200, (1 / 3, 1 / 3, 1 / 3)))
    assert max(freq.values()) / 1200 <= 0.4


def test_train_eval_seeds_disjoint():
    train = {s.seed for s in make_split(5, 300, split="train")}
    ev = {s.seed for s in make_split(5, 300, split="eval")}
    assert not train & ev
    assert sample_seed(5, "train", 7) != sample_seed(5, "eval", 7)


def test_bad_mix():
    with pytest.raises(ContractError):
        make_split(0, 10, (0.5, 0.2, 0.2))
    with pytest.raises(ContractError):
        make_split(0, 0)


def test_colors_cover_palette():
    assert set(COLORS) == {"red", "green", "blue", "yellow"}
