from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unicontext import exceptions, metrics, testing
from unicontext.quantizers.annotations import BBox

REF = "a small red square in the top left"


@pytest.mark.parametrize("seed", range(5))
def test_mask_iou__matches_reference(seed):
    rng = np.random.default_rng(seed)
    pred = rng.random((8, 8)) > 0.5
    gt = rng.random((8, 8)) > 0.5

    assert metrics.mask_iou(pred, gt) == pytest.approx(testing.naive_iou(pred, gt))


def test_mask_iou__both_empty():
    empty = np.zeros((4, 4), dtype=bool)

    assert metrics.mask_iou(empty, empty) == 1.0


def test_miou():
    full = np.ones((2, 2), dtype=bool)
    half = np.array([[True, True], [False, False]])

    assert metrics.miou([full, half], [full, full]) == 0.75
    assert metrics.miou([], []) == 0.0


def test_miou__top_half_vs_left_half():
    top = np.zeros((4, 4), dtype=bool)
    top[:2] = True
    left = np.zeros((4, 4), dtype=bool)
    left[:, :2] = True

    assert metrics.miou([top], [left]) == pytest.approx(1 / 3)


def test_mae():
    full = np.ones((2, 2), dtype=bool)
    empty = np.zeros((2, 2), dtype=bool)
    half = np.array([[True, True], [False, False]])

    assert metrics.mae([full, half], [empty, empty]) == 0.75


@pytest.mark.parametrize("fn", [metrics.miou, metrics.mae])
def test_shape_mismatch(fn):
    with pytest.raises(exceptions.ImageShapeError):
        fn([np.zeros((2, 2))], [np.zeros((2, 3))])
    with pytest.raises(exceptions.ImageShapeError):
        fn([np.zeros((2, 2))], [])


def test_bleu4__identical():
    assert metrics.bleu4(REF, [REF]) == pytest.approx(1.0)


def test_bleu4__case_insensitive():
    assert metrics.bleu4(REF.upper(), [REF]) == pytest.approx(1.0)


@pytest.mark.parametrize("pred", ["", "blue bar", "   "])
def test_bleu4__zero(pred):
    assert metrics.bleu4(pred, [REF]) == 0.0


def test_bleu4__brevity_penalty():
    assert metrics.bleu4("a small red square", [REF]) == pytest.approx(math.exp(-1))


def test_bleu4__smoothed_orders():
    assert metrics.bleu4("red small", ["small red"]) == pytest.approx(0.5**0.25)


def test_bleu4__clipped_counts():
    # "red" appears once in the reference
    score = metrics.bleu4("red red red red", ["the red one"])

    assert 0.0 < score < metrics.bleu4("the red one", ["the red one"])


@given(
    st.lists(st.sampled_from(["a", "red", "bar", "in", "the", "top"]), max_size=8),
    st.lists(st.sampled_from(["a", "red", "bar", "in", "the", "top"]), max_size=8),
)
def test_bleu4__bounded(pred, ref):
    assert 0.0 <= metrics.bleu4(" ".join(pred), [" ".join(ref)]) <= 1.0 + 1e-12


def test_match_count__one_to_one():
    ious = np.array([[0.9, 0.8], [0.95, 0.1]])
    bleus = np.ones((2, 2))

    # Prediction 1 takes ground truth 0, prediction 0 falls back on 1
    assert metrics.match_count(ious, bleus, 0.5, 0.0) == 2
    assert metrics.match_count(ious, bleus, 0.85, 0.0) == 1
    assert metrics.match_count(ious, np.zeros((2, 2)), 0.5, 0.1) == 0


BOX = BBox(x1=0.1, y1=0.1, x2=0.5, y2=0.5)
FAR = BBox(x1=0.6, y1=0.6, x2=0.9, y2=0.9)


def test_map_lite__perfect():
    assert metrics.map_lite([(BOX, REF)], [(BOX, REF)]) == pytest.approx(1.0)


def test_map_lite__no_ground_truth():
    assert metrics.map_lite([(BOX, REF)], []) == 1.0


def test_map_lite__no_prediction():
    assert metrics.map_lite([], [(BOX, REF)]) == 0.0


def test_map_lite__duplicates_count_once():
    score = metrics.map_lite([(BOX, REF), (BOX, REF)], [(BOX, REF), (FAR, REF)])

    assert score == pytest.approx(0.5)


def test_map_lite__wrong_box():
    assert metrics.map_lite([(FAR, REF)], [(BOX, REF)]) == 0.0


def test_bleu4__worked_example():
    expected = (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25

    assert metrics.bleu4("a b c d e", ["a b c d f"]) == pytest.approx(expected)


WORDS = ["a", "red", "small", "bar", "in", "the", "top", "left"]


@given(
    st.lists(st.sampled_from(WORDS), max_size=9),
    st.lists(st.lists(st.sampled_from(WORDS), max_size=9), min_size=1, max_size=3),
)
def test_bleu4__matches_reference(pred, refs):
    pred_text = " ".join(pred)
    ref_texts = [" ".join(ref) for ref in refs]

    assert metrics.bleu4(pred_text, ref_texts) == pytest.approx(
        testing.naive_bleu4(pred_text, ref_texts), rel=1e-9, abs=1e-12
    )


GT = BBox(x1=0.0, y1=0.0, x2=1.0, y2=1.0)


def test_map_lite__partial_overlap():
    # IoU 0.45 passes the 0.3 and 0.4 thresholds only, at every BLEU threshold
    pred = BBox(x1=0.0, y1=0.0, x2=0.45, y2=1.0)

    assert pred.iou(GT) == pytest.approx(0.45)
    assert metrics.map_lite([(pred, REF)], [(GT, REF)]) == pytest.approx(0.4)


def test_map_lite__monotonic_in_overlap():
    scores = [
        metrics.map_lite([(BBox(x1=0.0, y1=0.0, x2=width, y2=1.0), REF)], [(GT, REF)])
        for width in np.linspace(0.05, 1.0, 20)
    ]

    assert scores == sorted(scores)
    assert scores[0] == 0.0
    assert scores[-1] == pytest.approx(1.0)


def test_map_lite__monotonic_in_caption():
    captions = ["blue", "a", "a small", "a small red", "a small red square", REF]
    scores = [metrics.map_lite([(BOX, caption)], [(BOX, REF)]) for caption in captions]

    assert scores == sorted(scores)
    assert scores[-1] == pytest.approx(1.0)


def test_map_lite__monotonic_in_matched_ground_truths():
    corner = BBox(x1=0.6, y1=0.0, x2=0.9, y2=0.3)
    gts = [(BOX, REF), (FAR, "a big blue bar"), (corner, "a dot")]

    scores = [metrics.map_lite(gts[:count], gts) for count in range(len(gts) + 1)]

    assert scores == pytest.approx([0.0, 1 / 3, 2 / 3, 1.0])


boxes = st.tuples(
    st.integers(0, 7), st.integers(0, 7), st.integers(1, 8), st.integers(1, 8)
).map(
    lambda t: BBox(
        x1=min(t[0], t[2] - 1) / 8,
        y1=min(t[1], t[3] - 1) / 8,
        x2=t[2] / 8,
        y2=t[3] / 8,
    )
)
regions = st.tuples(
    boxes, st.lists(st.sampled_from(WORDS), min_size=1, max_size=5).map(" ".join)
)


@given(st.lists(regions, max_size=4), st.lists(regions, max_size=4))
def test_map_lite__matches_reference(preds, gts):
    assert metrics.map_lite(preds, gts) == pytest.approx(
        testing.naive_map_lite(preds, gts)
    )
