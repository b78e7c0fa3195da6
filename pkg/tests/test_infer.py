import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from texparse.config import RunConfig
from texparse.evaluation import ImagePrediction, PredInstance
from texparse.head import HeadConfig, build_head
from texparse.infer import (
    assign_from_scores,
    assign_labels,
    build_prompt_universe,
    label_scores,
    load_predictions,
    merge_fpp,
    predict_image,
    save_predictions,
)
from texparse.prompts import DEFAULT_TEMPLATE, TextEmbedder, default_ensembles

EMB = TextEmbedder(seed=0)


def universe(labels, ensembles=None, ebp=False):
    return build_prompt_universe(labels, EMB, DEFAULT_TEMPLATE, ensembles, use_ebp=ebp)


def test_single_prompt_above_threshold():
    u = universe(["hat"])
    z = EMB.embed("a photo of a hat")[None]
    assert assign_labels(z, u, 0.5) == [("hat", pytest.approx(1.0))]
    assert assign_labels(-z, u, 0.5)[0][0] is None


def test_ensemble_synonym_maps_to_base_label():
    z = EMB.embed("a photo of a cap")[None]
    u = universe(["hat", "shoe"], default_ensembles())
    assert assign_labels(z, u, 0.5)[0][0] == "hat"
    plain = universe(["hat", "shoe"])
    assert label_scores(z, plain)[0, 0] < label_scores(z, u)[0, 0]


def test_universe_dedupes_and_appends_ebp():
    u = universe(["Face", "red hat", "face"], ebp=True)
    assert u.labels[:2] == ["face", "red hat"]
    assert len(u.labels) == len(set(u.labels)) == 2 + 18  # EBP repeats "face"


def test_empty_universe_raises():
    with pytest.raises(ValueError):
        assign_labels(np.ones((1, 4)), universe([]), 0.5)
    with pytest.raises(ValueError):
        assign_from_scores(np.zeros((2, 0)), 0.5)


def test_ties_break_to_lowest_index():
    assert assign_from_scores(np.array([[0.7, 0.7, 0.1]]), 0.5) == [(0, 0.7)]


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_argmax_invariant_to_positive_scaling(seed, c):
    s = np.random.default_rng(seed).uniform(-1, 1, (5, 4))
    a = assign_from_scores(s, 0.3)
    b = assign_from_scores(s * c, 0.3 * c)
    assert [k for k, _ in a] == [k for k, _ in b]


@given(st.integers(0, 2**31 - 1))
def test_labels_come_from_universe(seed):
    z = np.random.default_rng(seed).normal(size=(6, EMB.dim))
    u = universe(["hat", "left shoe", "tops"], default_ensembles(), ebp=True)
    for label, _ in assign_labels(z, u, -1.0):
        assert label in u.labels


def _part(y0, y1, x0, x1, score=0.5):
    m = np.zeros((8, 8), bool)
    m[y0:y1, x0:x1] = True
    return PredInstance(m, "x", score)


def test_merge_fpp_cases():
    assert merge_fpp([]) == []
    a, b = _part(0, 2, 0, 2, 0.3), _part(2, 4, 0, 2, 0.9)  # touching, disjoint
    (person,) = merge_fpp([a, b])
    assert person.mask.sum() == a.mask.sum() + b.mask.sum() and person.score == 0.9
    c, d = _part(0, 3, 0, 3), _part(1, 4, 1, 4)
    (merged,) = merge_fpp([c, d])
    assert merged.mask.sum() < c.mask.sum() + d.mask.sum()
    far = merge_fpp([_part(0, 2, 0, 2), _part(5, 7, 5, 7)])
    assert len(far) == 2
    grouped = merge_fpp([_part(0, 2, 0, 2), _part(5, 7, 5, 7)], groups=[1, 1])
    assert len(grouped) == 1 and grouped[0].label == "person"


def test_predict_image_reduction():
    head = build_head(6, HeadConfig(num_queries=5, hidden_dim=8, embed_dim=EMB.dim, dec_layers=1, heads=2), seed=0)
    cfg = RunConfig.from_dict({"infer": {"threshold": -1.0}})
    feats = torch.randn(6, 16, 16, generator=torch.Generator().manual_seed(0))
    pred = predict_image(head, feats, universe(["hat", "tops"]), cfg, "img", (32, 32))
    assert pred.semantic.shape == (32, 32)
    assert pred.semantic.min() >= -1 and pred.semantic.max() < len(pred.labels)
    assert all(i.mask.shape == (32, 32) and i.mask.any() for i in pred.instances)
    again = predict_image(head, feats, universe(["hat", "tops"]), cfg, "img", (32, 32))
    assert np.array_equal(pred.semantic, again.semantic)
    strict = predict_image(head, feats, universe(["hat", "tops"]), RunConfig.from_dict({"infer": {"threshold": 1.01}}), "img")
    assert strict.instances == [] and (strict.semantic == -1).all()


def test_prediction_files_roundtrip(tmp_path):
    m = np.zeros((4, 5), bool)
    m[1:3, 2:4] = True
    sem = np.where(m, 0, -1)
    pred = ImagePrediction("im/0", ["red hat"], sem, [PredInstance(m, "red hat", 0.8123456789)])
    save_predictions([pred], tmp_path)
    back = load_predictions(tmp_path)["im/0"]
    assert back.labels == ["red hat"] and np.array_equal(back.semantic, sem)
    assert np.array_equal(back.instances[0].mask, m) and back.instances[0].score == 0.812346
