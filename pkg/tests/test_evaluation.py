import math
import random

import numpy as np
import pytest

from madapt.evaluation import (
    EvalReport,
    ensemble_predict,
    evaluate,
    logits_for,
    probe_domain_gap,
    report_from_scores,
    score_predictions,
    vqa_accuracy,
)
from madapt.model import DualDomainModel

import oracles
from helpers import TOY, toy_batch


def test_vqa_accuracy_matches_bruteforce_on_1000_cases():
    rnd = random.Random(11)
    pool = ["yes", "no", "red", "2", " Yes", "RED "]
    for _ in range(1000):
        answers = [rnd.choice(pool) for _ in range(10)]
        pred = rnd.choice(pool)
        assert vqa_accuracy(pred, answers) == float(oracles.vqa_bruteforce(pred, answers))


@pytest.mark.parametrize(
    "matches, expected",
    [(0, 0.0), (1, 0.3), (2, 0.6), (3, 0.9), (4, 1.0), (10, 1.0)],
)
def test_vqa_accuracy_known_values(matches, expected):
    answers = ["cat"] * matches + ["dog"] * (10 - matches)
    assert vqa_accuracy("cat", answers) == pytest.approx(expected, abs=1e-15)


def test_two_matches_is_exactly_point_six():
    assert vqa_accuracy("cat", ["cat", "cat"] + ["x"] * 8) == 0.6


def test_vqa_accuracy_needs_ten_answers():
    with pytest.raises(ValueError):
        vqa_accuracy("a", ["a"] * 9)


def test_report_per_category_and_missing_category_is_nan():
    rep = report_from_scores([1.0, 0.5, 0.0, 0.3], ["yes/no", "yes/no", "other", "unanswerable"])
    assert rep.overall == pytest.approx(0.45)
    assert rep.per_category["yes/no"] == 0.75
    assert rep.per_category["other"] == 0.0
    assert rep.per_category["answerable"] == 0.3
    assert math.isnan(rep.per_category["number"])
    assert rep.counts == {"yes/no": 2, "number": 0, "other": 1, "answerable": 1}


def test_report_csv_layout():
    rep = report_from_scores([1.0], ["other"])
    lines = rep.to_csv().splitlines()
    assert lines[0] == "category,accuracy,count"
    assert lines[1] == "overall,1.0,1"
    assert [l.split(",")[0] for l in lines[2:]] == ["yes/no", "number", "other", "answerable"]


def test_evaluate_equals_scoring_argmax():
    rng = np.random.default_rng(0)
    m = DualDomainModel(TOY, seed=1)
    b = toy_batch(rng, n=12)
    answers = [f"a{i}" for i in range(TOY.n_answers_source)]
    pred = np.argmax(logits_for(m, b, "source"), axis=1)
    rep = evaluate(m, b, "source", answers)
    assert isinstance(rep, EvalReport)
    assert rep.to_csv() == score_predictions(pred, answers, b).to_csv()


def test_ensemble_of_one_is_the_model_and_order_free():
    rng = np.random.default_rng(1)
    b = toy_batch(rng, n=10)
    models = [DualDomainModel(TOY, seed=s) for s in range(3)]
    single = ensemble_predict(models[:1], b, "source")
    np.testing.assert_array_equal(single, np.argmax(logits_for(models[0], b, "source"), axis=1))
    np.testing.assert_array_equal(ensemble_predict(models, b, "source"), ensemble_predict(models[::-1], b, "source"))
    with pytest.raises(ValueError):
        ensemble_predict([], b, "source")


def test_ensemble_of_identical_models_equals_member():
    rng = np.random.default_rng(2)
    b = toy_batch(rng, n=10)
    m = DualDomainModel(TOY, seed=4)
    np.testing.assert_array_equal(ensemble_predict([m, m.clone()], b, "target"), ensemble_predict([m], b, "target"))


def test_probe_identical_sets_is_chance():
    X = np.random.default_rng(3).normal(size=(500, 6))
    res = probe_domain_gap(X, X.copy(), seed=0)
    assert abs(res.accuracy - 0.5) <= 0.05
    assert abs(res.mmd_sq) <= 1e-6


def test_probe_separated_sets_is_near_perfect():
    rng = np.random.default_rng(4)
    res = probe_domain_gap(rng.normal(size=(300, 4)), rng.normal(size=(300, 4)) + 3.0, seed=0)
    assert res.accuracy >= 0.98
    assert res.mmd_sq > 0.1


def test_probe_is_seeded_and_checks_shapes():
    rng = np.random.default_rng(5)
    X, Y = rng.normal(size=(100, 3)), rng.normal(size=(100, 3)) + 0.5
    assert probe_domain_gap(X, Y, seed=1) == probe_domain_gap(X, Y, seed=1)
    with pytest.raises(ValueError):
        probe_domain_gap(X, Y[:, :2])
