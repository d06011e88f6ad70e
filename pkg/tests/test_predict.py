"""Per-bag prediction and one-vs-all classification."""

import numpy as np
import pytest

from pmil.core import ClassModel
from pmil.errors import DimensionMismatchError, ValidationError
from pmil.predict import BagPrediction, ClassificationResult, classify_bag, predict_bag

from conftest import make_bag

SIGMOID_0_4 = 0.598687660112452  # high-precision sigmoid(0.4)


def unit_model(name="a", weight=1.0, bias=0.0):
    return ClassModel(class_name=name, weights=np.array([weight]), bias=bias)


def test_predict_bag_hand_case():
    bag = make_bag("b", [[0.4], [-0.4]])
    pred = predict_bag(unit_model(), bag)
    p0, p1 = SIGMOID_0_4, 1.0 - SIGMOID_0_4
    assert pred.bag_id == "b"
    assert pred.class_name == "a"
    assert pred.instance_probabilities[0] == pytest.approx(p0, abs=1e-12)
    assert pred.instance_probabilities[1] == pytest.approx(p1, abs=1e-12)
    assert pred.set_probability == pytest.approx(1.0 - (1.0 - p0) * (1.0 - p1), abs=1e-12)
    assert pred.argmax_index == 0


def test_predict_bag_argmax_tie_takes_first():
    bag = make_bag("b", [[0.3], [0.3], [0.9]])
    pred = predict_bag(unit_model(), bag)
    assert pred.argmax_index == 2
    tie = make_bag("t", [[0.3], [0.3]])
    assert predict_bag(unit_model(), tie).argmax_index == 0


def test_predict_bag_dimension_mismatch():
    bag = make_bag("b", [[1.0, 2.0]])
    with pytest.raises(DimensionMismatchError):
        predict_bag(unit_model(), bag)


def test_classify_bag_picks_highest_set_probability():
    bag = make_bag("b", [[2.0], [-1.0]])
    models = [unit_model("up", 1.0), unit_model("down", -1.0)]
    result = classify_bag(models, bag)
    assert result.predicted_class == "up"
    assert set(result.per_class_set_probabilities) == {"up", "down"}
    assert result.bag_id == "b"


def test_classify_bag_tie_breaks_lexicographically():
    bag = make_bag("b", [[0.5]])
    # w and -w give mirrored instance probabilities; make them identical
    models = [unit_model("zebra", 0.0), unit_model("aardvark", 0.0)]
    result = classify_bag(models, bag)
    assert result.predicted_class == "aardvark"


def test_classify_bag_needs_models():
    bag = make_bag("b", [[0.5]])
    with pytest.raises(ValidationError):
        classify_bag([], bag)


def test_classify_bag_rejects_duplicate_class_names():
    bag = make_bag("b", [[0.5]])
    with pytest.raises(ValidationError):
        classify_bag([unit_model("a"), unit_model("a", -1.0)], bag)


def test_bag_prediction_validation():
    probs = (0.2, 0.7)
    set_p = 1.0 - (1.0 - 0.2) * (1.0 - 0.7)
    good = BagPrediction(
        bag_id="b", class_name="a", set_probability=set_p,
        instance_probabilities=probs, argmax_index=1,
    )
    assert good.instance_probabilities == probs
    with pytest.raises(ValidationError):  # argmax not the first maximum
        BagPrediction(
            bag_id="b", class_name="a", set_probability=set_p,
            instance_probabilities=probs, argmax_index=0,
        )
    with pytest.raises(ValidationError):  # set probability inconsistent
        BagPrediction(
            bag_id="b", class_name="a", set_probability=0.5,
            instance_probabilities=probs, argmax_index=1,
        )
    with pytest.raises(ValidationError):  # probabilities must be in (0, 1)
        BagPrediction(
            bag_id="b", class_name="a", set_probability=set_p,
            instance_probabilities=(0.2, 1.0), argmax_index=1,
        )
    with pytest.raises(ValidationError):
        BagPrediction(
            bag_id="b", class_name="a", set_probability=0.5,
            instance_probabilities=(), argmax_index=0,
        )


def test_classification_result_validation():
    ClassificationResult(
        bag_id="b", predicted_class="a",
        per_class_set_probabilities={"a": 0.9, "b": 0.5},
    )
    with pytest.raises(ValidationError):
        ClassificationResult(
            bag_id="b", predicted_class="b",
            per_class_set_probabilities={"a": 0.9, "b": 0.5},
        )
    # ties must resolve to the lexicographically smaller class
    with pytest.raises(ValidationError):
        ClassificationResult(
            bag_id="b", predicted_class="b",
            per_class_set_probabilities={"a": 0.5, "b": 0.5},
        )


def test_predictions_round_trip_probability_identity(rng):
    # predicted set probability must satisfy the noisy-OR identity exactly
    # enough to reconstruct from the instance probabilities
    bag = make_bag("b", rng.normal(size=(6, 3)))
    model = ClassModel(class_name="a", weights=rng.normal(size=3), bias=0.1)
    pred = predict_bag(model, bag)
    from pmil.core import bag_probability

    assert pred.set_probability == pytest.approx(
        bag_probability(pred.instance_probabilities), abs=1e-9
    )
