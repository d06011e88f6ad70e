"""Per-bag localization and one-vs-all classification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Bag, ClassModel, bag_probability, sigmoid_array
from .errors import DimensionMismatchError, ValidationError


@dataclass(frozen=True)
class BagPrediction:
    """One model's view of one bag: per-instance probabilities plus the noisy-OR."""

    bag_id: str
    class_name: str
    set_probability: float
    instance_probabilities: tuple[float, ...]
    argmax_index: int

    def __post_init__(self) -> None:
        probs = tuple(float(p) for p in self.instance_probabilities)
        object.__setattr__(self, "instance_probabilities", probs)
        if not probs:
            raise ValidationError(f"prediction for bag {self.bag_id!r} has no instances")
        for p in probs:
            if not (0.0 < p < 1.0):
                raise ValidationError(
                    f"prediction for bag {self.bag_id!r} has probability {p!r} outside (0, 1)"
                )
        if not (0 <= self.argmax_index < len(probs)):
            raise ValidationError(
                f"argmax index {self.argmax_index} out of range for {len(probs)} instances"
            )
        if probs.index(max(probs)) != self.argmax_index:
            raise ValidationError(
                f"argmax index {self.argmax_index} is not the first maximum "
                f"for bag {self.bag_id!r}"
            )
        if abs(bag_probability(probs) - self.set_probability) > 1e-9:
            raise ValidationError(
                f"set probability {self.set_probability!r} inconsistent with "
                f"instance probabilities for bag {self.bag_id!r}"
            )


@dataclass(frozen=True)
class ClassificationResult:
    bag_id: str
    predicted_class: str
    per_class_set_probabilities: dict[str, float]

    def __post_init__(self) -> None:
        if not self.per_class_set_probabilities:
            raise ValidationError(f"classification for bag {self.bag_id!r} has no classes")
        expected = min(
            self.per_class_set_probabilities,
            key=lambda c: (-self.per_class_set_probabilities[c], c),
        )
        if self.predicted_class != expected:
            raise ValidationError(
                f"predicted class {self.predicted_class!r} is not the probability "
                f"argmax {expected!r} for bag {self.bag_id!r}"
            )


def predict_bag(model: ClassModel, bag: Bag) -> BagPrediction:
    """Score every instance under the model; ties at the max go to the lowest index."""
    if model.dimension != bag.dimension:
        raise DimensionMismatchError(
            f"model {model.class_name!r} has dimension {model.dimension} "
            f"but bag {bag.id!r} has dimension {bag.dimension}"
        )
    probs = sigmoid_array(bag.feature_matrix() @ model.weights + model.bias)
    return BagPrediction(
        bag_id=bag.id,
        class_name=model.class_name,
        set_probability=bag_probability(probs.tolist()),
        instance_probabilities=tuple(float(p) for p in probs),
        argmax_index=int(np.argmax(probs)),
    )


def classify_bag(models: list[ClassModel], bag: Bag) -> ClassificationResult:
    """One-vs-all: the class whose model assigns the highest set probability wins.

    Exact probability ties resolve to the lexicographically smallest class name.
    """
    if not models:
        raise ValidationError("classify_bag needs at least one model")
    names = [m.class_name for m in models]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate class names among models")
    per_class = {m.class_name: predict_bag(m, bag).set_probability for m in models}
    predicted = min(per_class, key=lambda c: (-per_class[c], c))
    return ClassificationResult(
        bag_id=bag.id,
        predicted_class=predicted,
        per_class_set_probabilities=per_class,
    )
