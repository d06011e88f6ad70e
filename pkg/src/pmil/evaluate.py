"""Evaluation: average precision at a tube-overlap threshold, mSERO, accuracy.

A bag counts as correctly localized when the instance the model ranks highest
overlaps the ground-truth tube at or above the IOU threshold.  mAP ranks test
bags per class by their noisy-OR set probability and averages per-class AP;
the AP denominator is the class's ground-truth positive count, so raising the
IOU threshold can only lose hits and mAP is non-increasing in the threshold.
mSERO measures localization sharpness alone: the squared gap between the
model's top instance probability and its probability on the best-overlap
instance, averaged over bags.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .core import Bag, ClassModel
from .errors import MissingGeometryError, ValidationError
from .geometry import Tube, recall_iou_curve, tube_coverage, tube_iou
from .predict import BagPrediction, classify_bag, predict_bag

DEFAULT_SWEEP = tuple(round(0.1 + 0.05 * i, 2) for i in range(11))  # 0.10 .. 0.60
DEFAULT_RECALL_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(21))  # 0.00 .. 1.00


@dataclass(frozen=True)
class ScatterRecord:
    """One instance's probability-versus-overlap point for scatter plots."""

    bag_id: str
    instance_id: str
    probability: float
    iou: float
    is_argmax: bool
    is_optimal: bool


@dataclass(frozen=True)
class EvalReport:
    """Everything the experiment tables and plots are built from."""

    per_class_ap: dict[str, float]
    map_score: float
    per_class_msero: dict[str, float]
    classification_accuracy: float
    recall_iou_samples: tuple[tuple[float, float], ...]
    scatter_records: tuple[ScatterRecord, ...]
    map_sweep: tuple[tuple[float, float], ...]
    omitted_classes: tuple[str, ...]
    iou_threshold: float


def average_precision(
    ranked: Sequence[tuple[float, bool]],
    *,
    num_positives: int | None = None,
    eleven_point: bool = False,
) -> float:
    """AP of a scored ranking: mean precision over the positive hits.

    num_positives overrides the denominator (ground-truth positive count)
    when some positives never appear as correct entries in the ranking;
    eleven_point switches to the 11-point interpolated variant.
    """
    items = list(ranked)
    if not items:
        raise ValidationError("average_precision needs a nonempty ranking")
    items.sort(key=lambda sc: -sc[0])  # stable: ties keep input order
    total_pos = sum(1 for _s, c in items if c) if num_positives is None else num_positives
    if total_pos <= 0:
        return 0.0
    hits = 0
    precisions = []  # precision at each hit, paired with recall for interpolation
    for k, (_score, correct) in enumerate(items, start=1):
        if correct:
            hits += 1
            precisions.append((hits / total_pos, hits / k))
    if not eleven_point:
        return sum(p for _r, p in precisions) / total_pos
    levels = [i / 10 for i in range(11)]
    ap = 0.0
    for level in levels:
        ap += max((p for r, p in precisions if r >= level), default=0.0)
    return ap / len(levels)


def best_iou_index(bag: Bag, *, use_coverage: bool = False) -> int:
    """Index of the instance whose tube best overlaps ground truth (ties: lowest)."""
    gt = _require_ground_truth(bag)
    best_j, best_v = 0, -1.0
    for j, inst in enumerate(bag.instances):
        tube = _require_tube(bag, j)
        v = tube_coverage(tube, gt) if use_coverage else tube_iou(tube, gt)
        if v > best_v:
            best_j, best_v = j, v
    return best_j


def _require_ground_truth(bag: Bag) -> Tube:
    if bag.ground_truth_tube is None:
        raise MissingGeometryError(f"bag {bag.id!r} has no ground-truth tube")
    return bag.ground_truth_tube


def _require_tube(bag: Bag, index: int) -> Tube:
    tube = bag.instances[index].tube
    if tube is None:
        raise MissingGeometryError(
            f"instance {bag.instances[index].id!r} of bag {bag.id!r} has no tube"
        )
    return tube


def localization_correct(
    prediction: BagPrediction,
    bag: Bag,
    iou_threshold: float,
    *,
    use_coverage: bool = False,
) -> bool:
    """True when the argmax instance's tube overlaps ground truth at >= threshold."""
    if prediction.bag_id != bag.id:
        raise ValidationError(
            f"prediction is for bag {prediction.bag_id!r}, not {bag.id!r}"
        )
    gt = _require_ground_truth(bag)
    tube = _require_tube(bag, prediction.argmax_index)
    overlap = tube_coverage(tube, gt) if use_coverage else tube_iou(tube, gt)
    return overlap >= iou_threshold


@dataclass(frozen=True)
class MapResult:
    per_class_ap: dict[str, float]
    map_score: float
    omitted_classes: tuple[str, ...]


def map_at_threshold(
    predictions: dict[str, Sequence[BagPrediction]],
    bags: Sequence[Bag],
    iou_threshold: float,
    *,
    use_coverage: bool = False,
    eleven_point: bool = False,
) -> MapResult:
    """Per-class AP and their mean, ranking bags by set probability.

    predictions maps each class name to that model's predictions aligned with
    bags.  A ranked bag is a hit for class a only when its true label is a
    and its argmax instance clears the overlap threshold.  Classes with no
    ground-truth bag in the test set are omitted from the mean and reported.
    """
    bags = list(bags)
    if not bags:
        raise ValidationError("map_at_threshold needs a nonempty bag list")
    per_class_ap: dict[str, float] = {}
    omitted: list[str] = []
    for class_name in predictions:
        preds = list(predictions[class_name])
        if len(preds) != len(bags):
            raise ValidationError(
                f"class {class_name!r} has {len(preds)} predictions for {len(bags)} bags"
            )
        gt_count = sum(1 for bag in bags if bag.class_label == class_name)
        if gt_count == 0:
            omitted.append(class_name)
            continue
        ranked = []
        for pred, bag in zip(preds, bags):
            correct = bag.class_label == class_name and localization_correct(
                pred, bag, iou_threshold, use_coverage=use_coverage
            )
            ranked.append((pred.set_probability, correct))
        per_class_ap[class_name] = average_precision(
            ranked, num_positives=gt_count, eleven_point=eleven_point
        )
    if per_class_ap:
        map_score = sum(per_class_ap.values()) / len(per_class_ap)
    else:
        map_score = 0.0
    return MapResult(
        per_class_ap=per_class_ap, map_score=map_score, omitted_classes=tuple(omitted)
    )


def msero(
    predictions: Sequence[BagPrediction],
    bags: Sequence[Bag],
    *,
    use_coverage: bool = False,
) -> float:
    """Mean squared gap between the top probability and the best-overlap probability."""
    predictions = list(predictions)
    bags = list(bags)
    if not bags:
        raise ValidationError("msero needs a nonempty bag list")
    if len(predictions) != len(bags):
        raise ValidationError(
            f"{len(predictions)} predictions for {len(bags)} bags"
        )
    total = 0.0
    for pred, bag in zip(predictions, bags):
        if pred.bag_id != bag.id:
            raise ValidationError(f"prediction is for bag {pred.bag_id!r}, not {bag.id!r}")
        k = pred.instance_probabilities[best_iou_index(bag, use_coverage=use_coverage)]
        top = pred.instance_probabilities[pred.argmax_index]
        total += (k - top) ** 2
    return total / len(bags)


def scatter_data(prediction: BagPrediction, bag: Bag) -> list[ScatterRecord]:
    """One (probability, IOU) record per instance, flagging argmax and optimal."""
    if prediction.bag_id != bag.id:
        raise ValidationError(
            f"prediction is for bag {prediction.bag_id!r}, not {bag.id!r}"
        )
    gt = _require_ground_truth(bag)
    optimal = best_iou_index(bag)
    records = []
    for j, inst in enumerate(bag.instances):
        tube = _require_tube(bag, j)
        records.append(
            ScatterRecord(
                bag_id=bag.id,
                instance_id=inst.id,
                probability=prediction.instance_probabilities[j],
                iou=tube_iou(tube, gt),
                is_argmax=(j == prediction.argmax_index),
                is_optimal=(j == optimal),
            )
        )
    return records


def evaluate_dataset(
    models: Sequence[ClassModel],
    bags: Sequence[Bag],
    *,
    iou_threshold: float = 0.2,
    sweep_thresholds: Sequence[float] = DEFAULT_SWEEP,
    recall_thresholds: Sequence[float] = DEFAULT_RECALL_THRESHOLDS,
    use_coverage: bool = False,
    eleven_point: bool = False,
) -> EvalReport:
    """Score a model set on a test bag list and assemble the full report.

    Callers are responsible for applying the same proposal filtering that was
    used at training time before handing bags in here.
    """
    models = sorted(models, key=lambda m: m.class_name)
    bags = list(bags)
    if not models:
        raise ValidationError("evaluate_dataset needs at least one model")
    if not bags:
        raise ValidationError("evaluate_dataset needs at least one bag")
    names = [m.class_name for m in models]
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate model class names: {sorted(names)}")
    predictions = {m.class_name: [predict_bag(m, bag) for bag in bags] for m in models}
    by_class = {m.class_name: m for m in models}

    main = map_at_threshold(
        predictions, bags, iou_threshold, use_coverage=use_coverage, eleven_point=eleven_point
    )
    sweep = tuple(
        (
            float(tau),
            map_at_threshold(
                predictions, bags, tau, use_coverage=use_coverage, eleven_point=eleven_point
            ).map_score,
        )
        for tau in sweep_thresholds
    )

    per_class_msero: dict[str, float] = {}
    for class_name in names:
        own = [
            (pred, bag)
            for pred, bag in zip(predictions[class_name], bags)
            if bag.class_label == class_name
        ]
        if own:
            per_class_msero[class_name] = msero(
                [p for p, _b in own], [b for _p, b in own], use_coverage=use_coverage
            )

    correct = 0
    for bag in bags:
        result = classify_bag(list(models), bag)
        if result.predicted_class == bag.class_label:
            correct += 1
    accuracy = correct / len(bags)

    proposal_sets = []
    for bag in bags:
        gt = _require_ground_truth(bag)
        tubes = [_require_tube(bag, j) for j in range(len(bag.instances))]
        proposal_sets.append((tubes, gt))
    recall_samples = tuple(
        (float(t), float(r)) for t, r in recall_iou_curve(proposal_sets, list(recall_thresholds))
    )

    scatter: list[ScatterRecord] = []
    for i, bag in enumerate(bags):
        model = by_class.get(bag.class_label)
        if model is not None:
            scatter.extend(scatter_data(predictions[bag.class_label][i], bag))

    return EvalReport(
        per_class_ap=main.per_class_ap,
        map_score=main.map_score,
        per_class_msero=per_class_msero,
        classification_accuracy=accuracy,
        recall_iou_samples=recall_samples,
        scatter_records=tuple(scatter),
        map_sweep=sweep,
        omitted_classes=main.omitted_classes,
        iou_threshold=float(iou_threshold),
    )


def render_report_text(report: EvalReport) -> str:
    """Human-readable summary mirroring the experiment tables.

    AP and mAP are rendered as percentages; mSERO is shown both raw (its
    natural [0, 1] scale) and times 100 for comparison with conventions that
    report it scaled.
    """
    lines = []
    lines.append(f"== evaluation @ IOU {report.iou_threshold:.2f} ==")
    lines.append("")
    lines.append("per-class AP (%):")
    for name in sorted(report.per_class_ap):
        lines.append(f"  {name:<24s} {100 * report.per_class_ap[name]:6.2f}")
    lines.append(f"mAP (%): {100 * report.map_score:.2f}")
    if report.omitted_classes:
        lines.append(
            "classes omitted from the mean (no test bags): "
            + ", ".join(report.omitted_classes)
        )
    lines.append("")
    lines.append("per-class mSERO (raw / x100):")
    for name in sorted(report.per_class_msero):
        v = report.per_class_msero[name]
        lines.append(f"  {name:<24s} {v:.6f} / {100 * v:.4f}")
    lines.append("")
    lines.append(f"classification accuracy: {report.classification_accuracy:.4f}")
    lines.append("")
    lines.append("mAP vs IOU threshold:")
    for tau, score in report.map_sweep:
        lines.append(f"  {tau:.2f} {100 * score:6.2f}")
    lines.append("")
    lines.append("recall vs IOU threshold:")
    for tau, rec in report.recall_iou_samples:
        lines.append(f"  {tau:.2f} {rec:.4f}")
    lines.append("")
    return "\n".join(lines)
