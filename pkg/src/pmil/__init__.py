"""Weakly supervised multiple-instance learning over bags of tube proposals.

Per-class logistic instance models aggregate into noisy-OR bag probabilities,
trained with projected stochastic subgradient descent and optional between-
epoch set splitting; evaluation covers tube-overlap mAP, mSERO, recall-IOU
curves, and one-vs-all classification accuracy.
"""

from .core import (
    Bag,
    BinaryLabel,
    ClassModel,
    Hyperparameters,
    Instance,
    bag_probability,
    instance_probability,
    sigmoid,
    sigmoid_array,
)
from .data import (
    Dataset,
    SyntheticResult,
    SyntheticSpec,
    aggregate_frame_features,
    generate_synthetic,
    load_dataset,
    load_model,
    load_predictions,
    load_report,
    save_dataset,
    save_model,
    save_predictions,
    save_report,
)
from .errors import (
    DataFormatError,
    DimensionMismatchError,
    MissingGeometryError,
    NumericalError,
    PmilError,
    ValidationError,
)
from .evaluate import (
    EvalReport,
    ScatterRecord,
    average_precision,
    best_iou_index,
    evaluate_dataset,
    localization_correct,
    map_at_threshold,
    msero,
    scatter_data,
)
from .geometry import (
    Box,
    Tube,
    filter_large_proposals,
    recall_iou_curve,
    spatial_iou,
    tube_coverage,
    tube_iou,
    volume_fraction,
)
from .predict import BagPrediction, ClassificationResult, classify_bag, predict_bag
from .train import (
    LossBreakdown,
    TrainingState,
    bag_gradient,
    hinge_subgradient,
    objective,
    sgd_step,
    split_sets,
    train_class,
)

__version__ = "0.1.0"

__all__ = [
    "Bag",
    "BagPrediction",
    "BinaryLabel",
    "Box",
    "ClassModel",
    "ClassificationResult",
    "DataFormatError",
    "Dataset",
    "DimensionMismatchError",
    "EvalReport",
    "Hyperparameters",
    "Instance",
    "LossBreakdown",
    "MissingGeometryError",
    "NumericalError",
    "PmilError",
    "ScatterRecord",
    "SyntheticResult",
    "SyntheticSpec",
    "TrainingState",
    "Tube",
    "ValidationError",
    "aggregate_frame_features",
    "average_precision",
    "bag_gradient",
    "bag_probability",
    "best_iou_index",
    "classify_bag",
    "evaluate_dataset",
    "filter_large_proposals",
    "generate_synthetic",
    "hinge_subgradient",
    "instance_probability",
    "load_dataset",
    "load_model",
    "load_predictions",
    "load_report",
    "localization_correct",
    "map_at_threshold",
    "msero",
    "objective",
    "predict_bag",
    "recall_iou_curve",
    "save_dataset",
    "save_model",
    "save_predictions",
    "save_report",
    "scatter_data",
    "sgd_step",
    "sigmoid",
    "sigmoid_array",
    "spatial_iou",
    "split_sets",
    "train_class",
    "tube_coverage",
    "tube_iou",
    "volume_fraction",
]
