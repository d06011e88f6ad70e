"""Domain types and the two probability primitives everything else builds on.

Instances carry feature vectors (optionally with tube geometry), bags collect
instances under a single weak class label, and a ClassModel scores instances
with a logistic function whose bag-level aggregate is a noisy-OR.  All types
are immutable after construction; every operation here is a pure function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatchError, ValidationError
from .geometry import Tube

# Open-interval clamp bounds: probabilities returned by this module never
# reach 0.0 or 1.0 exactly, so log(p) and log(1-p) stay finite downstream.
_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)
_LOGIT_CLIP = 500.0

BinaryLabel = int  # per-class bag label, 0 or 1


def _as_readonly_f64(values: Sequence[float] | np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{what} must be a 1-d vector, got shape {arr.shape}")
    if arr.size == 0:
        raise ValidationError(f"{what} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} contains non-finite components")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Hyperparameters:
    """Training and filtering knobs.

    lam is the L2 weight that also drives the 1/(t*lam) step schedule and the
    1/sqrt(lam) projection radius; beta and gamma weight the bag cross-entropy
    and instance hinge terms; eta is the hinge margin; zeta the instance
    positivity threshold; omega the split threshold (or, in top_k mode, top_k
    counts instances instead); pi the number of epochs, one split between
    consecutive epochs when splitting is enabled.
    """

    lam: float = 0.01
    beta: float = 1.0
    gamma: float = 0.1
    eta: float = 1.0
    zeta: float = 0.5
    omega: float = 0.1
    pi: int = 8
    filter_max_volume_fraction: float = 0.75
    split_mode: str = "threshold"
    top_k: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValidationError(f"lam must be a positive finite real, got {self.lam}")
        for name in ("beta", "gamma", "eta"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValidationError(f"{name} must be nonnegative, got {v}")
        for name in ("zeta", "omega"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValidationError(f"{name} must lie in (0, 1), got {v}")
        if not (isinstance(self.pi, int) and self.pi >= 1):
            raise ValidationError(f"pi must be a positive integer, got {self.pi!r}")
        if not (0.0 < self.filter_max_volume_fraction <= 1.0):
            raise ValidationError(
                f"filter_max_volume_fraction must be in (0, 1], got {self.filter_max_volume_fraction}"
            )
        if self.split_mode not in ("threshold", "top_k"):
            raise ValidationError(f"split_mode must be 'threshold' or 'top_k', got {self.split_mode!r}")
        if not (isinstance(self.top_k, int) and self.top_k >= 1):
            raise ValidationError(f"top_k must be a positive integer, got {self.top_k!r}")
        if not isinstance(self.seed, int):
            raise ValidationError(f"seed must be an integer, got {self.seed!r}")

    @property
    def projection_radius(self) -> float:
        return 1.0 / math.sqrt(self.lam)


@dataclass(frozen=True)
class Instance:
    """One proposal: a d-dimensional feature vector plus optional tube geometry."""

    id: str
    features: np.ndarray
    source_bag_id: str = ""
    tube: Tube | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValidationError("instance id is empty")
        object.__setattr__(
            self, "features", _as_readonly_f64(self.features, f"features of instance {self.id!r}")
        )

    @property
    def dimension(self) -> int:
        return int(self.features.shape[0])


@dataclass(frozen=True)
class Bag:
    """One video's proposals under a single weak class label."""

    id: str
    instances: tuple[Instance, ...]
    class_label: str
    ground_truth_tube: Tube | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances", tuple(self.instances))
        if not self.id:
            raise ValidationError("bag id is empty")
        if not self.class_label:
            raise ValidationError(f"bag {self.id!r} has an empty class label")
        if not self.instances:
            raise ValidationError(f"bag {self.id!r} has no instances")
        d = self.instances[0].dimension
        seen: set[str] = set()
        for inst in self.instances:
            if inst.dimension != d:
                raise DimensionMismatchError(
                    f"bag {self.id!r} mixes feature dimensions {d} and {inst.dimension}"
                )
            if inst.id in seen:
                raise ValidationError(f"bag {self.id!r} has duplicate instance id {inst.id!r}")
            seen.add(inst.id)

    @property
    def dimension(self) -> int:
        return self.instances[0].dimension

    def feature_matrix(self) -> np.ndarray:
        """Instances stacked row-wise into a (J, d) float64 array."""
        return np.stack([inst.features for inst in self.instances])


@dataclass(frozen=True)
class ClassModel:
    """Learned weight vector and bias for one action class."""

    class_name: str
    weights: np.ndarray
    bias: float
    hyperparameters_used: Hyperparameters = field(default_factory=Hyperparameters)
    trained_iterations: int = 0

    def __post_init__(self) -> None:
        if not self.class_name:
            raise ValidationError("model class_name is empty")
        object.__setattr__(
            self, "weights", _as_readonly_f64(self.weights, f"weights of model {self.class_name!r}")
        )
        if not math.isfinite(self.bias):
            raise ValidationError(f"model {self.class_name!r} bias is not finite")
        if self.trained_iterations < 0:
            raise ValidationError("trained_iterations must be nonnegative")

    @property
    def dimension(self) -> int:
        return int(self.weights.shape[0])

    def augmented(self) -> np.ndarray:
        """Weights with the bias appended as a trailing component."""
        return np.append(self.weights, self.bias)


def sigmoid(z: float) -> float:
    """Overflow-safe logistic function, strictly inside (0, 1)."""
    z = min(max(float(z), -_LOGIT_CLIP), _LOGIT_CLIP)
    if z >= 0:
        p = 1.0 / (1.0 + math.exp(-z))
    else:
        e = math.exp(z)
        p = e / (1.0 + e)
    return min(max(p, _P_LO), _P_HI)


def sigmoid_array(z: np.ndarray) -> np.ndarray:
    """Vectorized sigmoid with the same clipping guarantees as sigmoid()."""
    z = np.clip(np.asarray(z, dtype=np.float64), -_LOGIT_CLIP, _LOGIT_CLIP)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return np.clip(out, _P_LO, _P_HI)


def instance_probability(model: ClassModel, x: Instance) -> float:
    """Logistic probability sigmoid(w.x + b) that instance x shows the class."""
    if model.dimension != x.dimension:
        raise DimensionMismatchError(
            f"model {model.class_name!r} has dimension {model.dimension} "
            f"but instance {x.id!r} has dimension {x.dimension}"
        )
    return sigmoid(float(model.weights @ x.features) + model.bias)


def bag_probability(instance_probs: Sequence[float]) -> float:
    """Noisy-OR bag probability 1 - prod(1 - p_j), accumulated in log space.

    Log-space accumulation keeps the result accurate for bags with hundreds
    of instances, where the naive product underflows.
    """
    probs = list(instance_probs)
    if not probs:
        raise ValidationError("bag has no instances")
    log_one_minus = 0.0
    for p in probs:
        if not (0.0 < p < 1.0):
            raise ValidationError(f"instance probability {p!r} outside the open interval (0, 1)")
        log_one_minus += math.log1p(-p)
    out = -math.expm1(log_one_minus)
    return min(max(out, _P_LO), _P_HI)
