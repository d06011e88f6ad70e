"""Relaxed-MIL training: joint objective, projected SGD, and set splitting.

The per-class objective combines an L2 regularizer, a noisy-OR cross-entropy
over bags, and a per-instance hinge that pushes confident instances away from
the decision boundary:

    total = lam/2 ||w||^2
          + (1/N) sum_i [ beta * alpha_X(i) + (gamma / J_i) * sum_j alpha_x(i,j) ]

with alpha_X = -[Y log P + (1-Y) log(1-P)] for the bag probability P and
alpha_x = max(0, eta - sign(p - zeta) * (w.x)), sign(0) := +1.  Optimization
is stochastic subgradient descent over bags with step size 1/(t*lam),
followed by projection onto the ball of radius 1/sqrt(lam).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Bag, BinaryLabel, ClassModel, Hyperparameters, Instance, sigmoid_array
from .errors import DimensionMismatchError, NumericalError, ValidationError
from .geometry import filter_large_proposals

logger = logging.getLogger(__name__)

# Bag probabilities are clamped this far away from {0, 1} before any log or
# division so cross-entropy terms and the (P-Y)/P factor stay finite.
_P_CLAMP = 1e-12

LabeledBag = tuple[Bag, BinaryLabel]


@dataclass(frozen=True)
class TrainingState:
    """Snapshot of one class training run between SGD steps."""

    weights: np.ndarray  # augmented vector, bias in the last slot
    t: int  # 1-based iteration counter, drives the 1/(t*lam) step size
    pi_remaining: int
    dataset_view: tuple[LabeledBag, ...]
    rng: np.random.Generator

    def __post_init__(self) -> None:
        if self.t < 1:
            raise ValidationError(f"iteration counter must be >= 1, got {self.t}")
        if self.pi_remaining < 0:
            raise ValidationError("pi_remaining must be nonnegative")
        if not self.dataset_view:
            raise ValidationError("dataset view is empty")


@dataclass(frozen=True)
class LossBreakdown:
    regularizer: float
    bag_loss: float
    instance_loss: float
    total: float


def _check_dimension(weights: np.ndarray, bag: Bag) -> None:
    if weights.shape[0] != bag.dimension:
        raise DimensionMismatchError(
            f"weights have dimension {weights.shape[0]} but bag {bag.id!r} "
            f"has dimension {bag.dimension}"
        )


def _bag_probability_from(p: np.ndarray) -> float:
    """Noisy-OR over an array of instance probabilities, clamped for logs."""
    raw = -math.expm1(float(np.log1p(-p).sum()))
    return min(max(raw, _P_CLAMP), 1.0 - _P_CLAMP)


def objective(
    weights: np.ndarray,
    dataset: Sequence[LabeledBag],
    hp: Hyperparameters,
) -> LossBreakdown:
    """Full-dataset value of the joint objective at the given weights."""
    weights = np.asarray(weights, dtype=np.float64)
    dataset = list(dataset)
    if not dataset:
        raise ValidationError("objective needs a nonempty dataset")
    n = len(dataset)
    bag_loss = 0.0
    instance_loss = 0.0
    for bag, label in dataset:
        _check_dimension(weights, bag)
        if label not in (0, 1):
            raise ValidationError(f"bag {bag.id!r} has non-binary label {label!r}")
        z = bag.feature_matrix() @ weights
        p = sigmoid_array(z)
        big_p = _bag_probability_from(p)
        alpha_bag = -(label * math.log(big_p) + (1 - label) * math.log1p(-big_p))
        sign = np.where(p >= hp.zeta, 1.0, -1.0)
        alpha_inst = float(np.maximum(0.0, hp.eta - sign * z).mean())
        contribution = hp.beta * alpha_bag + hp.gamma * alpha_inst
        if not math.isfinite(contribution):
            raise NumericalError(f"non-finite objective contribution from bag {bag.id!r}")
        bag_loss += hp.beta * alpha_bag / n
        instance_loss += hp.gamma * alpha_inst / n
    regularizer = 0.5 * hp.lam * float(weights @ weights)
    return LossBreakdown(
        regularizer=regularizer,
        bag_loss=bag_loss,
        instance_loss=instance_loss,
        total=regularizer + bag_loss + instance_loss,
    )


def _bag_gradient(x: np.ndarray, p: np.ndarray, label: BinaryLabel) -> np.ndarray:
    big_p = _bag_probability_from(p)
    # d alpha_X / dw = ((P - Y) / P) * sum_j p_j x_j; exact for both labels
    # because dP/dw = (1 - P) * sum_j p_j x_j and the chain rule telescopes.
    return ((big_p - label) / big_p) * (p @ x)


def bag_gradient(weights: np.ndarray, bag: Bag, label: BinaryLabel) -> np.ndarray:
    """Exact gradient of the bag cross-entropy alpha_X with respect to weights."""
    weights = np.asarray(weights, dtype=np.float64)
    _check_dimension(weights, bag)
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label!r}")
    x = bag.feature_matrix()
    p = sigmoid_array(x @ weights)
    return _bag_gradient(x, p, label)


def _hinge_subgradient(x: np.ndarray, z: np.ndarray, p: np.ndarray, hp: Hyperparameters) -> np.ndarray:
    sign = np.where(p >= hp.zeta, 1.0, -1.0)
    active = sign * z < hp.eta
    if not np.any(active):
        return np.zeros(x.shape[1])
    return -(sign[active] @ x[active]) / x.shape[0]


def hinge_subgradient(weights: np.ndarray, bag: Bag, hp: Hyperparameters) -> np.ndarray:
    """Subgradient of (1/J) sum_j alpha_x over the bag's instances.

    An instance is active when its signed margin sign(p - zeta) * (w.x) falls
    below eta; each active instance contributes -sign(p - zeta) * x.
    """
    weights = np.asarray(weights, dtype=np.float64)
    _check_dimension(weights, bag)
    x = bag.feature_matrix()
    z = x @ weights
    p = sigmoid_array(z)
    return _hinge_subgradient(x, z, p, hp)


def sgd_step(
    state: TrainingState,
    bag: Bag,
    label: BinaryLabel,
    hp: Hyperparameters,
) -> TrainingState:
    """One projected stochastic subgradient step on a single bag.

    Both gradient terms are evaluated at the step-start weights; the update
    w <- (1 - lam*eps)w - eps*beta*g_bag - eps*gamma*g_hinge is then exactly
    a subgradient step on the regularized per-bag loss, followed by
    projection onto the ball of radius 1/sqrt(lam).
    """
    w = state.weights
    _check_dimension(w, bag)
    eps = 1.0 / (state.t * hp.lam)
    x = bag.feature_matrix()
    z = x @ w
    p = sigmoid_array(z)
    g_bag = _bag_gradient(x, p, label)
    g_hinge = _hinge_subgradient(x, z, p, hp)
    w = (1.0 - hp.lam * eps) * w - eps * hp.beta * g_bag - eps * hp.gamma * g_hinge
    norm = float(np.linalg.norm(w))
    radius = hp.projection_radius
    if norm > radius:
        w = w * (radius / norm)
    if not np.all(np.isfinite(w)):
        raise NumericalError(f"non-finite weights at iteration {state.t}")
    w.setflags(write=False)
    return dataclasses.replace(state, weights=w, t=state.t + 1)


def split_sets(
    dataset: Sequence[LabeledBag],
    weights: np.ndarray,
    hp: Hyperparameters,
) -> list[LabeledBag]:
    """Rewrite each positive bag into a confident-positive bag and a negative rest.

    threshold mode sends instances with p > omega to the positive side;
    top_k mode keeps the hp.top_k highest-probability instances positive
    (stable order, ties to the earlier instance).  Negative bags pass through
    untouched, empty sides are dropped, and the dataset-wide multiset of
    instances is preserved.
    """
    weights = np.asarray(weights, dtype=np.float64)
    dataset = list(dataset)
    if not dataset:
        raise ValidationError("split_sets needs a nonempty dataset")
    out: list[LabeledBag] = []
    for bag, label in dataset:
        if label == 0:
            out.append((bag, 0))
            continue
        _check_dimension(weights, bag)
        p = sigmoid_array(bag.feature_matrix() @ weights)
        if hp.split_mode == "threshold":
            pos_idx = [j for j in range(len(bag.instances)) if p[j] > hp.omega]
        else:
            order = np.argsort(-p, kind="stable")
            pos_idx = sorted(int(j) for j in order[: hp.top_k])
        pos_set = set(pos_idx)
        neg_idx = [j for j in range(len(bag.instances)) if j not in pos_set]
        if not neg_idx:
            out.append((bag, 1))
        elif not pos_idx:
            out.append((bag, 0))
        else:
            pos = dataclasses.replace(
                bag, id=bag.id + "/pos", instances=tuple(bag.instances[j] for j in pos_idx)
            )
            neg = dataclasses.replace(
                bag, id=bag.id + "/neg", instances=tuple(bag.instances[j] for j in neg_idx)
            )
            out.append((pos, 1))
            out.append((neg, 0))
    return out


def _augment_bag(bag: Bag) -> Bag:
    instances = tuple(
        dataclasses.replace(inst, features=np.append(inst.features, 1.0))
        for inst in bag.instances
    )
    return dataclasses.replace(bag, instances=instances)


EpochCallback = Callable[[int, TrainingState, LossBreakdown], None]


def train_class(
    dataset: Sequence[Bag],
    class_name: str,
    hp: Hyperparameters,
    *,
    filter_proposals: bool = False,
    split_between_epochs: bool = False,
    cyclic_order: bool = False,
    epoch_callback: EpochCallback | None = None,
) -> ClassModel:
    """Train one one-vs-all class model.

    Bags labeled class_name are the positives.  Features get a constant-1.0
    bias slot appended for the run; the learned last component is returned as
    the model bias.  Each epoch is one pass over the current bag list
    (shuffled per epoch unless cyclic_order).  Without splitting the run is a
    single level of hp.pi epochs.  With split_between_epochs the run descends
    through levels of hp.pi, hp.pi - 1, ..., 1 epochs, rewriting positive
    bags via split_sets between levels: the iterative form of retraining on
    the split dataset with a decremented epoch budget.  The iteration counter
    t (and with it the step size) carries across levels.
    """
    bags = list(dataset)
    if not bags:
        raise ValidationError("training dataset is empty")
    d = bags[0].dimension
    for bag in bags:
        if bag.dimension != d:
            raise DimensionMismatchError(
                f"bag {bag.id!r} has dimension {bag.dimension}, expected {d}"
            )
    labels = [1 if bag.class_label == class_name else 0 for bag in bags]
    if not any(labels):
        raise ValidationError(f"class {class_name!r} has no positive sets")
    if all(labels):
        raise ValidationError(f"class {class_name!r} has no negative sets")
    if filter_proposals:
        bags = [filter_large_proposals(bag, hp.filter_max_volume_fraction) for bag in bags]
    view = tuple((_augment_bag(bag), y) for bag, y in zip(bags, labels))
    rng = np.random.default_rng(hp.seed)
    w0 = np.zeros(d + 1)
    w0.setflags(write=False)
    levels = list(range(hp.pi, 0, -1)) if split_between_epochs else [hp.pi]
    state = TrainingState(
        weights=w0, t=1, pi_remaining=len(levels), dataset_view=view, rng=rng
    )
    epoch = 0
    for level_index, level_epochs in enumerate(levels):
        for _ in range(level_epochs):
            n = len(state.dataset_view)
            order = np.arange(n) if cyclic_order else state.rng.permutation(n)
            for idx in order:
                bag, y = state.dataset_view[idx]
                state = sgd_step(state, bag, y, hp)
            if epoch_callback is not None:
                loss = objective(state.weights, state.dataset_view, hp)
                epoch_callback(epoch, state, loss)
                logger.info(
                    "class=%s epoch=%d bags=%d loss=%.6f (reg=%.6f bag=%.6f inst=%.6f)",
                    class_name, epoch, n, loss.total, loss.regularizer,
                    loss.bag_loss, loss.instance_loss,
                )
            epoch += 1
        state = dataclasses.replace(state, pi_remaining=state.pi_remaining - 1)
        if split_between_epochs and level_index < len(levels) - 1:
            new_view = tuple(split_sets(state.dataset_view, state.weights, hp))
            if len(new_view) != len(state.dataset_view):
                logger.info(
                    "class=%s level=%d split %d bags into %d",
                    class_name, level_index, len(state.dataset_view), len(new_view),
                )
            state = dataclasses.replace(state, dataset_view=new_view)
    return ClassModel(
        class_name=class_name,
        weights=state.weights[:-1],
        bias=float(state.weights[-1]),
        hyperparameters_used=hp,
        trained_iterations=state.t - 1,
    )
