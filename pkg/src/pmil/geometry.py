"""Spatio-temporal boxes and tubes, tube overlap metrics, and proposal filtering.

A tube is an ordered sequence of per-frame axis-aligned boxes inside a fixed
video volume.  Tube overlap is scored as the mean per-frame spatial IOU over
the temporal union of the two tubes, counting 0 on frames where only one tube
is present, so temporal and spatial misalignment are penalized symmetrically.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

from .errors import DimensionMismatchError, ValidationError

if TYPE_CHECKING:  # pragma: no cover - only for annotations, avoids an import cycle
    from .core import Bag


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: top-left corner (x, y) plus nonnegative width/height in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError(f"box field {name!r} is not finite: {v!r}")
        if self.w < 0 or self.h < 0:
            raise ValidationError(f"box has negative extent: w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class Tube:
    """Per-frame boxes at strictly increasing frame indices inside one video volume."""

    entries: tuple[tuple[int, Box], ...]
    video_frame_count: int
    video_width: int
    video_height: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple((int(f), b) for f, b in self.entries))
        if not self.entries:
            raise ValidationError("tube has no frames")
        if self.video_frame_count <= 0 or self.video_width <= 0 or self.video_height <= 0:
            raise ValidationError(
                "video dimensions must be positive, got "
                f"{self.video_width}x{self.video_height}x{self.video_frame_count}"
            )
        prev = -1
        for frame, _box in self.entries:
            if frame <= prev:
                raise ValidationError(f"tube frame indices not strictly increasing at {frame}")
            if frame >= self.video_frame_count:
                raise ValidationError(
                    f"tube frame {frame} outside video of {self.video_frame_count} frames"
                )
            prev = frame

    def boxes_by_frame(self) -> dict[int, Box]:
        return dict(self.entries)

    def same_video(self, other: "Tube") -> bool:
        return (
            self.video_frame_count == other.video_frame_count
            and self.video_width == other.video_width
            and self.video_height == other.video_height
        )


def spatial_iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union is degenerate."""
    if a == b:
        return 1.0 if a.area > 0 else 0.0
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = ix * iy if (ix > 0 and iy > 0) else 0.0
    # endpoint subtraction can overshoot either area by a few ulps
    inter = min(inter, a.area, b.area)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def tube_iou(a: Tube, b: Tube) -> float:
    """Mean per-frame spatial IOU over the temporal union of the two tubes.

    Frames covered by only one tube contribute 0, so the score is 1 exactly
    when the tubes coincide frame by frame and 0 when they never overlap.
    """
    if not a.same_video(b):
        raise DimensionMismatchError(
            "tubes reference different videos: "
            f"{a.video_width}x{a.video_height}x{a.video_frame_count} vs "
            f"{b.video_width}x{b.video_height}x{b.video_frame_count}"
        )
    boxes_a = a.boxes_by_frame()
    boxes_b = b.boxes_by_frame()
    union_frames = set(boxes_a) | set(boxes_b)
    total = 0.0
    for frame in union_frames:
        if frame in boxes_a and frame in boxes_b:
            total += spatial_iou(boxes_a[frame], boxes_b[frame])
    return total / len(union_frames)


def tube_coverage(proposal: Tube, ground_truth: Tube) -> float:
    """Fraction of the ground-truth tube's volume covered by the proposal.

    Alternative correctness criterion to IOU: intersection volume divided by
    the ground-truth volume, accumulated over the ground truth's frames.
    """
    if not proposal.same_video(ground_truth):
        raise DimensionMismatchError(
            "tubes reference different videos: "
            f"{proposal.video_width}x{proposal.video_height}x{proposal.video_frame_count} vs "
            f"{ground_truth.video_width}x{ground_truth.video_height}x{ground_truth.video_frame_count}"
        )
    boxes_p = proposal.boxes_by_frame()
    gt_volume = 0.0
    inter_volume = 0.0
    for frame, gt_box in ground_truth.entries:
        gt_volume += gt_box.area
        p_box = boxes_p.get(frame)
        if p_box is None:
            continue
        ix = min(p_box.x + p_box.w, gt_box.x + gt_box.w) - max(p_box.x, gt_box.x)
        iy = min(p_box.y + p_box.h, gt_box.y + gt_box.h) - max(p_box.y, gt_box.y)
        if ix > 0 and iy > 0:
            inter_volume += ix * iy
    if gt_volume <= 0:
        return 0.0
    return inter_volume / gt_volume


def volume_fraction(t: Tube) -> float:
    """Fraction of the full video volume occupied by the tube, in [0, 1].

    Per-frame box areas are clipped to the frame area, so boxes hanging over
    the frame edge cannot push the fraction past 1.
    """
    frame_area = float(t.video_width * t.video_height)
    occupied = sum(min(box.area, frame_area) for _frame, box in t.entries)
    return occupied / (frame_area * t.video_frame_count)


def filter_large_proposals(bag: "Bag", max_fraction: float) -> "Bag":
    """Drop instances whose tube fills more than max_fraction of the video.

    Instances without geometry are kept.  If the filter would remove every
    instance, the single smallest-fraction instance is retained so the bag
    stays nonempty.  Idempotent.
    """
    if not (0.0 < max_fraction <= 1.0):
        raise ValidationError(f"max_fraction must be in (0, 1], got {max_fraction}")
    kept = []
    dropped = []  # (fraction, position) of filtered instances
    for pos, inst in enumerate(bag.instances):
        if inst.tube is None:
            kept.append(inst)
            continue
        frac = volume_fraction(inst.tube)
        if frac > max_fraction:
            dropped.append((frac, pos))
        else:
            kept.append(inst)
    if not kept:
        _frac, pos = min(dropped)
        kept = [bag.instances[pos]]
    if len(kept) == len(bag.instances):
        return bag
    return dataclasses.replace(bag, instances=tuple(kept))


def recall_iou_curve(
    proposal_sets: Sequence[tuple[Sequence[Tube], Tube]],
    thresholds: Iterable[float],
) -> list[tuple[float, float]]:
    """Recall at each IOU threshold: fraction of ground truths matched by some proposal.

    proposal_sets pairs each video's candidate tubes with its ground-truth
    tube; thresholds must be ascending values in [0, 1].
    """
    proposal_sets = list(proposal_sets)
    if not proposal_sets:
        raise ValidationError("recall_iou_curve needs at least one (proposals, ground truth) pair")
    thresholds = list(thresholds)
    for lo, hi in zip(thresholds, thresholds[1:]):
        if hi < lo:
            raise ValidationError("thresholds must be sorted ascending")
    if thresholds and (thresholds[0] < 0.0 or thresholds[-1] > 1.0):
        raise ValidationError("thresholds must lie in [0, 1]")
    best = [
        max((tube_iou(p, gt) for p in proposals), default=0.0)
        for proposals, gt in proposal_sets
    ]
    n = len(best)
    return [(tau, sum(1 for b in best if b >= tau) / n) for tau in thresholds]
