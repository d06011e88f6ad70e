"""Shared builders for the test suite."""

import numpy as np
import pytest

from pmil.core import Bag, Hyperparameters, Instance
from pmil.geometry import Box, Tube

VIDEO = (64, 48, 8)  # width, height, frames


def make_tube(frames, video=VIDEO):
    """frames: {frame_index: (x, y, w, h)}."""
    w, h, f = video
    entries = tuple((fr, Box(*box)) for fr, box in sorted(frames.items()))
    return Tube(entries=entries, video_frame_count=f, video_width=w, video_height=h)


def constant_tube(box, video=VIDEO):
    w, h, f = video
    return make_tube({fr: box for fr in range(f)}, video=video)


def make_bag(bag_id, feature_rows, class_label="a", tubes=None, gt=None):
    rows = np.asarray(feature_rows, dtype=np.float64)
    instances = []
    for j, row in enumerate(rows):
        tube = None if tubes is None else tubes[j]
        instances.append(
            Instance(id=f"{bag_id}/i{j}", features=row, source_bag_id=bag_id, tube=tube)
        )
    return Bag(id=bag_id, instances=tuple(instances), class_label=class_label,
               ground_truth_tube=gt)


def random_bag(rng, bag_id="b", size=5, dim=10, class_label="a"):
    return make_bag(bag_id, rng.normal(size=(size, dim)), class_label=class_label)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def hp():
    return Hyperparameters()
