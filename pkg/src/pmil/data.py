"""Dataset, model, prediction, and report serialization plus the synthetic generator.

On-disk layout of a dataset:

    <root>/manifest.json          structured-text index of classes and bags
    <root>/payloads/*.feat        per-bag binary feature payloads (float32 LE)
    <root>/tubes/*.tubes          per-bag tube geometry as delimited text

Every loader in this module raises only PmilError subclasses on malformed
input (DataFormatError for parse/layout problems with file and record
location, DimensionMismatchError where shapes disagree), never a bare
exception, so callers can fuzz arbitrary bytes at these functions.
"""

from __future__ import annotations

import base64
import binascii
import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import Bag, ClassModel, Hyperparameters, Instance
from .errors import DataFormatError, DimensionMismatchError, PmilError, ValidationError
from .evaluate import EvalReport, ScatterRecord
from .geometry import Box, Tube
from .predict import BagPrediction

MANIFEST_FORMAT = "pmil-dataset"
MODEL_FORMAT = "pmil-model"
REPORT_FORMAT = "pmil-report"
PLANTED_FORMAT = "pmil-planted"
SUMMARY_FORMAT = "pmil-train-summary"
FORMAT_VERSION = 1
PAYLOAD_MAGIC = b"PMILFEAT"
TUBE_HEADER = "pmil-tubes"

_HP_FIELDS = (
    "lam", "beta", "gamma", "eta", "zeta", "omega", "pi",
    "filter_max_volume_fraction", "split_mode", "top_k", "seed",
)


# ---------------------------------------------------------------------------
# primitive readers: everything funnels errors into DataFormatError


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"{path}: cannot read file: {exc}") from exc


def _read_text(path: str) -> str:
    data = _read_bytes(path)
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: not valid UTF-8: {exc}") from exc


def _load_json(path: str) -> object:
    text = _read_text(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON: {exc}") from exc


def _as_dict(obj: object, where: str) -> dict:
    if not isinstance(obj, dict):
        raise DataFormatError(f"{where}: expected a JSON object, got {type(obj).__name__}")
    return obj


def _get(obj: dict, key: str, where: str) -> object:
    if key not in obj:
        raise DataFormatError(f"{where}: missing required key {key!r}")
    return obj[key]


def _get_str(obj: dict, key: str, where: str) -> str:
    v = _get(obj, key, where)
    if not isinstance(v, str) or not v:
        raise DataFormatError(f"{where}: key {key!r} must be a nonempty string")
    return v


def _get_int(obj: dict, key: str, where: str) -> int:
    v = _get(obj, key, where)
    if isinstance(v, bool) or not isinstance(v, int):
        raise DataFormatError(f"{where}: key {key!r} must be an integer")
    return v


def _get_float(obj: dict, key: str, where: str) -> float:
    v = _get(obj, key, where)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise DataFormatError(f"{where}: key {key!r} must be a number")
    return float(v)


def _get_list(obj: dict, key: str, where: str) -> list:
    v = _get(obj, key, where)
    if not isinstance(v, list):
        raise DataFormatError(f"{where}: key {key!r} must be a list")
    return v


def _check_header(obj: dict, expected_format: str, where: str) -> None:
    fmt = _get_str(obj, "format", where)
    if fmt != expected_format:
        raise DataFormatError(f"{where}: format is {fmt!r}, expected {expected_format!r}")
    version = _get_int(obj, "version", where)
    if version != FORMAT_VERSION:
        raise DataFormatError(
            f"{where}: unsupported version {version} (this build reads version {FORMAT_VERSION})"
        )


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# feature payloads: magic + version/count/dimension header, float32 LE body


def save_payload(path: str, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(features, dtype="<f4"))
    if arr.ndim != 2:
        raise ValidationError(f"payload must be a (J, d) matrix, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(PAYLOAD_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_payload(path: str) -> np.ndarray:
    data = _read_bytes(path)
    head = len(PAYLOAD_MAGIC) + 12
    if len(data) < head:
        raise DataFormatError(f"{path}: truncated payload header ({len(data)} bytes)")
    if data[: len(PAYLOAD_MAGIC)] != PAYLOAD_MAGIC:
        raise DataFormatError(f"{path}: bad payload magic")
    version, count, dim = struct.unpack("<III", data[len(PAYLOAD_MAGIC) : head])
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported payload version {version}")
    if count == 0 or dim == 0:
        raise DataFormatError(f"{path}: payload declares empty shape {count}x{dim}")
    expected = head + 4 * count * dim
    if len(data) != expected:
        raise DataFormatError(
            f"{path}: payload length {len(data)} does not match declared "
            f"{count}x{dim} ({expected} bytes)"
        )
    arr = np.frombuffer(data[head:], dtype="<f4").reshape(count, dim).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataFormatError(f"{path}: payload contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# tube files: text, one section per instance, one record per frame


def _format_float(v: float) -> str:
    return repr(float(v))


def save_tube_file(
    path: str,
    tubes: Mapping[str, Tube] | Sequence[tuple[str, Tube]],
    video: tuple[int, int, int],
) -> None:
    """video is (width, height, frame_count); every tube must match it."""
    width, height, frames = video
    items = tubes.items() if isinstance(tubes, Mapping) else tubes
    lines = [f"{TUBE_HEADER} {FORMAT_VERSION}", f"video {width} {height} {frames}"]
    for instance_id, tube in items:
        if (tube.video_width, tube.video_height, tube.video_frame_count) != video:
            raise ValidationError(
                f"tube for instance {instance_id!r} does not match video {video}"
            )
        lines.append(f"tube {instance_id}")
        for frame, box in tube.entries:
            lines.append(
                f"{frame} {_format_float(box.x)} {_format_float(box.y)} "
                f"{_format_float(box.w)} {_format_float(box.h)}"
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_tube_file(path: str) -> tuple[dict[str, Tube], tuple[int, int, int]]:
    text = _read_text(path)
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise DataFormatError(f"{path}: empty tube file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != TUBE_HEADER:
        raise DataFormatError(f"{path}: line 1: bad tube-file header")
    if header[1] != str(FORMAT_VERSION):
        raise DataFormatError(f"{path}: unsupported tube-file version {header[1]!r}")
    if len(lines) < 2 or not lines[1].startswith("video "):
        raise DataFormatError(f"{path}: line 2: missing video dimensions line")
    video_tokens = lines[1].split()
    if len(video_tokens) != 4:
        raise DataFormatError(f"{path}: line 2: video line needs width height frames")
    try:
        width, height, frames = (int(tok) for tok in video_tokens[1:])
    except ValueError as exc:
        raise DataFormatError(f"{path}: line 2: non-integer video dimension") from exc

    tubes: dict[str, Tube] = {}
    current_id: str | None = None
    current_entries: list[tuple[int, Box]] = []

    def flush() -> None:
        if current_id is None:
            return
        try:
            tube = Tube(
                entries=tuple(current_entries),
                video_frame_count=frames,
                video_width=width,
                video_height=height,
            )
        except PmilError as exc:
            raise DataFormatError(f"{path}: tube {current_id!r}: {exc}") from exc
        tubes[current_id] = tube

    for lineno, line in enumerate(lines[2:], start=3):
        if line.startswith("tube "):
            flush()
            current_id = line[len("tube "):].strip()
            if not current_id:
                raise DataFormatError(f"{path}: line {lineno}: empty tube id")
            if current_id in tubes:
                raise DataFormatError(f"{path}: line {lineno}: duplicate tube id {current_id!r}")
            current_entries = []
            continue
        if current_id is None:
            raise DataFormatError(f"{path}: line {lineno}: frame record before any tube line")
        tokens = line.split()
        if len(tokens) != 5:
            raise DataFormatError(
                f"{path}: line {lineno}: expected 'frame x y w h', got {len(tokens)} fields"
            )
        try:
            frame = int(tokens[0])
            x, y, w, h = (float(tok) for tok in tokens[1:])
        except ValueError as exc:
            raise DataFormatError(f"{path}: line {lineno}: non-numeric field") from exc
        try:
            current_entries.append((frame, Box(x=x, y=y, w=w, h=h)))
        except PmilError as exc:
            raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
    flush()
    if not tubes:
        raise DataFormatError(f"{path}: tube file declares no tubes")
    return tubes, (width, height, frames)


def _tube_to_json(tube: Tube) -> dict:
    return {
        "video": [tube.video_width, tube.video_height, tube.video_frame_count],
        "frames": [[frame, box.x, box.y, box.w, box.h] for frame, box in tube.entries],
    }


def _tube_from_json(obj: object, where: str) -> Tube:
    d = _as_dict(obj, where)
    video = _get_list(d, "video", where)
    if len(video) != 3 or any(isinstance(v, bool) or not isinstance(v, int) for v in video):
        raise DataFormatError(f"{where}: 'video' must be [width, height, frames] integers")
    frames = _get_list(d, "frames", where)
    entries: list[tuple[int, Box]] = []
    for i, rec in enumerate(frames):
        rec_where = f"{where}: frame record {i}"
        if not isinstance(rec, list) or len(rec) != 5:
            raise DataFormatError(f"{rec_where}: expected [frame, x, y, w, h]")
        frame = rec[0]
        if isinstance(frame, bool) or not isinstance(frame, int):
            raise DataFormatError(f"{rec_where}: frame index must be an integer")
        coords = rec[1:]
        if any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in coords):
            raise DataFormatError(f"{rec_where}: coordinates must be numbers")
        try:
            entries.append((frame, Box(*(float(c) for c in coords))))
        except PmilError as exc:
            raise DataFormatError(f"{rec_where}: {exc}") from exc
    try:
        return Tube(
            entries=tuple(entries),
            video_width=video[0],
            video_height=video[1],
            video_frame_count=video[2],
        )
    except PmilError as exc:
        raise DataFormatError(f"{where}: {exc}") from exc


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Dataset:
    """Loaded bags plus the class vocabulary and train/test split tags."""

    bags: tuple[Bag, ...]
    classes: tuple[str, ...]
    feature_dimension: int
    splits: dict[str, str]  # bag id -> "train" | "test"

    def train_bags(self) -> list[Bag]:
        return [b for b in self.bags if self.splits.get(b.id) == "train"]

    def test_bags(self) -> list[Bag]:
        return [b for b in self.bags if self.splits.get(b.id) == "test"]


@dataclass(frozen=True)
class DatasetManifest:
    """Parsed manifest: descriptors only, no payloads loaded yet."""

    version: int
    feature_dimension: int
    classes: tuple[str, ...]
    bag_records: tuple[dict, ...]


def save_dataset(root: str, dataset: Dataset) -> str:
    """Write manifest + payloads + tube files under root; returns manifest path."""
    payload_dir = os.path.join(root, "payloads")
    tube_dir = os.path.join(root, "tubes")
    os.makedirs(payload_dir, exist_ok=True)
    os.makedirs(tube_dir, exist_ok=True)
    records = []
    for i, bag in enumerate(dataset.bags):
        split = dataset.splits.get(bag.id, "train")
        if split not in ("train", "test"):
            raise ValidationError(f"bag {bag.id!r} has invalid split tag {split!r}")
        payload_rel = os.path.join("payloads", f"bag_{i:05d}.feat")
        save_payload(os.path.join(root, payload_rel), bag.feature_matrix())
        record: dict = {
            "id": bag.id,
            "class_label": bag.class_label,
            "split": split,
            "features": payload_rel,
            "instance_ids": [inst.id for inst in bag.instances],
        }
        with_tubes = [(inst.id, inst.tube) for inst in bag.instances if inst.tube is not None]
        if with_tubes:
            video = (
                with_tubes[0][1].video_width,
                with_tubes[0][1].video_height,
                with_tubes[0][1].video_frame_count,
            )
            tube_rel = os.path.join("tubes", f"bag_{i:05d}.tubes")
            save_tube_file(os.path.join(root, tube_rel), with_tubes, video)
            record["tubes"] = tube_rel
        if bag.ground_truth_tube is not None:
            record["ground_truth_tube"] = _tube_to_json(bag.ground_truth_tube)
        records.append(record)
    manifest_path = os.path.join(root, "manifest.json")
    _write_json(
        manifest_path,
        {
            "format": MANIFEST_FORMAT,
            "version": FORMAT_VERSION,
            "feature_dimension": dataset.feature_dimension,
            "classes": list(dataset.classes),
            "bags": records,
        },
    )
    return manifest_path


def load_manifest(path: str) -> DatasetManifest:
    obj = _as_dict(_load_json(path), path)
    _check_header(obj, MANIFEST_FORMAT, path)
    dim = _get_int(obj, "feature_dimension", path)
    if dim <= 0:
        raise DataFormatError(f"{path}: feature_dimension must be positive, got {dim}")
    classes_raw = _get_list(obj, "classes", path)
    if not classes_raw or any(not isinstance(c, str) or not c for c in classes_raw):
        raise DataFormatError(f"{path}: 'classes' must be a nonempty list of nonempty strings")
    if len(set(classes_raw)) != len(classes_raw):
        raise DataFormatError(f"{path}: duplicate class names in vocabulary")
    bags_raw = _get_list(obj, "bags", path)
    if not bags_raw:
        raise DataFormatError(f"{path}: manifest lists no bags")
    records = []
    for i, rec in enumerate(bags_raw):
        records.append(_as_dict(rec, f"{path}: bag record {i}"))
    return DatasetManifest(
        version=FORMAT_VERSION,
        feature_dimension=dim,
        classes=tuple(classes_raw),
        bag_records=tuple(records),
    )


def load_dataset(manifest_path: str) -> Dataset:
    """Load and fully validate a dataset from its manifest."""
    manifest = load_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    class_set = set(manifest.classes)
    bags: list[Bag] = []
    splits: dict[str, str] = {}
    seen_ids: set[str] = set()
    for i, rec in enumerate(manifest.bag_records):
        where = f"{manifest_path}: bag record {i}"
        bag_id = _get_str(rec, "id", where)
        if bag_id in seen_ids:
            raise DataFormatError(f"{where}: duplicate bag id {bag_id!r}")
        seen_ids.add(bag_id)
        class_label = _get_str(rec, "class_label", where)
        if class_label not in class_set:
            raise DataFormatError(
                f"{where}: bag {bag_id!r} has unknown class {class_label!r}"
            )
        split = _get_str(rec, "split", where)
        if split not in ("train", "test"):
            raise DataFormatError(f"{where}: split must be 'train' or 'test', got {split!r}")
        payload_rel = _get_str(rec, "features", where)
        features = load_payload(os.path.join(root, payload_rel))
        if features.shape[1] != manifest.feature_dimension:
            raise DimensionMismatchError(
                f"{where}: bag {bag_id!r} payload has dimension {features.shape[1]} "
                f"but manifest declares {manifest.feature_dimension}"
            )
        ids_raw = _get_list(rec, "instance_ids", where)
        if len(ids_raw) != features.shape[0]:
            raise DataFormatError(
                f"{where}: {len(ids_raw)} instance ids for {features.shape[0]} payload rows"
            )
        if any(not isinstance(s, str) or not s for s in ids_raw):
            raise DataFormatError(f"{where}: instance ids must be nonempty strings")
        tubes: dict[str, Tube] = {}
        if "tubes" in rec:
            tube_rel = _get_str(rec, "tubes", where)
            tubes, _video = load_tube_file(os.path.join(root, tube_rel))
            unknown = set(tubes) - set(ids_raw)
            if unknown:
                raise DataFormatError(
                    f"{where}: tube file names unknown instances {sorted(unknown)!r}"
                )
        gt_tube = None
        if "ground_truth_tube" in rec:
            gt_tube = _tube_from_json(
                rec["ground_truth_tube"], f"{where}: ground_truth_tube"
            )
        try:
            instances = tuple(
                Instance(
                    id=ids_raw[j],
                    features=features[j],
                    source_bag_id=bag_id,
                    tube=tubes.get(ids_raw[j]),
                )
                for j in range(features.shape[0])
            )
            bag = Bag(
                id=bag_id,
                instances=instances,
                class_label=class_label,
                ground_truth_tube=gt_tube,
            )
        except PmilError as exc:
            raise DataFormatError(f"{where}: {exc}") from exc
        bags.append(bag)
        splits[bag_id] = split
    return Dataset(
        bags=tuple(bags),
        classes=manifest.classes,
        feature_dimension=manifest.feature_dimension,
        splits=splits,
    )


# ---------------------------------------------------------------------------
# feature aggregation


def aggregate_frame_features(
    frame_vectors: Sequence[Sequence[float] | np.ndarray],
    *,
    norm: str = "l2",
) -> np.ndarray:
    """Mean of per-frame vectors, then normalized to unit norm (zero stays zero)."""
    vectors = [np.asarray(v, dtype=np.float64) for v in frame_vectors]
    if not vectors:
        raise ValidationError("aggregate_frame_features needs at least one frame vector")
    d = vectors[0].shape
    for v in vectors:
        if v.shape != d:
            raise DimensionMismatchError(
                f"frame vectors mix shapes {d} and {v.shape}"
            )
    if norm not in ("l2", "l1"):
        raise ValidationError(f"norm must be 'l2' or 'l1', got {norm!r}")
    mean = np.mean(vectors, axis=0)
    scale = float(np.linalg.norm(mean, 2 if norm == "l2" else 1))
    if scale == 0.0:
        return mean
    return mean / scale


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the planted-ground-truth generator."""

    num_classes: int = 3
    bags_per_class: int = 30
    instances_per_bag: int = 20
    positives_per_positive_bag: int = 2
    feature_dimension: int = 50
    cluster_separation: float = 10.0
    noise_sigma: float = 1.0
    seed: int = 0
    test_fraction: float = 0.25
    decoy_fraction: float = 0.0

    def __post_init__(self) -> None:
        for name in (
            "num_classes", "bags_per_class", "instances_per_bag",
            "positives_per_positive_bag", "feature_dimension",
        ):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")
        if not (self.cluster_separation > 0 and math.isfinite(self.cluster_separation)):
            raise ValidationError(f"cluster_separation must be positive, got {self.cluster_separation}")
        if not (self.noise_sigma > 0 and math.isfinite(self.noise_sigma)):
            raise ValidationError(f"noise_sigma must be positive, got {self.noise_sigma}")
        if not isinstance(self.seed, int):
            raise ValidationError(f"seed must be an integer, got {self.seed!r}")
        if not (0.0 <= self.test_fraction < 1.0):
            raise ValidationError(f"test_fraction must be in [0, 1), got {self.test_fraction}")
        if not (0.0 <= self.decoy_fraction < 1.0):
            raise ValidationError(f"decoy_fraction must be in [0, 1), got {self.decoy_fraction}")
        n_decoy = int(round(self.decoy_fraction * self.instances_per_bag))
        if self.positives_per_positive_bag + n_decoy > self.instances_per_bag:
            raise ValidationError(
                "positives_per_positive_bag plus decoys exceed instances_per_bag"
            )


@dataclass(frozen=True)
class SyntheticResult:
    dataset: Dataset
    planted: dict[str, tuple[str, ...]]  # bag id -> planted instance ids


# fixed video geometry for all synthetic bags
_VIDEO_W, _VIDEO_H, _VIDEO_F = 320, 240, 30
_GT_BOX = (60.0, 50.0, 120.0, 100.0)  # volume fraction 0.15625, well under filters
_BG_BOX = (250.0, 180.0, 40.0, 40.0)  # spatially disjoint from the ground truth
_DECOY_BOX = (2.0, 2.0, 312.0, 232.0)  # volume fraction ~0.94, IOU vs gt ~0.17


def _constant_tube(box: tuple[float, float, float, float], frames: Iterable[int]) -> Tube:
    b = Box(*box)
    return Tube(
        entries=tuple((f, b) for f in frames),
        video_frame_count=_VIDEO_F,
        video_width=_VIDEO_W,
        video_height=_VIDEO_H,
    )


def _jittered_tube(
    rng: np.random.Generator,
    box: tuple[float, float, float, float],
    max_shift: float,
    frames: Iterable[int],
) -> Tube:
    x, y, w, h = box
    dx = float(rng.uniform(-max_shift, max_shift))
    dy = float(rng.uniform(-max_shift, max_shift))
    return _constant_tube((x + dx, y + dy, w, h), frames)


def _draw_centers(rng: np.random.Generator, spec: SyntheticSpec) -> list[np.ndarray]:
    """Class centers at pairwise (and from-origin) distance >= cluster_separation."""
    sep = spec.cluster_separation
    centers: list[np.ndarray] = []
    for _c in range(spec.num_classes):
        for _attempt in range(100):
            v = rng.normal(size=spec.feature_dimension)
            norm = float(np.linalg.norm(v))
            if norm == 0.0:
                continue
            v = v * (sep * float(rng.uniform(1.0, 1.5)) / norm)
            if all(float(np.linalg.norm(v - c)) >= sep for c in centers):
                centers.append(v)
                break
        else:
            raise ValidationError(
                f"could not place {spec.num_classes} cluster centers at separation "
                f"{sep} in dimension {spec.feature_dimension} after 100 attempts"
            )
    return centers


def generate_synthetic(spec: SyntheticSpec) -> SyntheticResult:
    """Deterministic bags with planted positives, background noise, and decoys.

    Planted positives sit near their class's feature center and carry tubes
    jittered around the ground truth (IOU >= 0.7).  Background instances draw
    from the shared origin cluster with spatially disjoint tubes.  Decoys are
    the hard case: class-center features attached to near-full-frame tubes,
    so they rank high but localize nothing and exceed any volume filter below
    ~0.94.  Features are float32-quantized so dataset round-trips are exact.
    The sidecar maps each bag to its planted instance ids.
    """
    rng = np.random.default_rng(spec.seed)
    centers = _draw_centers(rng, spec)
    classes = tuple(f"class{c:02d}" for c in range(spec.num_classes))
    n_decoy = int(round(spec.decoy_fraction * spec.instances_per_bag))
    n_planted = spec.positives_per_positive_bag
    n_background = spec.instances_per_bag - n_planted - n_decoy
    n_test = int(spec.bags_per_class * spec.test_fraction + 0.5)
    n_test = min(n_test, spec.bags_per_class - 1)

    bags: list[Bag] = []
    splits: dict[str, str] = {}
    planted: dict[str, tuple[str, ...]] = {}
    all_frames = range(_VIDEO_F)
    for c, class_name in enumerate(classes):
        for b in range(spec.bags_per_class):
            bag_id = f"{class_name}_bag{b:03d}"
            gt_tube = _constant_tube(_GT_BOX, all_frames)
            members: list[tuple[str, np.ndarray, Tube]] = []
            for k in range(n_planted):
                feats = centers[c] + spec.noise_sigma * rng.normal(size=spec.feature_dimension)
                tube = _jittered_tube(rng, _GT_BOX, 8.0, all_frames)
                members.append((f"{bag_id}/p{k}", feats, tube))
            for k in range(n_decoy):
                feats = centers[c] + spec.noise_sigma * rng.normal(size=spec.feature_dimension)
                tube = _jittered_tube(rng, _DECOY_BOX, 1.5, all_frames)
                members.append((f"{bag_id}/d{k}", feats, tube))
            for k in range(n_background):
                feats = spec.noise_sigma * rng.normal(size=spec.feature_dimension)
                start = int(rng.integers(0, _VIDEO_F // 2))
                length = int(rng.integers(_VIDEO_F // 3, _VIDEO_F - start))
                tube = _jittered_tube(rng, _BG_BOX, 5.0, range(start, start + length))
                members.append((f"{bag_id}/b{k}", feats, tube))
            order = rng.permutation(len(members))
            instances = tuple(
                Instance(
                    id=members[j][0],
                    features=members[j][1].astype(np.float32).astype(np.float64),
                    source_bag_id=bag_id,
                    tube=members[j][2],
                )
                for j in order
            )
            bags.append(
                Bag(
                    id=bag_id,
                    instances=instances,
                    class_label=class_name,
                    ground_truth_tube=gt_tube,
                )
            )
            splits[bag_id] = "test" if b >= spec.bags_per_class - n_test else "train"
            planted[bag_id] = tuple(
                inst.id for inst in instances if inst.id.rpartition("/")[2].startswith("p")
            )
    dataset = Dataset(
        bags=tuple(bags),
        classes=classes,
        feature_dimension=spec.feature_dimension,
        splits=splits,
    )
    return SyntheticResult(dataset=dataset, planted=planted)


def save_planted(path: str, planted: dict[str, tuple[str, ...]]) -> None:
    _write_json(
        path,
        {
            "format": PLANTED_FORMAT,
            "version": FORMAT_VERSION,
            "planted": {k: list(v) for k, v in planted.items()},
        },
    )


def load_planted(path: str) -> dict[str, tuple[str, ...]]:
    obj = _as_dict(_load_json(path), path)
    _check_header(obj, PLANTED_FORMAT, path)
    raw = _as_dict(_get(obj, "planted", path), f"{path}: planted")
    out: dict[str, tuple[str, ...]] = {}
    for key, value in raw.items():
        if not isinstance(value, list) or any(not isinstance(s, str) for s in value):
            raise DataFormatError(f"{path}: planted[{key!r}] must be a list of strings")
        out[key] = tuple(value)
    return out


# ---------------------------------------------------------------------------
# models


def _weights_to_b64(weights: np.ndarray) -> str:
    return base64.b64encode(np.asarray(weights, dtype="<f8").tobytes()).decode("ascii")


def _weights_from_b64(blob: str, where: str) -> np.ndarray:
    try:
        raw = base64.b64decode(blob.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise DataFormatError(f"{where}: weights are not valid base64") from exc
    if len(raw) == 0 or len(raw) % 8 != 0:
        raise DataFormatError(f"{where}: weight blob length {len(raw)} is not a multiple of 8")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def save_model(path: str, model: ClassModel) -> None:
    hp = model.hyperparameters_used
    payload = {
        "format": MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "class_name": model.class_name,
        "dimension": model.dimension,
        "weights_b64": _weights_to_b64(model.weights),
        "bias": model.bias,
        "trained_iterations": model.trained_iterations,
        "hyperparameters": {name: getattr(hp, name) for name in _HP_FIELDS},
    }
    _write_json(path, payload)


def load_model(path: str) -> ClassModel:
    obj = _as_dict(_load_json(path), path)
    _check_header(obj, MODEL_FORMAT, path)
    class_name = _get_str(obj, "class_name", path)
    dim = _get_int(obj, "dimension", path)
    weights = _weights_from_b64(_get_str(obj, "weights_b64", path), path)
    if weights.shape[0] != dim:
        raise DataFormatError(
            f"{path}: declared dimension {dim} but weight blob holds {weights.shape[0]}"
        )
    bias = _get_float(obj, "bias", path)
    iters = _get_int(obj, "trained_iterations", path)
    hp = _hyperparameters_from_json(
        _get(obj, "hyperparameters", path), f"{path}: hyperparameters"
    )
    try:
        return ClassModel(
            class_name=class_name,
            weights=weights,
            bias=bias,
            hyperparameters_used=hp,
            trained_iterations=iters,
        )
    except PmilError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# training summaries: which models a training run produced and how


@dataclass(frozen=True)
class TrainingSummary:
    """Sidecar written next to model files so predict/eval reuse the run's setup."""

    mode: str
    classes: tuple[str, ...]
    model_files: dict[str, str]  # class name -> path relative to the summary
    hyperparameters: Hyperparameters
    dataset_path: str


def save_training_summary(path: str, summary: TrainingSummary) -> None:
    hp = summary.hyperparameters
    _write_json(
        path,
        {
            "format": SUMMARY_FORMAT,
            "version": FORMAT_VERSION,
            "mode": summary.mode,
            "classes": list(summary.classes),
            "model_files": dict(summary.model_files),
            "hyperparameters": {name: getattr(hp, name) for name in _HP_FIELDS},
            "dataset_path": summary.dataset_path,
        },
    )


def _hyperparameters_from_json(obj: object, where: str) -> Hyperparameters:
    hp_raw = _as_dict(obj, where)
    missing = set(_HP_FIELDS) - set(hp_raw)
    unknown = set(hp_raw) - set(_HP_FIELDS)
    if missing or unknown:
        raise DataFormatError(
            f"{where}: hyperparameters missing {sorted(missing)!r}, unknown {sorted(unknown)!r}"
        )
    kwargs: dict = {}
    for name in ("lam", "beta", "gamma", "eta", "zeta", "omega", "filter_max_volume_fraction"):
        kwargs[name] = _get_float(hp_raw, name, where)
    for name in ("pi", "top_k", "seed"):
        kwargs[name] = _get_int(hp_raw, name, where)
    kwargs["split_mode"] = _get_str(hp_raw, "split_mode", where)
    try:
        return Hyperparameters(**kwargs)
    except PmilError as exc:
        raise DataFormatError(f"{where}: {exc}") from exc


def load_training_summary(path: str) -> TrainingSummary:
    obj = _as_dict(_load_json(path), path)
    _check_header(obj, SUMMARY_FORMAT, path)
    mode = _get_str(obj, "mode", path)
    classes_raw = _get_list(obj, "classes", path)
    if any(not isinstance(c, str) or not c for c in classes_raw):
        raise DataFormatError(f"{path}: 'classes' must be nonempty strings")
    files_raw = _as_dict(_get(obj, "model_files", path), f"{path}: model_files")
    files: dict[str, str] = {}
    for k, v in files_raw.items():
        if not isinstance(v, str) or not v:
            raise DataFormatError(f"{path}: model_files[{k!r}] must be a nonempty path")
        files[str(k)] = v
    hp = _hyperparameters_from_json(obj.get("hyperparameters"), f"{path}: hyperparameters")
    return TrainingSummary(
        mode=mode,
        classes=tuple(classes_raw),
        model_files=files,
        hyperparameters=hp,
        dataset_path=_get_str(obj, "dataset_path", path),
    )


# ---------------------------------------------------------------------------
# prediction dumps: one JSON record per line


def save_predictions(path: str, predictions: Sequence[BagPrediction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pred in predictions:
            fh.write(
                json.dumps(
                    {
                        "bag_id": pred.bag_id,
                        "class_name": pred.class_name,
                        "set_probability": pred.set_probability,
                        "instance_probabilities": list(pred.instance_probabilities),
                        "argmax_index": pred.argmax_index,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_predictions(path: str) -> list[BagPrediction]:
    text = _read_text(path)
    out: list[BagPrediction] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path}: line {lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{where}: invalid JSON: {exc}") from exc
        rec = _as_dict(obj, where)
        probs_raw = _get_list(rec, "instance_probabilities", where)
        if any(isinstance(p, bool) or not isinstance(p, (int, float)) for p in probs_raw):
            raise DataFormatError(f"{where}: instance probabilities must be numbers")
        try:
            out.append(
                BagPrediction(
                    bag_id=_get_str(rec, "bag_id", where),
                    class_name=_get_str(rec, "class_name", where),
                    set_probability=_get_float(rec, "set_probability", where),
                    instance_probabilities=tuple(float(p) for p in probs_raw),
                    argmax_index=_get_int(rec, "argmax_index", where),
                )
            )
        except PmilError as exc:
            raise DataFormatError(f"{where}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# evaluation reports


def report_to_dict(report: EvalReport) -> dict:
    return {
        "format": REPORT_FORMAT,
        "version": FORMAT_VERSION,
        "iou_threshold": report.iou_threshold,
        "per_class_ap": dict(report.per_class_ap),
        "map_score": report.map_score,
        "per_class_msero": dict(report.per_class_msero),
        "classification_accuracy": report.classification_accuracy,
        "recall_iou_samples": [[t, r] for t, r in report.recall_iou_samples],
        "map_sweep": [[t, s] for t, s in report.map_sweep],
        "omitted_classes": list(report.omitted_classes),
        "scatter_records": [
            {
                "bag_id": rec.bag_id,
                "instance_id": rec.instance_id,
                "probability": rec.probability,
                "iou": rec.iou,
                "is_argmax": rec.is_argmax,
                "is_optimal": rec.is_optimal,
            }
            for rec in report.scatter_records
        ],
    }


def save_report(path: str, report: EvalReport) -> None:
    _write_json(path, report_to_dict(report))


def _float_map(obj: dict, key: str, where: str) -> dict[str, float]:
    raw = _as_dict(_get(obj, key, where), f"{where}: {key}")
    out: dict[str, float] = {}
    for k, v in raw.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise DataFormatError(f"{where}: {key}[{k!r}] must be a number")
        out[str(k)] = float(v)
    return out


def _pair_list(obj: dict, key: str, where: str) -> tuple[tuple[float, float], ...]:
    raw = _get_list(obj, key, where)
    out = []
    for i, item in enumerate(raw):
        if (
            not isinstance(item, list)
            or len(item) != 2
            or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in item)
        ):
            raise DataFormatError(f"{where}: {key}[{i}] must be a [number, number] pair")
        out.append((float(item[0]), float(item[1])))
    return tuple(out)


def load_report(path: str) -> EvalReport:
    obj = _as_dict(_load_json(path), path)
    _check_header(obj, REPORT_FORMAT, path)
    scatter_raw = _get_list(obj, "scatter_records", path)
    scatter = []
    for i, rec in enumerate(scatter_raw):
        where = f"{path}: scatter record {i}"
        rec = _as_dict(rec, where)
        for flag in ("is_argmax", "is_optimal"):
            if not isinstance(_get(rec, flag, where), bool):
                raise DataFormatError(f"{where}: {flag} must be a boolean")
        scatter.append(
            ScatterRecord(
                bag_id=_get_str(rec, "bag_id", where),
                instance_id=_get_str(rec, "instance_id", where),
                probability=_get_float(rec, "probability", where),
                iou=_get_float(rec, "iou", where),
                is_argmax=rec["is_argmax"],
                is_optimal=rec["is_optimal"],
            )
        )
    omitted_raw = _get_list(obj, "omitted_classes", path)
    if any(not isinstance(s, str) for s in omitted_raw):
        raise DataFormatError(f"{path}: omitted_classes must be strings")
    return EvalReport(
        per_class_ap=_float_map(obj, "per_class_ap", path),
        map_score=_get_float(obj, "map_score", path),
        per_class_msero=_float_map(obj, "per_class_msero", path),
        classification_accuracy=_get_float(obj, "classification_accuracy", path),
        recall_iou_samples=_pair_list(obj, "recall_iou_samples", path),
        scatter_records=tuple(scatter),
        map_sweep=_pair_list(obj, "map_sweep", path),
        omitted_classes=tuple(omitted_raw),
        iou_threshold=_get_float(obj, "iou_threshold", path),
    )
