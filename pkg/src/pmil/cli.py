"""Command-line operator surface: train, predict, eval, cv, gridsearch, synth.

Experiment modes gate the two optional mechanisms: plain `pmil` trains on raw
bags, `pmil_f` filters oversized proposals before training and scoring, and
`pmil_f_s` additionally rewrites positive bags between epochs (set splitting).
Exit codes: 0 success, 2 invalid input, 3 numerical failure.  The PMIL_LOG
environment variable (DEBUG/INFO/WARNING/ERROR) controls log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import data as dataio
from .core import Bag, ClassModel, Hyperparameters
from .errors import DataFormatError, NumericalError, PmilError, ValidationError
from .evaluate import evaluate_dataset, render_report_text
from .geometry import filter_large_proposals
from .predict import classify_bag, predict_bag
from .train import LossBreakdown, TrainingState, train_class

logger = logging.getLogger(__name__)

MODES = ("pmil", "pmil_f", "pmil_f_s")
_DEFAULT_HP = Hyperparameters()
_DEFAULT_SPEC = dataio.SyntheticSpec()


@dataclass(frozen=True)
class RunConfig:
    """Everything one subcommand invocation needs, resolved from flags."""

    command: str
    dataset: str | None = None
    models: str | None = None
    out: str | None = None
    mode: str | None = None
    hyperparameters: Hyperparameters = _DEFAULT_HP
    iou_threshold: float = 0.2
    workers: int = 1
    split: str = "test"
    grid: str | None = None
    synth_spec: dataio.SyntheticSpec | None = None
    eleven_point: bool = False
    use_coverage: bool = False


def _mode_gates(mode: str) -> tuple[bool, bool]:
    """(filter_proposals, split_between_epochs) for an experiment mode."""
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}, expected one of {MODES}")
    return mode in ("pmil_f", "pmil_f_s"), mode == "pmil_f_s"


def _filtered_bags(bags: list[Bag], mode: str, hp: Hyperparameters) -> list[Bag]:
    filter_on, _split_on = _mode_gates(mode)
    if not filter_on:
        return list(bags)
    return [filter_large_proposals(bag, hp.filter_max_volume_fraction) for bag in bags]


def _load_dataset_arg(path: str) -> dataio.Dataset:
    """Accept either a dataset directory or a manifest.json path."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    return dataio.load_dataset(path)


def _select_bags(dataset: dataio.Dataset, split: str) -> list[Bag]:
    if split == "train":
        bags = dataset.train_bags()
    elif split == "test":
        bags = dataset.test_bags()
    elif split == "all":
        bags = list(dataset.bags)
    else:
        raise ValidationError(f"unknown split {split!r}, expected train/test/all")
    if not bags:
        raise ValidationError(f"dataset has no bags in split {split!r}")
    return bags


def _safe_filename(class_name: str, index: int) -> str:
    stem = re.sub(r"[^A-Za-z0-9_.-]", "_", class_name)
    return f"{index:02d}_{stem}.model.json"


def _map_workers(workers: int, fn, items: list):
    """Run fn over items, optionally in a thread pool; results keep item order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(config: RunConfig) -> int:
    assert config.synth_spec is not None and config.out is not None
    result = dataio.generate_synthetic(config.synth_spec)
    os.makedirs(config.out, exist_ok=True)
    manifest = dataio.save_dataset(config.out, result.dataset)
    dataio.save_planted(os.path.join(config.out, "planted.json"), result.planted)
    n_train = len(result.dataset.train_bags())
    n_test = len(result.dataset.test_bags())
    print(
        f"wrote {len(result.dataset.bags)} bags "
        f"({n_train} train / {n_test} test, {len(result.dataset.classes)} classes) "
        f"to {manifest}"
    )
    return 0


def cmd_train(config: RunConfig) -> int:
    assert config.dataset is not None and config.models is not None
    mode = config.mode or "pmil"
    hp = config.hyperparameters
    dataset = _load_dataset_arg(config.dataset)
    if len(dataset.classes) < 2:
        raise ValidationError(
            f"training needs at least 2 classes, dataset has {len(dataset.classes)}"
        )
    bags = _select_bags(dataset, "train")
    filter_on, split_on = _mode_gates(mode)
    classes = sorted(dataset.classes)

    def run_one(class_name: str) -> tuple[ClassModel, list[dict]]:
        entries: list[dict] = []

        def on_epoch(epoch: int, state: TrainingState, loss: LossBreakdown) -> None:
            entries.append(
                {
                    "epoch": epoch,
                    "num_bags": len(state.dataset_view),
                    "loss": {
                        "regularizer": loss.regularizer,
                        "bag_loss": loss.bag_loss,
                        "instance_loss": loss.instance_loss,
                        "total": loss.total,
                    },
                }
            )

        model = train_class(
            bags,
            class_name,
            hp,
            filter_proposals=filter_on,
            split_between_epochs=split_on,
            epoch_callback=on_epoch,
        )
        return model, entries

    results = _map_workers(config.workers, run_one, classes)
    os.makedirs(config.models, exist_ok=True)
    model_files: dict[str, str] = {}
    training_log: dict[str, list[dict]] = {}
    for i, (class_name, (model, entries)) in enumerate(zip(classes, results)):
        rel = _safe_filename(class_name, i)
        dataio.save_model(os.path.join(config.models, rel), model)
        model_files[class_name] = rel
        training_log[class_name] = entries
    summary = dataio.TrainingSummary(
        mode=mode,
        classes=tuple(classes),
        model_files=model_files,
        hyperparameters=hp,
        dataset_path=os.path.abspath(config.dataset),
    )
    dataio.save_training_summary(os.path.join(config.models, "training_summary.json"), summary)
    with open(os.path.join(config.models, "training_log.json"), "w", encoding="utf-8") as fh:
        json.dump(training_log, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"trained {len(classes)} class models (mode={mode}) -> {config.models}")
    return 0


def _load_run(models_dir: str, override_mode: str | None) -> tuple[list[ClassModel], str, Hyperparameters]:
    """Models plus the mode/hyperparameters they were trained with."""
    if not os.path.isdir(models_dir):
        raise ValidationError(f"model directory {models_dir!r} does not exist")
    summary_path = os.path.join(models_dir, "training_summary.json")
    if os.path.exists(summary_path):
        summary = dataio.load_training_summary(summary_path)
        models = [
            dataio.load_model(os.path.join(models_dir, rel))
            for _cls, rel in sorted(summary.model_files.items())
        ]
        mode = override_mode or summary.mode
        hp = summary.hyperparameters
    else:
        names = sorted(n for n in os.listdir(models_dir) if n.endswith(".model.json"))
        if not names:
            raise ValidationError(f"no model files found under {models_dir}")
        models = [dataio.load_model(os.path.join(models_dir, n)) for n in names]
        mode = override_mode or "pmil"
        hp = models[0].hyperparameters_used
    if not models:
        raise ValidationError(f"no models found under {models_dir}")
    return models, mode, hp


def cmd_predict(config: RunConfig) -> int:
    assert config.dataset is not None and config.models is not None and config.out is not None
    dataset = _load_dataset_arg(config.dataset)
    models, mode, hp = _load_run(config.models, config.mode)
    bags = _filtered_bags(_select_bags(dataset, config.split), mode, hp)
    os.makedirs(config.out, exist_ok=True)
    for i, model in enumerate(sorted(models, key=lambda m: m.class_name)):
        preds = [predict_bag(model, bag) for bag in bags]
        rel = _safe_filename(model.class_name, i).replace(".model.json", ".predictions.jsonl")
        dataio.save_predictions(os.path.join(config.out, rel), preds)
    with open(os.path.join(config.out, "classifications.jsonl"), "w", encoding="utf-8") as fh:
        for bag in bags:
            result = classify_bag(models, bag)
            fh.write(
                json.dumps(
                    {
                        "bag_id": bag.id,
                        "true_class": bag.class_label,
                        "predicted_class": result.predicted_class,
                        "per_class_set_probabilities": result.per_class_set_probabilities,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    print(f"wrote predictions for {len(bags)} bags under {len(models)} models -> {config.out}")
    return 0


def cmd_eval(config: RunConfig) -> int:
    assert config.dataset is not None and config.models is not None and config.out is not None
    dataset = _load_dataset_arg(config.dataset)
    models, mode, hp = _load_run(config.models, config.mode)
    bags = _filtered_bags(_select_bags(dataset, config.split), mode, hp)
    report = evaluate_dataset(
        models,
        bags,
        iou_threshold=config.iou_threshold,
        use_coverage=config.use_coverage,
        eleven_point=config.eleven_point,
    )
    os.makedirs(config.out, exist_ok=True)
    dataio.save_report(os.path.join(config.out, "report.json"), report)
    text = render_report_text(report)
    with open(os.path.join(config.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text)
    print(f"report -> {os.path.join(config.out, 'report.json')}")
    return 0


def _cv_folds(bags: list[Bag], classes: list[str]) -> list[tuple[list[Bag], list[Bag]]]:
    """Leave-one-bag-out per class: fold k holds out bags_c[k % |bags_c|] for each c.

    The fold count is the largest class's bag count, so every bag is held out
    at least once while every class keeps at least one training bag per fold.
    """
    by_class: dict[str, list[Bag]] = {c: [] for c in classes}
    for bag in bags:
        if bag.class_label in by_class:
            by_class[bag.class_label].append(bag)
    for c in classes:
        if len(by_class[c]) < 2:
            raise ValidationError(
                f"class {c!r} has {len(by_class[c])} bag(s); cross-validation "
                "needs at least 2 per class"
            )
    folds = []
    k_max = max(len(v) for v in by_class.values())
    for k in range(k_max):
        held_ids = {by_class[c][k % len(by_class[c])].id for c in classes}
        train_fold = [b for b in bags if b.id not in held_ids]
        held_fold = [b for b in bags if b.id in held_ids]
        folds.append((train_fold, held_fold))
    return folds


def _cross_validate(
    bags: list[Bag],
    classes: list[str],
    hp: Hyperparameters,
    mode: str,
    workers: int,
) -> dict:
    filter_on, split_on = _mode_gates(mode)
    folds = _cv_folds(bags, classes)

    def run_fold(fold: tuple[list[Bag], list[Bag]]) -> float:
        train_fold, held_fold = fold
        models = [
            train_class(
                train_fold,
                class_name,
                hp,
                filter_proposals=filter_on,
                split_between_epochs=split_on,
            )
            for class_name in classes
        ]
        held = _filtered_bags(held_fold, mode, hp)
        correct = sum(
            1 for bag in held if classify_bag(models, bag).predicted_class == bag.class_label
        )
        return correct / len(held)

    accuracies = _map_workers(workers, run_fold, folds)
    return {
        "folds": len(folds),
        "fold_accuracies": [float(a) for a in accuracies],
        "mean_accuracy": float(sum(accuracies) / len(accuracies)),
    }


def cmd_cv(config: RunConfig) -> int:
    assert config.dataset is not None
    mode = config.mode or "pmil"
    dataset = _load_dataset_arg(config.dataset)
    if len(dataset.classes) < 2:
        raise ValidationError(
            f"cross-validation needs at least 2 classes, dataset has {len(dataset.classes)}"
        )
    bags = _select_bags(dataset, "train")
    result = _cross_validate(
        bags, sorted(dataset.classes), config.hyperparameters, mode, config.workers
    )
    result["mode"] = mode
    print(
        f"cv: {result['folds']} folds, mean accuracy {result['mean_accuracy']:.4f} (mode={mode})"
    )
    if config.out is not None:
        os.makedirs(config.out, exist_ok=True)
        path = os.path.join(config.out, "cv.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"cv report -> {path}")
    return 0


_GRID_FIELDS = {f.name for f in dataclasses.fields(Hyperparameters)}


def _load_grid(path: str) -> list[tuple[str, list]]:
    obj = dataio._load_json(path)
    if not isinstance(obj, dict) or not obj:
        raise DataFormatError(f"{path}: grid file must be a nonempty JSON object")
    grid: list[tuple[str, list]] = []
    for key, values in obj.items():
        if key not in _GRID_FIELDS:
            raise DataFormatError(f"{path}: unknown hyperparameter {key!r} in grid")
        if not isinstance(values, list) or not values:
            raise DataFormatError(f"{path}: grid values for {key!r} must be a nonempty list")
        grid.append((key, values))
    return grid


def cmd_gridsearch(config: RunConfig) -> int:
    assert config.dataset is not None and config.grid is not None
    mode = config.mode or "pmil"
    dataset = _load_dataset_arg(config.dataset)
    bags = _select_bags(dataset, "train")
    classes = sorted(dataset.classes)
    grid = _load_grid(config.grid)
    keys = [k for k, _v in grid]
    combos = list(itertools.product(*(v for _k, v in grid)))

    def run_cell(combo: tuple) -> dict:
        hp_cell = dataclasses.replace(config.hyperparameters, **dict(zip(keys, combo)))
        cv = _cross_validate(bags, classes, hp_cell, mode, workers=1)
        return {"params": dict(zip(keys, combo)), "mean_accuracy": cv["mean_accuracy"]}

    cells = _map_workers(config.workers, run_cell, combos)
    best = cells[0]
    for cell in cells[1:]:
        if cell["mean_accuracy"] > best["mean_accuracy"]:
            best = cell
    table = {"mode": mode, "cells": cells, "best": best}
    print(f"gridsearch: {len(cells)} cells, best {best['params']} "
          f"accuracy {best['mean_accuracy']:.4f}")
    if config.out is not None:
        os.makedirs(config.out, exist_ok=True)
        path = os.path.join(config.out, "gridsearch.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(table, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"gridsearch table -> {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_hyperparameter_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lambda", dest="lam", type=float, default=_DEFAULT_HP.lam,
                        help="L2 weight / step-size schedule parameter")
    parser.add_argument("--beta", type=float, default=_DEFAULT_HP.beta,
                        help="bag cross-entropy weight")
    parser.add_argument("--gamma", type=float, default=_DEFAULT_HP.gamma,
                        help="instance hinge weight")
    parser.add_argument("--eta", type=float, default=_DEFAULT_HP.eta, help="hinge margin")
    parser.add_argument("--zeta", type=float, default=_DEFAULT_HP.zeta,
                        help="instance positivity threshold")
    parser.add_argument("--omega", type=float, default=_DEFAULT_HP.omega,
                        help="set-splitting probability threshold")
    parser.add_argument("--pi", type=int, default=_DEFAULT_HP.pi, help="epoch budget: first split level runs pi epochs, each later level one fewer")
    parser.add_argument("--filter-max-volume", dest="filter_max_volume_fraction", type=float,
                        default=_DEFAULT_HP.filter_max_volume_fraction,
                        help="volume fraction above which proposals are filtered")
    parser.add_argument("--split-mode", choices=("threshold", "top_k"),
                        default=_DEFAULT_HP.split_mode)
    parser.add_argument("--top-k", dest="top_k", type=int, default=_DEFAULT_HP.top_k,
                        help="positive instances kept per bag in top_k split mode")
    parser.add_argument("--seed", type=int, default=_DEFAULT_HP.seed)


def _hp_from_args(args: argparse.Namespace) -> Hyperparameters:
    return Hyperparameters(
        lam=args.lam,
        beta=args.beta,
        gamma=args.gamma,
        eta=args.eta,
        zeta=args.zeta,
        omega=args.omega,
        pi=args.pi,
        filter_max_volume_fraction=args.filter_max_volume_fraction,
        split_mode=args.split_mode,
        top_k=args.top_k,
        seed=args.seed,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pmil",
        description="Weakly supervised multiple-instance localization and classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one model per class")
    p_train.add_argument("--dataset", required=True, help="dataset directory or manifest.json path")
    p_train.add_argument("--models", required=True, help="output directory for model files")
    p_train.add_argument("--mode", choices=MODES, default="pmil")
    p_train.add_argument("--workers", type=int, default=1)
    _add_hyperparameter_flags(p_train)

    p_predict = sub.add_parser("predict", help="dump per-class predictions")
    p_predict.add_argument("--dataset", required=True)
    p_predict.add_argument("--models", required=True)
    p_predict.add_argument("--out", required=True)
    p_predict.add_argument("--mode", choices=MODES, default=None,
                           help="override the mode recorded at training time")
    p_predict.add_argument("--split", choices=("train", "test", "all"), default="test")

    p_eval = sub.add_parser("eval", help="evaluate models on a dataset split")
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--models", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--mode", choices=MODES, default=None)
    p_eval.add_argument("--split", choices=("train", "test", "all"), default="test")
    p_eval.add_argument("--iou-threshold", type=float, default=0.2)
    p_eval.add_argument("--coverage", action="store_true",
                        help="score overlap as ground-truth coverage instead of IOU")
    p_eval.add_argument("--eleven-point", action="store_true",
                        help="11-point interpolated average precision")

    p_cv = sub.add_parser("cv", help="leave-one-bag-out-per-class cross-validation")
    p_cv.add_argument("--dataset", required=True)
    p_cv.add_argument("--out", default=None)
    p_cv.add_argument("--mode", choices=MODES, default="pmil")
    p_cv.add_argument("--workers", type=int, default=1)
    _add_hyperparameter_flags(p_cv)

    p_grid = sub.add_parser("gridsearch", help="grid search scored by cv accuracy")
    p_grid.add_argument("--dataset", required=True)
    p_grid.add_argument("--grid", required=True, help="JSON file: parameter -> list of values")
    p_grid.add_argument("--out", default=None)
    p_grid.add_argument("--mode", choices=MODES, default="pmil")
    p_grid.add_argument("--workers", type=int, default=1)
    _add_hyperparameter_flags(p_grid)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--classes", type=int, default=_DEFAULT_SPEC.num_classes)
    p_synth.add_argument("--bags-per-class", type=int, default=_DEFAULT_SPEC.bags_per_class)
    p_synth.add_argument("--instances-per-bag", type=int,
                         default=_DEFAULT_SPEC.instances_per_bag)
    p_synth.add_argument("--planted-per-bag", type=int,
                         default=_DEFAULT_SPEC.positives_per_positive_bag)
    p_synth.add_argument("--dim", type=int, default=_DEFAULT_SPEC.feature_dimension)
    p_synth.add_argument("--separation", type=float, default=_DEFAULT_SPEC.cluster_separation)
    p_synth.add_argument("--sigma", type=float, default=_DEFAULT_SPEC.noise_sigma)
    p_synth.add_argument("--seed", type=int, default=_DEFAULT_SPEC.seed)
    p_synth.add_argument("--test-fraction", type=float, default=_DEFAULT_SPEC.test_fraction)
    p_synth.add_argument("--decoy-fraction", type=float, default=_DEFAULT_SPEC.decoy_fraction)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    kwargs: dict = {"command": args.command}
    if args.command in ("train", "cv", "gridsearch"):
        kwargs["hyperparameters"] = _hp_from_args(args)
        kwargs["workers"] = args.workers
        kwargs["mode"] = args.mode
    if args.command == "synth":
        kwargs["synth_spec"] = dataio.SyntheticSpec(
            num_classes=args.classes,
            bags_per_class=args.bags_per_class,
            instances_per_bag=args.instances_per_bag,
            positives_per_positive_bag=args.planted_per_bag,
            feature_dimension=args.dim,
            cluster_separation=args.separation,
            noise_sigma=args.sigma,
            seed=args.seed,
            test_fraction=args.test_fraction,
            decoy_fraction=args.decoy_fraction,
        )
    for name in ("dataset", "models", "out", "grid", "split", "iou_threshold"):
        if hasattr(args, name):
            kwargs[name] = getattr(args, name)
    if hasattr(args, "mode"):
        kwargs["mode"] = args.mode
    if hasattr(args, "coverage"):
        kwargs["use_coverage"] = args.coverage
    if hasattr(args, "eleven_point"):
        kwargs["eleven_point"] = args.eleven_point
    return RunConfig(**kwargs)


_COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "gridsearch": cmd_gridsearch,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    level_name = os.environ.get("PMIL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
        return _COMMANDS[config.command](config)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except PmilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
