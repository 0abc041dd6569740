"""Command-line interface exposing the full pipeline.

Subcommands: gen, validate-map, remap, split, pretrain, finetune, eval,
export-features, report. Exit codes: 0 success, 1 usage error, 2 data
error, 3 numeric failure. All randomness flows from --seed (default: the
COLA_SEED environment variable, else 0); no wall-clock entropy anywhere.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import harness, reference, synthgen, taxonomy
from .errors import DataError, NumericError, UsageError
from .featurize import compute_features, features_to_csv, voxel_labels, voxelize
from .harness import (
    ARM_SCRATCH,
    PRETRAIN_ARMS,
    ExperimentSpec,
    PhaseConfig,
    extract_test_split,
    featurize_index,
    fine_lookup,
    finetune,
    load_experiment_spec,
    make_partial_split,
    pretrain,
    run_experiment,
)
from .lidar_io import index_dataset, parse_label_file, read_scan_pair, write_label_file
from .metrics import accumulate, empty_confusion, format_iou_table, iou_csv_rows
from .model import extract_penultimate, forward, load_checkpoint
from .taxonomy import Variant, coarse_set, load_label_map, remap, validate_label_map

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); keep our code 1
        raise UsageError(message)


def _env_seed() -> int:
    try:
        return int(os.environ.get("COLA_SEED", "0"))
    except ValueError:
        return 0


def _add_seed(parser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="random seed (default: COLA_SEED env var, else 0)")


def _seed_of(args) -> int:
    return args.seed if args.seed is not None else _env_seed()


def _say(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def build_parser() -> _Parser:
    parser = _Parser(prog="cola", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="progress lines on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", type=Path, help="corpus config file")
    group.add_argument("--reference", action="store_true", help="use the shipped reference corpus")
    p.add_argument("--out", type=Path, required=True)
    _add_seed(p)

    p = sub.add_parser("validate-map", help="validate a fine-to-coarse label map")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--variant", default="eight", choices=[v.value for v in Variant])
    p.add_argument("--dataset", type=Path, help="dataset root to check totality against")

    p = sub.add_parser("remap", help="remap one label file through a map")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--variant", default="eight", choices=[v.value for v in Variant])
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("split", help="extract test split and a partial level")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--percent", type=int, default=100, choices=sorted(harness.PARTIAL_LEVELS))
    p.add_argument("--out", type=Path, required=True)
    _add_seed(p)

    p = sub.add_parser("pretrain", help="pre-train on one or more source datasets")
    p.add_argument("--source", type=Path, action="append", required=True,
                   help="source dataset root (repeatable)")
    p.add_argument("--arm", default="cola", choices=list(PRETRAIN_ARMS))
    p.add_argument("--variant", default="eight", choices=[v.value for v in Variant])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-scans", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--schedule", default="anneal", choices=["anneal", "warmup"])
    p.add_argument("--voxel-size", type=float, default=0.2)
    p.add_argument("--jobs", type=int, default=1)
    _add_seed(p)

    p = sub.add_parser("finetune", help="finetune a checkpoint (or train from scratch)")
    p.add_argument("--target", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", type=Path)
    group.add_argument("--scratch", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--fraction", type=int, default=100, choices=sorted(harness.PARTIAL_LEVELS))
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-scans", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--schedule", default="anneal", choices=["anneal", "warmup"])
    p.add_argument("--voxel-size", type=float, default=0.2)
    p.add_argument("--jobs", type=int, default=1)
    _add_seed(p)

    p = sub.add_parser("eval", help="evaluate a model on a dataset (voxel-level mIoU)")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--map", type=Path, help="fine-to-coarse map for coarse checkpoints")
    p.add_argument("--voxel-size", type=float, default=0.2)
    p.add_argument("--csv", type=Path, help="also write per-class rows to this file")

    p = sub.add_parser("export-features", help="export voxel features or embeddings as CSV")
    p.add_argument("--scan", type=Path, required=True)
    p.add_argument("--labels", type=Path)
    p.add_argument("--model", type=Path, help="export penultimate embeddings of this checkpoint")
    p.add_argument("--voxel-size", type=float, default=0.2)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("report", help="run an experiment spec and print the comparison table")
    p.add_argument("--experiment", type=Path, required=True)
    p.add_argument("--out", type=Path, help="directory for report files and checkpoints")
    p.add_argument("--jobs", type=int, default=1)
    return parser


def _cmd_gen(args, verbose: bool) -> int:
    cfg = reference.reference_corpus_config() if args.reference \
        else synthgen.load_corpus_config(args.config)
    indices = synthgen.generate_corpus(cfg, _seed_of(args), args.out)
    for index in indices:
        _say(f"{index.dataset_name}: {index.n_scenes} scenes, {index.n_scans} scans")
    print(args.out)
    return EXIT_OK


def _cmd_validate_map(args, verbose: bool) -> int:
    label_map = load_label_map(args.map.read_text(encoding="utf-8"),
                               coarse_set(Variant(args.variant)))
    if args.dataset is not None:
        vocabulary = index_dataset(args.dataset).fine_vocabulary
    else:
        vocabulary = label_map.entries.keys()
    report = validate_label_map(label_map, vocabulary)
    if report.unused_coarse_ids:
        names = [coarse_set(Variant(args.variant)).name_of(i) for i in sorted(report.unused_coarse_ids)]
        _say(f"warning: coarse labels receive no fine label: {', '.join(names)}")
    if not report.ok:
        raise DataError(
            f"map invalid: unmapped fine ids {sorted(report.unmapped_fine_ids)},"
            f" out-of-range coarse ids {sorted(report.out_of_range_coarse_ids)}"
        )
    print("ok")
    return EXIT_OK


def _cmd_remap(args, verbose: bool) -> int:
    label_map = load_label_map(args.map.read_text(encoding="utf-8"),
                               coarse_set(Variant(args.variant)))
    raw = args.labels.read_bytes()
    if len(raw) % 4 != 0:
        raise DataError(f"{args.labels}: label payload not a multiple of 4 bytes")
    labels = parse_label_file(raw, len(raw) // 4)
    remapped = remap(labels, label_map)
    args.out.write_bytes(write_label_file(remapped))
    _say(f"remapped {len(remapped)} labels -> {args.out}")
    return EXIT_OK


def _cmd_split(args, verbose: bool) -> int:
    from .seeding import derive_seed

    index = index_dataset(args.dataset)
    seed = _seed_of(args)
    train_index, test_index = extract_test_split(index, args.test_fraction,
                                                 derive_seed(seed, "test"))
    split = make_partial_split(train_index, args.percent, derive_seed(seed, "partial"))
    args.out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", split.train), ("val", split.validation), ("test", test_index)):
        entries = []
        for scene_id, scan_path, label_path in part.all_pairs():
            entries.append((scene_id,
                            os.path.relpath(scan_path, args.out),
                            os.path.relpath(label_path, args.out)))
        from .lidar_io import write_manifest

        write_manifest(args.out / f"{name}.manifest", entries)
        _say(f"{name}: {part.n_scenes} scenes, {part.n_scans} scans")
    return EXIT_OK


def _pretrain_spec(args) -> ExperimentSpec:
    phase = PhaseConfig(epochs=args.epochs, batch_scans=args.batch_scans, base_lr=args.lr,
                        momentum=args.momentum, schedule=args.schedule)
    return ExperimentSpec(
        name="cli-pretrain", target=Path("<none>"), sources=list(args.source),
        arms=[args.arm], variant=Variant(args.variant), pretrain=phase,
        voxel_size=args.voxel_size, jobs=args.jobs,
    )


def _cmd_pretrain(args, verbose: bool) -> int:
    spec = _pretrain_spec(args)
    indices = {Path(p).name: index_dataset(p) for p in spec.sources}
    maps = harness.validate_sources(spec, indices)
    featurized = {}
    for name, index in indices.items():
        if verbose:
            _say(f"featurizing {name} ({index.n_scans} scans)")
        featurized[name] = featurize_index(index, spec.voxel_size, label_map=maps[name],
                                           jobs=args.jobs)
    result = pretrain(spec, args.arm, _seed_of(args), featurized)
    args.out.write_bytes(result.checkpoint)
    curve = ", ".join(f"{v:.3f}" for v in result.val_curve)
    _say(f"validation mIoU per epoch: {curve}")
    print(args.out)
    return EXIT_OK


def _cmd_finetune(args, verbose: bool) -> int:
    from .seeding import derive_seed

    phase = PhaseConfig(epochs=args.epochs, batch_scans=args.batch_scans, base_lr=args.lr,
                        momentum=args.momentum, schedule=args.schedule)
    spec = ExperimentSpec(
        name="cli-finetune", target=args.target, sources=[], arms=[ARM_SCRATCH],
        finetune=phase, voxel_size=args.voxel_size, test_fraction=args.test_fraction,
        split_seed=args.split_seed, fractions=[args.fraction], jobs=args.jobs,
    )
    index = index_dataset(args.target)
    train_index, test_index = extract_test_split(index, spec.test_fraction,
                                                 derive_seed(spec.split_seed, "test"))
    split = make_partial_split(train_index, args.fraction, derive_seed(spec.split_seed, "partial"))
    if verbose:
        _say(f"featurizing {index.dataset_name} ({index.n_scans} scans)")
    featurized = featurize_index(index, spec.voxel_size, jobs=args.jobs)
    checkpoint = args.checkpoint.read_bytes() if args.checkpoint else None
    arm = "cola" if checkpoint is not None else ARM_SCRATCH
    cell = finetune(checkpoint, featurized, split,
                    featurized.by_scenes(test_index.scene_ids), spec, _seed_of(args),
                    args.fraction, arm)
    args.out.write_bytes(cell.model_bytes)
    print(f"test mIoU: {cell.test_miou:.4f}")
    return EXIT_OK


def _cmd_eval(args, verbose: bool) -> int:
    net, stats = load_checkpoint(args.model.read_bytes())
    index = index_dataset(args.dataset)
    label_map = None
    class_names: list[str]
    if args.map is not None:
        variant = Variant(stats.variant) if stats.variant in {v.value for v in Variant} \
            else Variant.EIGHT
        label_map = load_label_map(args.map.read_text(encoding="utf-8"), coarse_set(variant))
        n_classes = len(coarse_set(variant))
        class_names = list(coarse_set(variant).names)
        if net.n_classes != n_classes:
            raise DataError(
                f"model has {net.n_classes} classes but the {variant.value} set has {n_classes}"
            )
    else:
        table, ids = fine_lookup(index.fine_vocabulary)
        if net.n_classes != len(ids):
            raise DataError(
                f"model has {net.n_classes} classes but {index.dataset_name}"
                f" has {len(ids)} fine classes; pass --map for coarse checkpoints"
            )
        class_names = [index.fine_vocabulary[i] for i in ids]
    featurized = featurize_index(index, args.voxel_size, label_map=label_map)
    cm = empty_confusion(net.n_classes)
    for scan in featurized.scans:
        x = (scan.features - stats.feature_mean) / stats.feature_std
        logits, _ = forward(net, x)
        if label_map is not None:
            targets = scan.coarse.astype(np.int64) - 1
            targets[targets < 0] = -1
        else:
            targets = harness.apply_lookup(scan.fine, fine_lookup(index.fine_vocabulary)[0])
        cm = accumulate(cm, logits.argmax(axis=1), targets, ignore_id=-1)
    print(format_iou_table(cm, class_names))
    if args.csv is not None:
        args.csv.write_text(iou_csv_rows(cm, class_names), encoding="utf-8")
    return EXIT_OK


def _cmd_export_features(args, verbose: bool) -> int:
    raw = args.scan.read_bytes()
    from .lidar_io import parse_point_scan

    scan = parse_point_scan(raw, scan_id=args.scan.stem)
    labels = None
    if args.labels is not None:
        labels = parse_label_file(args.labels.read_bytes(), len(scan))
    grid = voxelize(scan, args.voxel_size)
    matrix = compute_features(scan, grid)
    vox_labels = voxel_labels(grid, labels) if labels is not None else None
    if args.model is not None:
        net, stats = load_checkpoint(args.model.read_bytes())
        x = (matrix.values - stats.feature_mean) / stats.feature_std
        emb = extract_penultimate(net, x)
        header = ["i", "j", "k"] + (["label"] if vox_labels is not None else []) \
            + [f"e{j:02d}" for j in range(emb.shape[1])]
        lines = [",".join(header)]
        for r in range(emb.shape[0]):
            row = [str(int(v)) for v in matrix.coords[r]]
            if vox_labels is not None:
                row.append(str(int(vox_labels[r])))
            row += [format(v, ".17g") for v in emb[r]]
            lines.append(",".join(row))
        args.out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        args.out.write_text(features_to_csv(matrix, vox_labels), encoding="utf-8")
    _say(f"wrote {grid.n_voxels} rows -> {args.out}")
    return EXIT_OK


def _cmd_report(args, verbose: bool) -> int:
    spec = load_experiment_spec(args.experiment)
    if args.out is not None:
        spec.out_dir = args.out
    spec.jobs = args.jobs
    progress = _say if verbose else None
    report = run_experiment(spec, progress=progress)
    print(report.to_table())
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen,
    "validate-map": _cmd_validate_map,
    "remap": _cmd_remap,
    "split": _cmd_split,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "export-features": _cmd_export_features,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args, args.verbose)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
