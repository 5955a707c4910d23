"""
Command line verbs. Every verb that writes into an output directory also writes `run.json`
there: the verb, argv, seed, config and the sha256 of every input file.
"""
import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Callable

from loguru import logger

from protoalign.checkpoint import load_checkpoint, restore_model
from protoalign.config import DEFAULT_CLASSES, SECTIONS, VARIANTS, Settings, load_settings, to_dict
from protoalign.episodes import SplitSpec, SubjectStore, folds_for, make_splits
from protoalign.episodic import EpisodicTrainer
from protoalign.errors import ProtoAlignError
from protoalign.evaluation import (
    PREDICTIONS,
    RESULTS,
    count_parameters,
    cross_institution_gap,
    evaluate,
    load_results,
    save_results,
    summarize,
)
from protoalign.logs import setup_logging
from protoalign.model import build_model, parameter_counts
from protoalign.phantom import DatasetManifest, generate_dataset
from protoalign.report import report
from protoalign.supervised import SupervisedTrainer

RUN = "run.json"


def is_valid_file(parser: argparse.ArgumentParser, arg: str) -> Path:
    path = Path(arg)
    if not path.exists():
        parser.error("The file %s does not exist!" % arg)
    return path


def sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_run(
    out: Path, namespace: argparse.Namespace, settings: Settings, inputs: dict[str, Path | None], **extra: Any
) -> Path:
    """run.json with hashes of the input files"""
    out.mkdir(parents=True, exist_ok=True)
    hashed = {}
    for name, path in inputs.items():
        if path is None:
            continue
        target = path / "manifest.json" if path.is_dir() else path
        hashed[name] = {"path": str(target), "sha256": sha256(target)}
    payload = {
        "verb": namespace.command,
        "argv": sys.argv[1:],
        "seed": namespace.seed,
        "config": {name: to_dict(getattr(settings, name)) for name in SECTIONS},
        "inputs": hashed,
        **extra,
    }
    path = out / RUN
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


########################
# Verbs


def generate_data(namespace: argparse.Namespace, settings: Settings) -> int:
    generate_dataset(settings.generation, namespace.out, workers=namespace.workers)
    write_run(namespace.out, namespace, settings, {"config": namespace.config})
    return 0


def split_data(namespace: argparse.Namespace, settings: Settings) -> int:
    manifest = DatasetManifest.load(namespace.data)
    folds = [namespace.fold] if namespace.fold else sorted(folds_for(manifest.classes))
    institutions = [namespace.novel_institution] if namespace.novel_institution else list(manifest.institutions)
    namespace.out.mkdir(parents=True, exist_ok=True)
    for fold in folds:
        for institution in institutions:
            split = make_splits(manifest, institution, fold, seed=namespace.seed)
            path = split.save(namespace.out / f"split_fold{fold}_{institution}.json")
            logger.info(f"Split -> {path}")
    write_run(namespace.out, namespace, settings, {"data": namespace.data, "config": namespace.config})
    return 0


def train(namespace: argparse.Namespace, settings: Settings) -> int:
    manifest = DatasetManifest.load(namespace.data)
    split = SplitSpec.load(namespace.split)
    store = SubjectStore.from_manifest(manifest)
    variant = namespace.variant or settings.train.variant
    trainer_cls = SupervisedTrainer if variant == "supervised" else EpisodicTrainer
    kwargs = {} if variant == "supervised" else {"variant": variant}
    setup_logging(namespace.debug, namespace.out / "run.log")
    trainer = trainer_cls(settings, split, store, out_dir=namespace.out, trace_mode=namespace.debug, **kwargs)
    if namespace.resume:
        trainer.resume()
    trainer.run()
    extra = trainer.checkpoint_extra()
    write_run(
        namespace.out,
        namespace,
        settings,
        {"data": namespace.data, "split": namespace.split, "config": namespace.config},
        variant=variant,
        **extra,
    )
    return 0


def evaluate_checkpoint(namespace: argparse.Namespace, settings: Settings) -> int:
    manifest = DatasetManifest.load(namespace.data)
    split = SplitSpec.load(namespace.split)
    checkpoint = load_checkpoint(namespace.checkpoint)
    stored = checkpoint.model_config
    # head flags and classes are the checkpoint's, the layout must be the run config's
    checkpoint.require_config(settings.model.for_variant(stored.variant, stored.head_classes))
    results = evaluate(
        restore_model(checkpoint),
        split,
        SubjectStore.from_manifest(manifest),
        settings.evaluation,
        predictions_dir=namespace.out / PREDICTIONS,
        seed=checkpoint.seed,
    )
    save_results(results, namespace.out / RESULTS)
    mean = sum(r.dice for r in results) / len(results)
    logger.info(f"{len(results)} episodes, mean Dice {100 * mean:.2f}%")
    write_run(
        namespace.out,
        namespace,
        settings,
        {
            "data": namespace.data,
            "split": namespace.split,
            "checkpoint": namespace.checkpoint,
            "config": namespace.config,
        },
    )
    return 0


def summarize_results(namespace: argparse.Namespace, settings: Settings) -> int:
    results = load_results(*namespace.results)
    summaries, table = summarize(results)
    for s in summaries:
        print(f"{s.variant:<14} {s.scenario:<6} {100 * s.mean:6.2f} ± {100 * s.std:5.2f}  (n={s.count})")
    for variant, gap in cross_institution_gap(summaries).items():
        print(f"{variant:<14} novel - base {100 * gap:+6.2f}")
    if namespace.out is not None:
        namespace.out.mkdir(parents=True, exist_ok=True)
        table.to_csv(namespace.out / "summary.csv", index=False)
        write_run(namespace.out, namespace, settings, {f"results{i}": p for i, p in enumerate(namespace.results)})
    return 0


def make_report(namespace: argparse.Namespace, settings: Settings) -> int:
    out = namespace.out or namespace.results
    report(namespace.results, out, settings.evaluation.permutations, settings.evaluation.seed)
    write_run(out, namespace, settings, {"config": namespace.config})
    return 0


def count_params(namespace: argparse.Namespace, settings: Settings) -> int:
    if namespace.checkpoint is not None:
        counts = count_parameters(load_checkpoint(namespace.checkpoint))
    else:
        # six base classes, as in any fold of the default class set
        classes = DEFAULT_CLASSES[:6] if namespace.variant != "supervised" else DEFAULT_CLASSES
        counts = parameter_counts(build_model(settings.model.for_variant(namespace.variant, classes)))
    for name, value in counts.items():
        print(f"{name:<11} {value:>10,}")
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace, Settings], int]] = {
    "generate-data": generate_data,
    "make-splits": split_data,
    "train": train,
    "evaluate": evaluate_checkpoint,
    "summarize": summarize_results,
    "report": make_report,
    "count-params": count_params,
}


def create_parser() -> argparse.ArgumentParser:
    """Create argument parser"""
    parser = argparse.ArgumentParser(
        prog="protoalign.py",
        description="""Few-shot 3D segmentation with prototype alignment""",
    )
    existing = lambda x: is_valid_file(parser, x)  # noqa: E731
    parser.add_argument("-c", "--config", type=existing, help="YAML config file.", metavar="FILE")
    parser.add_argument("-s", "--seed", type=int, help="Override every seed in the config.")
    parser.add_argument("-d", "--debug", action=argparse.BooleanOptionalAction, default=False)
    verbs = parser.add_subparsers(dest="command", required=True)

    p = verbs.add_parser("generate-data", help="Generate the phantom dataset.")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--workers", type=int, default=0)

    p = verbs.add_parser("make-splits", help="Write class/institution splits.")
    p.add_argument("--data", type=existing, required=True)
    p.add_argument("--fold", type=int, help="Only this fold. By default: every fold.")
    p.add_argument("--novel-institution", help="Only this held-out institution. By default: every one.")
    p.add_argument("--out", type=Path, required=True)

    p = verbs.add_parser("train", help="Train one variant.")
    p.add_argument("--data", type=existing, required=True)
    p.add_argument("--split", type=existing, required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", action="store_true", help="Continue from OUT/checkpoint.bin.")

    p = verbs.add_parser("evaluate", help="Score a checkpoint on the evaluation episodes.")
    p.add_argument("--data", type=existing, required=True)
    p.add_argument("--split", type=existing, required=True)
    p.add_argument("--checkpoint", type=existing, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = verbs.add_parser("summarize", help="Scenario summaries of result files.")
    p.add_argument("--results", type=existing, nargs="+", required=True)
    p.add_argument("--out", type=Path)

    p = verbs.add_parser("report", help="Markdown report of a results directory.")
    p.add_argument("--results", type=existing, required=True)
    p.add_argument("--out", type=Path)

    p = verbs.add_parser("count-params", help="Trainable parameters per component.")
    p.add_argument("--checkpoint", type=existing)
    p.add_argument("--variant", choices=VARIANTS, default="3d_seg_align")
    return parser


def run(namespace: argparse.Namespace) -> int:
    setup_logging(namespace.debug)
    try:
        settings = load_settings(namespace.config)
        if namespace.seed is not None:
            settings = settings.with_seed(namespace.seed)
        else:
            namespace.seed = settings.train.seed
        return COMMANDS[namespace.command](namespace, settings)
    except ProtoAlignError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1


def main(argv: list[str] | None = None) -> int:
    namespace = create_parser().parse_args(sys.argv[1:] if argv is None else argv)
    return run(namespace)
