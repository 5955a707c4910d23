#!/usr/bin/env python3
"""
Ablation over the few-shot variants and the supervised upper bound.

generate phantoms -> split -> train every variant for every seed -> evaluate -> summarize
-> paired significance -> cross-institution gap -> verdict table
"""
import argparse
import dataclasses
import sys
from pathlib import Path

from loguru import logger

from protoalign.config import VARIANTS, load_settings
from protoalign.episodes import SubjectStore, make_splits
from protoalign.episodic import EpisodicTrainer
from protoalign.evaluation import (
    PREDICTIONS,
    RESULTS,
    EpisodeResult,
    cross_institution_gap,
    evaluate,
    load_results,
    paired_significance,
    save_results,
    summarize,
)
from protoalign.logs import setup_logging
from protoalign.model import build_model
from protoalign.phantom import DatasetManifest, generate_dataset
from protoalign.report import report
from protoalign.supervised import SupervisedTrainer

# relative shrink of the novel-minus-base gap expected from alignment
GAP_REDUCTION = 0.25
# untrained models should stay below this mean Dice
RANDOM_CEILING = 0.2
ALPHA = 0.05


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ablation.py", description="""Variant ablation on phantoms""")
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("-c", "--config", type=Path)
    parser.add_argument("--steps", type=int, help="Training steps. By default: from the config.")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--fold", type=int, default=1)
    parser.add_argument("--novel-institution", default="inst0")
    parser.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    parser.add_argument("-d", "--debug", action=argparse.BooleanOptionalAction, default=False)
    return parser


def mean_dice(results: list[EpisodeResult]) -> float:
    return sum(r.dice for r in results) / len(results) if results else float("nan")


def run_ablation(namespace: argparse.Namespace) -> int:
    base = load_settings(namespace.config)
    if namespace.steps is not None:
        base = dataclasses.replace(base, train=dataclasses.replace(base.train, steps=namespace.steps))

    data = namespace.out / "data"
    if (data / "manifest.json").is_file():
        manifest = DatasetManifest.load(data)
    else:
        manifest = generate_dataset(base.generation, data)
    store = SubjectStore.from_manifest(manifest)

    by_variant: dict[str, list[EpisodeResult]] = {v: [] for v in namespace.variants}
    untrained: list[EpisodeResult] = []
    for seed in namespace.seeds:
        settings = base.with_seed(seed)
        split = make_splits(manifest, namespace.novel_institution, namespace.fold, seed=seed)
        split.save(namespace.out / f"split_seed{seed}.json")

        fresh = build_model(settings.model.for_variant("3d", split.base_classes), seed=seed)
        untrained += evaluate(fresh, split, store, settings.evaluation, seed=seed)

        for variant in namespace.variants:
            run_dir = namespace.out / "runs" / variant / f"seed{seed}"
            if (run_dir / RESULTS).is_file():
                logger.info(f"{run_dir} already evaluated")
                by_variant[variant] += load_results(run_dir / RESULTS)
                continue
            if variant == "supervised":
                trainer = SupervisedTrainer(settings, split, store, run_dir, namespace.debug)
            else:
                trainer = EpisodicTrainer(settings, split, store, run_dir, namespace.debug, variant=variant)
            trainer.run()
            results = evaluate(trainer.model, split, store, settings.evaluation, run_dir / PREDICTIONS, seed=seed)
            save_results(results, run_dir / RESULTS)
            by_variant[variant] += results

    everything = [r for rs in by_variant.values() for r in rs]
    summaries, _ = summarize(everything)
    novel_means = {v: mean_dice(rs) for v, rs in by_variant.items()}
    gaps = cross_institution_gap(summaries)
    permutations, seed = base.evaluation.permutations, base.evaluation.seed

    verdicts = [("untrained mean Dice < 0.2", mean_dice(untrained) < RANDOM_CEILING, f"{mean_dice(untrained):.4f}")]
    few_shot = [v for v in ("3d", "3d_seg", "3d_seg_align") if v in by_variant]
    if few_shot == ["3d", "3d_seg", "3d_seg_align"]:
        ordered = novel_means["3d_seg_align"] > novel_means["3d_seg"] > novel_means["3d"]
        verdicts.append(("3d_seg_align > 3d_seg > 3d", ordered, " / ".join(f"{novel_means[v]:.4f}" for v in few_shot)))
        p = paired_significance(by_variant["3d"], by_variant["3d_seg_align"], permutations, seed)
        verdicts.append(("3d_seg_align vs 3d p < 0.05", p < ALPHA, f"p = {p:.4f}"))
    if "3d" in gaps and "3d_seg_align" in gaps:
        shrink = gaps["3d"] > 0 and gaps["3d_seg_align"] <= (1 - GAP_REDUCTION) * gaps["3d"]
        verdicts.append(
            ("gap(3d) > 0, shrinks >= 25% with alignment", shrink, f"{gaps['3d']:+.4f} -> {gaps['3d_seg_align']:+.4f}")
        )
    if "supervised" in by_variant and few_shot:
        upper = all(novel_means["supervised"] >= novel_means[v] for v in few_shot)
        verdicts.append(("supervised >= few-shot variants", upper, f"{novel_means['supervised']:.4f}"))

    print(f"{'check':<46} {'ok':<5} value")
    for name, ok, value in verdicts:
        print(f"{name:<46} {'yes' if ok else 'NO':<5} {value}")
    report(namespace.out / "runs", namespace.out / "report", permutations, seed)
    return 0 if all(ok for _, ok, _ in verdicts) else 2


parser = create_parser()
namespace = parser.parse_args(sys.argv[1:])
setup_logging(namespace.debug, namespace.out / "ablation.log")

sys.exit(run_ablation(namespace))
