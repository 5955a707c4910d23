"""
Institution-stratified evaluation.

Every novel-institution query is segmented once per institution, with supports drawn from
that institution. Rows are tagged with the scenarios they count towards: always "all",
plus "base" or "novel" depending on where the support came from.
"""
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
import torch
from loguru import logger

from protoalign.checkpoint import Checkpoint, restore_model
from protoalign.config import EvalConfig
from protoalign.episodes import SplitSpec, enumerate_eval_episodes
from protoalign.errors import EmptyResults, KeyMismatch, NoValidPrototype
from protoalign.geometry import MaskVolume, check_same_shape
from protoalign.model import ProtoSegmenter, forward_episode, parameter_counts
from protoalign.phantom import LabeledSubject

RESULTS = "results.csv"
PREDICTIONS = "predictions"
# tolerance when comparing permuted statistics with the observed one
TIE_EPS = 1e-12


@dataclass(frozen=True)
class EpisodeResult:
    fold: int
    cls: str
    query_id: str
    query_institution: str
    support_id: str
    support_institution: str
    # "base" or "novel": where the support comes from
    scope: str
    dice: float
    variant: str
    seed: int = 0

    def __post_init__(self) -> None:
        assert 0.0 <= self.dice <= 1.0, f"dice {self.dice} outside [0, 1]"

    @property
    def key(self) -> tuple[int, int, str, str, str]:
        return (self.seed, self.fold, self.cls, self.query_id, self.support_institution)

    @property
    def scenarios(self) -> tuple[str, str]:
        return ("all", self.scope)


@dataclass(frozen=True)
class ScenarioSummary:
    variant: str
    scenario: str
    mean: float
    std: float
    count: int
    per_class: dict[str, float] = field(default_factory=dict)


def _array(mask: MaskVolume | np.ndarray) -> np.ndarray:
    return mask.data if isinstance(mask, MaskVolume) else mask


def dice_score(pred: MaskVolume | np.ndarray, target: MaskVolume | np.ndarray) -> float:
    """2|P & T| / (|P| + |T|) of hard masks, 1.0 when both are empty"""
    p, t = _array(pred).astype(bool), _array(target).astype(bool)
    check_same_shape(p, t)
    denominator = int(p.sum()) + int(t.sum())
    if denominator == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denominator


def evaluate(
    model: ProtoSegmenter | Checkpoint,
    split: SplitSpec,
    store: Mapping[str, LabeledSubject],
    config: EvalConfig = EvalConfig(),
    predictions_dir: str | Path | None = None,
    seed: int = 0,
) -> list[EpisodeResult]:
    """
    Score every evaluation episode with frozen parameters.

    Soft predictions are thresholded with `> config.threshold`. Episodes without a usable
    support window score 0. The first `config.store_predictions` episodes of each
    (fold, class) are written to `predictions_dir` as .npz for the report.
    """
    if isinstance(model, Checkpoint):
        model = restore_model(model)
    model.eval()
    episodes = enumerate_eval_episodes(split, store, seed=config.seed, shots=config.shots)
    out_dir = Path(predictions_dir) if predictions_dir is not None else None
    stored: dict[tuple[int, str], int] = {}
    results = []

    logger.info(f"Evaluating {model.variant} on {len(episodes)} episodes of fold {split.fold}")
    with torch.no_grad():
        for episode in episodes:
            target = episode.query_mask()
            try:
                soft = forward_episode(model, episode).prediction
                pred = (soft > config.threshold).cpu().numpy().astype(np.float32)
            except NoValidPrototype as e:
                logger.warning(f"{episode.key}: scored 0 ({e})")
                pred = np.zeros_like(target)
            dice = dice_score(pred, target)
            results.append(
                EpisodeResult(
                    fold=episode.fold,
                    cls=episode.cls,
                    query_id=episode.query.id,
                    query_institution=episode.query.institution,
                    support_id="+".join(s.id for s in episode.supports),
                    support_institution=episode.support_institution,
                    scope=episode.scenarios[-1],
                    dice=dice,
                    variant=model.variant,
                    seed=seed,
                )
            )
            group = (episode.fold, episode.cls)
            if out_dir is not None and stored.get(group, 0) < config.store_predictions:
                k = stored[group] = stored.get(group, 0) + 1
                _store_prediction(out_dir, results[-1], k, episode.query.image.data, target, pred)
    return results


def _store_prediction(
    out_dir: Path, result: EpisodeResult, k: int, image: np.ndarray, target: np.ndarray, pred: np.ndarray
) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"fold{result.fold}_{result.cls}_{k:02d}.npz"
    np.savez_compressed(
        path,
        image=image,
        target=target.astype(np.uint8),
        prediction=pred.astype(np.uint8),
        query_id=result.query_id,
        support_institution=result.support_institution,
        variant=result.variant,
        dice=result.dice,
    )
    return path


def results_frame(results: Iterable[EpisodeResult]) -> pd.DataFrame:
    columns = [f.name for f in fields(EpisodeResult)]
    return pd.DataFrame([asdict(r) for r in results], columns=columns)


def save_results(results: Sequence[EpisodeResult], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    results_frame(results).to_csv(path, index=False, float_format="%.17g")
    return path


def load_results(*paths: str | Path) -> list[EpisodeResult]:
    frames = [pd.read_csv(p, dtype={"query_id": str, "support_id": str}, float_precision="round_trip") for p in paths]
    rows = pd.concat(frames, ignore_index=True).to_dict("records") if frames else []
    return [
        EpisodeResult(**{**r, "fold": int(r["fold"]), "seed": int(r["seed"]), "dice": float(r["dice"])})
        for r in rows
    ]


def scenario_frame(results: Sequence[EpisodeResult]) -> pd.DataFrame:
    """One row per (result, scenario tag)"""
    if not results:
        raise EmptyResults("no evaluation results")
    frame = results_frame(results)
    tagged = [frame.assign(scenario="all"), frame.assign(scenario=frame["scope"])]
    return pd.concat(tagged, ignore_index=True)


def summarize(results: Sequence[EpisodeResult]) -> tuple[list[ScenarioSummary], pd.DataFrame]:
    """
    Scenario summaries per variant and the per-(variant, scenario, fold, class) table
    (mean, population std, count).
    """
    frame = scenario_frame(results)
    table = (
        frame.groupby(["variant", "scenario", "fold", "cls"])["dice"]
        .agg(mean="mean", std=lambda d: float(np.std(d.to_numpy(), ddof=0)), count="count")
        .reset_index()
    )

    summaries = []
    for (variant, scenario), group in frame.groupby(["variant", "scenario"], sort=True):
        dice = group["dice"].to_numpy()
        summaries.append(
            ScenarioSummary(
                variant=str(variant),
                scenario=str(scenario),
                mean=float(dice.mean()),
                std=float(dice.std(ddof=0)),
                count=int(dice.size),
                per_class={str(c): float(v) for c, v in group.groupby("cls")["dice"].mean().items()},
            )
        )
    return summaries, table


def cross_institution_gap(summaries: Sequence[ScenarioSummary]) -> dict[str, float]:
    """mean Dice with novel-institution supports minus mean Dice with base-institution supports"""
    means = {(s.variant, s.scenario): s.mean for s in summaries}
    variants = sorted({s.variant for s in summaries})
    return {
        v: means[(v, "novel")] - means[(v, "base")] for v in variants if (v, "novel") in means and (v, "base") in means
    }


def paired_significance(
    a: Sequence[EpisodeResult], b: Sequence[EpisodeResult], permutations: int = 10_000, seed: int = 0
) -> float:
    """
    Two-sided paired sign-flip permutation test on per-episode Dice differences.

    Statistic |mean(b - a)|; p = (1 + #{null >= observed}) / (1 + permutations).
    """
    left, right = {r.key: r.dice for r in a}, {r.key: r.dice for r in b}
    if len(left) != len(a) or len(right) != len(b):
        raise KeyMismatch("duplicate episode keys")
    if left.keys() != right.keys():
        missing = sorted(left.keys() ^ right.keys())[:3]
        raise KeyMismatch(f"result sets cover different episodes, e.g. {missing}")
    if not left:
        raise EmptyResults("no paired episodes")

    keys = sorted(left)
    diff = np.array([right[k] - left[k] for k in keys])
    observed = abs(diff.mean())
    rng = np.random.default_rng(seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(permutations, diff.size))
    null = np.abs((signs * diff).mean(axis=1))
    return float((1 + np.count_nonzero(null >= observed - TIE_EPS)) / (1 + permutations))


def count_parameters(model: ProtoSegmenter | Checkpoint) -> dict[str, int]:
    if isinstance(model, Checkpoint):
        model = restore_model(model)
    return parameter_counts(model)
