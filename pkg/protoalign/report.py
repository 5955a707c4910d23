"""
Markdown report, scenario chart and overlays built from a results directory.

Everything is read from recorded artifacts: every ``results.csv`` below the directory and
every stored prediction (``*.npz``) below it.
"""
from itertools import combinations
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from loguru import logger  # noqa: E402

from protoalign.console import ConsoleOverlayRenderer  # noqa: E402
from protoalign.episodes import FOLDS, SCENARIOS  # noqa: E402
from protoalign.errors import EmptyResults, KeyMismatch  # noqa: E402
from protoalign.evaluation import (  # noqa: E402
    RESULTS,
    EpisodeResult,
    ScenarioSummary,
    cross_institution_gap,
    load_results,
    paired_significance,
    summarize,
)
from protoalign.overlay import OverlaySlice  # noqa: E402
from protoalign.py_game import PyGameOverlayRenderer  # noqa: E402

REPORT = "report.md"
CHART = "scenarios.png"
VARIANT_ORDER = ("3d", "3d_seg", "3d_seg_align", "supervised")


def _ordered(variants: Sequence[str]) -> list[str]:
    return sorted(set(variants), key=lambda v: (VARIANT_ORDER.index(v) if v in VARIANT_ORDER else 99, v))


def markdown_table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def _pct(value: float) -> str:
    return "-" if pd.isna(value) else f"{100 * value:.2f}"


def scenario_chart(summaries: Sequence[ScenarioSummary], path: Path) -> Path:
    """Grouped bars: mean Dice per scenario, one bar per variant"""
    variants = _ordered([s.variant for s in summaries])
    means = {(s.variant, s.scenario): s for s in summaries}
    width = 0.8 / max(1, len(variants))
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, variant in enumerate(variants):
        xs, ys, errs = [], [], []
        for j, scenario in enumerate(SCENARIOS):
            s = means.get((variant, scenario))
            if s is not None:
                xs.append(j + i * width)
                ys.append(100 * s.mean)
                errs.append(100 * s.std)
        ax.bar(xs, ys, width, yerr=errs, capsize=2, label=variant)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(SCENARIOS))], SCENARIOS)
    ax.set_xlabel("support institutions")
    ax.set_ylabel("Dice (%)")
    ax.legend()
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def fold_section(fold: int, table: pd.DataFrame) -> str:
    rows_of_fold = table[table["fold"] == fold]
    lines = [f"## Fold {fold}", ""]
    if rows_of_fold.empty:
        lines.append(f"_No results for fold {fold}._")
        return "\n".join(lines)
    rows = []
    for variant in _ordered(rows_of_fold["variant"].tolist()):
        for cls in sorted(rows_of_fold["cls"].unique()):
            cells = rows_of_fold[(rows_of_fold["variant"] == variant) & (rows_of_fold["cls"] == cls)]
            by_scenario = dict(zip(cells["scenario"], cells["mean"]))
            count = int(cells.loc[cells["scenario"] == "all", "count"].sum())
            rows.append([variant, cls, *(_pct(by_scenario.get(s, float("nan"))) for s in SCENARIOS), count])
    lines.append(markdown_table(["variant", "class", *(f"s_ins={s}" for s in SCENARIOS), "episodes"], rows))
    return "\n".join(lines)


def significance_section(results: Sequence[EpisodeResult], permutations: int, seed: int) -> str:
    by_variant: dict[str, list[EpisodeResult]] = {}
    for r in results:
        by_variant.setdefault(r.variant, []).append(r)
    rows = []
    for a, b in combinations(_ordered(list(by_variant)), 2):
        try:
            p = paired_significance(by_variant[a], by_variant[b], permutations, seed)
        except KeyMismatch:
            rows.append([a, b, "-", "episodes differ"])
            continue
        mean_a = sum(r.dice for r in by_variant[a]) / len(by_variant[a])
        mean_b = sum(r.dice for r in by_variant[b]) / len(by_variant[b])
        rows.append([a, b, _pct(mean_b - mean_a), f"{p:.4f}"])
    header = f"Paired sign-flip permutation test, {permutations} resamples, seed {seed}."
    return "\n".join(["## Significance", "", header, "", markdown_table(["a", "b", "b - a (%)", "p"], rows)])


def render_overlays(root: Path, out_dir: Path) -> list[tuple[Path, Path]]:
    """PNG + terminal text for every stored prediction below `root`"""
    png, text = PyGameOverlayRenderer(), ConsoleOverlayRenderer()
    written = []
    for npz in sorted(root.rglob("*.npz")):
        overlay = OverlaySlice.from_npz(npz)
        name = npz.parent.name + "_" + npz.stem
        written.append((png.render(overlay, out_dir / f"{name}.png"), npz))
        text.render(overlay, out_dir / f"{name}.txt")
    return written  # type: ignore[return-value]


def report(
    results_dir: str | Path, out_dir: str | Path | None = None, permutations: int = 10_000, seed: int = 0
) -> Path:
    root = Path(results_dir)
    out = Path(out_dir) if out_dir is not None else root
    paths = sorted(root.rglob(RESULTS))
    if not paths:
        raise EmptyResults(f"no {RESULTS} below {root}")
    results = load_results(*paths)
    summaries, table = summarize(results)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "summary.csv", index=False)

    lines = ["# Few-shot segmentation results", "", f"{len(results)} episodes from {len(paths)} result file(s).", ""]
    lines += ["## Scenarios", ""]
    lines.append(
        markdown_table(
            ["variant", "s_ins", "mean Dice (%)", "std (%)", "episodes"],
            [[s.variant, s.scenario, _pct(s.mean), _pct(s.std), s.count] for s in summaries],
        )
    )
    gaps = cross_institution_gap(summaries)
    if gaps:
        lines += ["", "Novel minus base institution supports: " + ", ".join(f"{v} {_pct(g)}" for v, g in gaps.items())]
    chart = scenario_chart(summaries, out / CHART)
    lines += ["", f"![scenarios]({chart.name})", ""]

    for fold in sorted(set(FOLDS) | set(table["fold"].astype(int))):
        lines += [fold_section(fold, table), ""]
    lines += [significance_section(results, permutations, seed), ""]

    overlays = render_overlays(root, out / "overlays")
    if overlays:
        lines += ["## Examples", ""]
        for png, npz in overlays:
            lines.append(f"![{npz.stem}](overlays/{png.name})")
        lines.append("")
    path = out / REPORT
    path.write_text("\n".join(lines))
    logger.info(f"Report -> {path}")
    return path
