"""
Optimizer loop shared by the episodic and the supervised trainers.
"""
import abc
import math
import time
from pathlib import Path
from typing import Any

import pandas as pd
import torch
from loguru import logger
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from protoalign.checkpoint import load_checkpoint, save_checkpoint
from protoalign.config import TrainConfig
from protoalign.errors import ConfigMismatch, DivergenceError
from protoalign.losses import LossReport
from protoalign.model import ProtoSegmenter

CHECKPOINT = "checkpoint.bin"
METRICS = "metrics.csv"
# fmt: off
METRIC_COLUMNS = [
    "step", "few_shot", "seg", "align", "total", "few_shot_native",
    "wall_time", "skipped", "class", "ids", "institutions",
]
# fmt: on


def _identity(item: Any) -> Any:
    """collate_fn keeping dataset items as they are (module level so workers can pickle it)"""
    return item


class Trainer(abc.ABC):
    """
    Trains a ProtoSegmenter with Adam, one item per step.

    Subclasses provide the per-step items (a map-style dataset indexed by step, so an item
    depends only on the seed and the step) and the losses of an item.
    Checkpoints (`checkpoint.bin`) and the metrics log (`metrics.csv`) go to `out_dir`.
    """

    def __init__(
        self,
        model: ProtoSegmenter,
        config: TrainConfig,
        out_dir: str | Path | None = None,
        trace_mode: bool = False,
    ) -> None:
        self.model = model
        self.config = config
        self.optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        # completed steps
        self.step = 0
        self.rows: list[dict[str, Any]] = []
        self.working = False
        self.trace_mode = trace_mode
        self._elapsed = 0.0

    @abc.abstractmethod
    def items(self) -> Dataset:
        """Item for step k at index k"""

    @abc.abstractmethod
    def losses(self, item: Any) -> LossReport | None:
        """Forward pass; None skips the step"""

    @abc.abstractmethod
    def describe(self, item: Any) -> dict[str, str]:
        """class / ids / institutions columns of the metrics log"""

    def checkpoint_extra(self) -> dict[str, Any]:
        return {}

    @property
    def checkpoint_path(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / CHECKPOINT

    def run(self) -> pd.DataFrame:
        """Train until `config.steps` steps are done; returns the metrics log"""
        total_steps = self.config.steps
        loader = DataLoader(
            self.items(),
            batch_size=None,
            sampler=range(self.step, total_steps),
            num_workers=self.config.workers,
            collate_fn=_identity,
        )
        self.model.train()
        self.working = True
        started = time.perf_counter() - self._elapsed
        with tqdm(total=total_steps, initial=self.step, desc=self.model.variant, leave=False) as bar:
            for item in loader:
                if not self.working:
                    break
                report = self.train_step(item)
                self.step += 1
                self._elapsed = time.perf_counter() - started
                self._record(item, report)
                bar.update()
                if self.step % self.config.log_every == 0:
                    self._log_progress()
                if self.step % self.config.checkpoint_every == 0 and self.step < total_steps:
                    self.save()
        self.working = False
        self.model.eval()
        self.save()
        return self.metrics()

    def train_step(self, item: Any) -> LossReport | None:
        self.optimizer.zero_grad(set_to_none=True)
        report = self.losses(item)
        if report is None:
            return None
        if not torch.isfinite(report.total):
            raise DivergenceError(f"non-finite loss {float(report.total)} at step {self.step + 1}")
        report.total.backward()
        self.optimizer.step()
        return report

    def _record(self, item: Any, report: LossReport | None) -> None:
        values = report.values() if report is not None else dict.fromkeys(METRIC_COLUMNS[1:6], math.nan)
        row = {"step": self.step, **values, "wall_time": self._elapsed, "skipped": report is None}
        row.update(self.describe(item))
        self.rows.append(row)
        if self.trace_mode:
            self._debug_current_state(row)

    def _log_progress(self) -> None:
        recent = [r["total"] for r in self.rows[-self.config.log_every :] if not r["skipped"]]
        mean = sum(recent) / len(recent) if recent else math.nan
        logger.info(f"step {self.step}/{self.config.steps} | mean total loss {mean:.4f}")

    def metrics(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=METRIC_COLUMNS)

    def save(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        extra = {"wall_time": self._elapsed, **self.checkpoint_extra()}
        assert self.checkpoint_path is not None
        save_checkpoint(self.checkpoint_path, self.model, self.optimizer, self.step, self.config.seed, extra)
        self.metrics().to_csv(self.out_dir / METRICS, index=False)

    def resume(self, path: str | Path | None = None) -> None:
        """Restore weights, optimizer state, step and metrics from a checkpoint"""
        path = Path(path) if path is not None else self.checkpoint_path
        assert path is not None, "nothing to resume from"
        checkpoint = load_checkpoint(path, self.model.config)
        if checkpoint.seed != self.config.seed:
            raise ConfigMismatch(f"checkpoint seed {checkpoint.seed} != configured seed {self.config.seed}")
        self.model.load_state_dict(checkpoint.model_state())
        if checkpoint.optimizer_state is not None:
            self.optimizer.load_state_dict(checkpoint.optimizer_state)
        self.step = checkpoint.step
        self._elapsed = float(checkpoint.extra.get("wall_time", 0.0))
        metrics = path.parent / METRICS
        if metrics.is_file():
            frame = pd.read_csv(metrics, keep_default_na=True)
            self.rows = frame[frame["step"] <= self.step].to_dict("records")
        logger.info(f"Resumed from {path} at step {self.step}")

    def _debug_current_state(self, row: dict[str, Any]) -> None:
        """Dump the step just taken"""
        logger.trace(
            f"[{row['step']:>6}] {row['class']} | ids {row['ids']} | institutions {row['institutions']}"
        )
        logger.trace(
            f"         few_shot {row['few_shot']:.4f} | seg {row['seg']:.4f} | align {row['align']:.4f} "
            f"| total {row['total']:.4f} | native {row['few_shot_native']:.4f}"
        )
