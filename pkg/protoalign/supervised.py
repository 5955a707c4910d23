"""
Fully supervised upper bound: extractor + a head over every class, trained on the
base-institution training subjects with mean foreground Dice loss.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch.utils.data import Dataset

from protoalign.config import AugmentConfig, Settings
from protoalign.episodes import SplitSpec, augment_subject
from protoalign.losses import LossReport, multiclass_dice_loss
from protoalign.model import build_model, head_targets, supervised_probs
from protoalign.phantom import LabeledSubject
from protoalign.trainer import Trainer


@dataclass
class SupervisedSamples(Dataset):
    """Step k -> one augmented training subject drawn with rng(seed, k)"""

    ids: list[str]
    store: Mapping[str, LabeledSubject]
    seed: int
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    steps: int = 0

    def __len__(self) -> int:
        return self.steps

    def __getitem__(self, step: int) -> LabeledSubject:
        rng = np.random.default_rng([self.seed, step])
        subject = self.store[self.ids[int(rng.integers(len(self.ids)))]]
        return subject if self.augment is None else augment_subject(subject, rng, self.augment)


class SupervisedTrainer(Trainer):
    def __init__(
        self,
        settings: Settings,
        split: SplitSpec,
        store: Mapping[str, LabeledSubject],
        out_dir: str | Path | None = None,
        trace_mode: bool = False,
        ids: list[str] | None = None,
    ) -> None:
        config = settings.train
        model = build_model(settings.model.for_variant("supervised", split.classes), seed=config.seed)
        super().__init__(model, config, out_dir, trace_mode)
        self.settings = settings
        self.split = split
        self.store = store
        self.ids = list(ids) if ids is not None else split.train_ids

    def items(self) -> Dataset:
        return SupervisedSamples(self.ids, self.store, self.config.seed, self.settings.augment, self.config.steps)

    def losses(self, subject: LabeledSubject) -> LossReport:
        probs = supervised_probs(self.model, [subject])
        loss = multiclass_dice_loss(probs, head_targets([subject], self.model.config.head_classes, probs.dtype))
        return LossReport.compose(torch.zeros((), dtype=loss.dtype), seg=loss, lambda_seg=1.0)

    def describe(self, subject: LabeledSubject) -> dict[str, str]:
        return {"class": "*", "ids": subject.id, "institutions": subject.institution}
