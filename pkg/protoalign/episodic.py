"""
Episodic few-shot trainer for the 3d, 3d_seg and 3d_seg_align variants.
"""
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from loguru import logger
from torch.utils.data import Dataset

from protoalign.config import FEW_SHOT_VARIANTS, Settings
from protoalign.episodes import Episode, SplitSpec, TrainingEpisodes
from protoalign.errors import InvalidConfig, NoValidPrototype, UnknownInstitution
from protoalign.losses import LossReport, episode_losses
from protoalign.model import Atlas, build_atlas, build_model, forward_episode
from protoalign.phantom import LabeledSubject
from protoalign.trainer import Trainer


def choose_atlas_institution(split: SplitSpec, seed: int, requested: str | None = None) -> str:
    """The configured institution, else one base institution drawn with the run seed"""
    if requested is not None:
        if requested not in split.base_institutions:
            raise UnknownInstitution(f"atlas institution {requested!r} is not a base institution")
        return requested
    rng = np.random.default_rng([seed, 0xA71A5])
    return split.base_institutions[int(rng.integers(len(split.base_institutions)))]


class EpisodicTrainer(Trainer):
    def __init__(
        self,
        settings: Settings,
        split: SplitSpec,
        store: Mapping[str, LabeledSubject],
        out_dir: str | Path | None = None,
        trace_mode: bool = False,
        variant: str | None = None,
    ) -> None:
        config = settings.train
        variant = variant or config.variant
        if variant not in FEW_SHOT_VARIANTS:
            raise InvalidConfig(f"episodic training runs {FEW_SHOT_VARIANTS}, not {variant!r}")
        model = build_model(settings.model.for_variant(variant, split.base_classes), seed=config.seed)
        super().__init__(model, config, out_dir, trace_mode)
        self.settings = settings
        self.split = split
        self.store = store

        self.atlas: Atlas | None = None
        if variant == "3d_seg_align":
            institution = choose_atlas_institution(split, config.seed, config.atlas_institution)
            subjects = [store[s] for s in split.train[institution]]
            self.atlas = build_atlas(subjects, split.base_classes, institution)
            logger.info(f"Atlas from {len(subjects)} training subjects of {institution}")

    def items(self) -> Dataset:
        return TrainingEpisodes(
            split=self.split,
            store=self.store,
            seed=self.config.seed,
            augment=self.settings.augment,
            shots=self.config.shots,
            steps=self.config.steps,
        )

    def losses(self, episode: Episode) -> LossReport | None:
        try:
            output = forward_episode(self.model, episode)
        except NoValidPrototype as e:
            logger.warning(f"step {self.step + 1}: skipping episode ({e})")
            return None
        return episode_losses(output, self.atlas, self.config.lambda_seg, self.config.lambda_align)

    def describe(self, episode: Episode) -> dict[str, str]:
        subjects = (episode.query, *episode.supports)
        return {
            "class": episode.cls,
            "ids": " ".join(s.id for s in subjects),
            "institutions": " ".join(s.institution for s in subjects),
        }

    def checkpoint_extra(self) -> dict[str, Any]:
        extra: dict[str, Any] = {"fold": self.split.fold, "novel_institutions": list(self.split.novel_institutions)}
        if self.atlas is not None:
            extra["atlas_institution"] = self.atlas.institution
        return extra
