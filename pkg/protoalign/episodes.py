"""
Class / institution splits and few-shot episodes.

Base dataset: training subjects of the base institutions, labelled with base classes only.
Novel dataset: test subjects of the base institutions plus every subject of the novel
institution, labelled with novel classes only.
"""
import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterator, Mapping, NamedTuple

import numpy as np
from loguru import logger
from torch.utils.data import Dataset

from protoalign.config import AugmentConfig
from protoalign.errors import BadFold, InsufficientSubjects, UnknownInstitution
from protoalign.geometry import MASK_THRESHOLD, AffineTransform, MaskVolume, Volume, warp_labels, warp_volume
from protoalign.phantom import DatasetManifest, LabeledSubject

# fmt: off
FOLDS: dict[int, tuple[str, str]] = {
    1: ("bladder", "transition_zone"),
    2: ("bone", "rectum"),
    3: ("obturator_internus", "seminal_vesicle"),
    4: ("peripheral_zone", "neurovascular_bundle"),
}
# fmt: on
SCENARIOS = ("all", "base", "novel")


def folds_for(classes: tuple[str, ...]) -> dict[int, tuple[str, ...]]:
    """Standard folds when every fold class exists, else consecutive pairs of `classes`"""
    if all(c in classes for pair in FOLDS.values() for c in pair):
        return dict(FOLDS)
    return {k + 1: tuple(classes[2 * k : 2 * k + 2]) for k in range(len(classes) // 2)}


@dataclass(frozen=True)
class SplitSpec:
    fold: int
    classes: tuple[str, ...]
    base_classes: tuple[str, ...]
    novel_classes: tuple[str, ...]
    base_institutions: tuple[str, ...]
    novel_institutions: tuple[str, ...]
    # per base institution
    train: dict[str, tuple[str, ...]]
    test: dict[str, tuple[str, ...]]
    # per novel institution, every subject
    novel: dict[str, tuple[str, ...]]
    seed: int = 0

    def __post_init__(self) -> None:
        assert not set(self.base_classes) & set(self.novel_classes), "base/novel classes overlap"
        assert not set(self.base_institutions) & set(self.novel_institutions), "base/novel institutions overlap"
        for u in self.base_institutions:
            assert not set(self.train[u]) & set(self.test[u]), f"train/test overlap in {u}"

    @property
    def institutions(self) -> tuple[str, ...]:
        return tuple(sorted(self.base_institutions + self.novel_institutions))

    @property
    def train_ids(self) -> list[str]:
        """Base dataset subjects"""
        return [s for u in self.base_institutions for s in self.train[u]]

    @property
    def novel_query_ids(self) -> list[str]:
        return [s for u in self.novel_institutions for s in self.novel[u]]

    @property
    def novel_dataset_ids(self) -> list[str]:
        return [s for u in self.base_institutions for s in self.test[u]] + self.novel_query_ids

    def eligible_supports(self, institution: str) -> tuple[str, ...]:
        """Evaluation-time supports: test subjects of a base institution, or the novel institution's subjects"""
        if institution in self.base_institutions:
            return self.test[institution]
        return self.novel[institution]

    def scope(self, institution: str) -> str:
        return "base" if institution in self.base_institutions else "novel"

    def to_json(self) -> str:
        payload = asdict(self)
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        raw = json.loads(text)
        tuples = {k: tuple(v) for k, v in raw.items() if isinstance(v, list)}
        groups = {k: {u: tuple(ids) for u, ids in raw[k].items()} for k in ("train", "test", "novel")}
        return cls(**{**raw, **tuples, **groups})

    @classmethod
    def load(cls, path: str | Path) -> "SplitSpec":
        return cls.from_json(Path(path).read_text())


def make_splits(manifest: DatasetManifest, novel_institution: str, fold: int, seed: int = 0) -> SplitSpec:
    """Class split by fold, institution split by the held-out institution, 3:1 subject split"""
    if novel_institution not in manifest.institutions:
        raise UnknownInstitution(f"{novel_institution!r} not in {list(manifest.institutions)}")
    folds = folds_for(manifest.classes)
    if fold not in folds:
        raise BadFold(f"fold must be one of {sorted(folds)}, got {fold}")

    novel_classes = folds[fold]
    base_classes = tuple(c for c in manifest.classes if c not in novel_classes)
    base_institutions = tuple(u for u in manifest.institutions if u != novel_institution)

    train, test = {}, {}
    for i, u in enumerate(manifest.institutions):
        if u == novel_institution:
            continue
        ids = sorted(manifest.subject_ids(u))
        if len(ids) < 2:
            raise InsufficientSubjects(f"institution {u} has {len(ids)} subject(s), need 2")
        order = np.random.default_rng([seed, i]).permutation(len(ids))
        n_test = max(1, math.floor(len(ids) / 4 + 0.5))
        shuffled = [ids[j] for j in order]
        train[u] = tuple(sorted(shuffled[n_test:]))
        test[u] = tuple(sorted(shuffled[:n_test]))

    split = SplitSpec(
        fold=fold,
        classes=tuple(manifest.classes),
        base_classes=base_classes,
        novel_classes=tuple(novel_classes),
        base_institutions=base_institutions,
        novel_institutions=(novel_institution,),
        train=train,
        test=test,
        novel={novel_institution: tuple(sorted(manifest.subject_ids(novel_institution)))},
        seed=seed,
    )
    logger.debug(
        f"Fold {fold}: novel classes {split.novel_classes}, novel institution {novel_institution}, "
        f"{len(split.train_ids)} training / {len(split.novel_dataset_ids)} novel-dataset subjects"
    )
    return split


class SubjectStore(Mapping[str, LabeledSubject]):
    """Lazily loaded, cached subjects"""

    def __init__(self, ids: list[str], loader: Callable[[str], LabeledSubject]) -> None:
        self._ids = list(ids)
        self._load = lru_cache(maxsize=None)(loader)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "SubjectStore":
        return cls(manifest.subject_ids(), manifest.load_subject)

    @classmethod
    def from_subjects(cls, subjects: list[LabeledSubject]) -> "SubjectStore":
        by_id = {s.id: s for s in subjects}
        return cls(list(by_id), by_id.__getitem__)

    def __getitem__(self, subject_id: str) -> LabeledSubject:
        if subject_id not in self._ids:
            raise KeyError(subject_id)
        return self._load(subject_id)

    def __iter__(self) -> Iterator[str]:
        return iter(self._ids)

    def __len__(self) -> int:
        return len(self._ids)


@dataclass(frozen=True, eq=False)
class Episode:
    """One few-shot task: supports + query for a single class"""

    cls: str
    supports: tuple[LabeledSubject, ...]
    query: LabeledSubject
    # classes the shared segmentation head is trained on (training episodes only)
    base_classes: tuple[str, ...] = ()
    scenarios: tuple[str, ...] = ("all",)
    fold: int = 0

    def __post_init__(self) -> None:
        assert self.supports, "episode needs at least one support"
        assert all(s.id != self.query.id for s in self.supports), "support equals query"

    @property
    def support(self) -> LabeledSubject:
        return self.supports[0]

    @property
    def support_institution(self) -> str:
        return self.support.institution

    @property
    def key(self) -> tuple[int, str, str, str]:
        """Identifies an evaluation episode: (fold, class, query, support institution)"""
        return (self.fold, self.cls, self.query.id, self.support_institution)

    def support_masks(self) -> list[np.ndarray]:
        return [s.mask(self.cls) for s in self.supports]

    def query_mask(self) -> np.ndarray:
        return self.query.mask(self.cls)


def sample_training_episode(
    split: SplitSpec, rng: np.random.Generator, store: Mapping[str, LabeledSubject], shots: int = 1
) -> Episode:
    """Uniform base class; query and supports are distinct base training subjects"""
    ids = split.train_ids
    if len(ids) < shots + 1:
        raise InsufficientSubjects(f"{len(ids)} training subjects, need {shots + 1}")
    cls = split.base_classes[int(rng.integers(len(split.base_classes)))]
    picked = rng.choice(len(ids), size=shots + 1, replace=False)
    query, *supports = (store[ids[int(i)]] for i in picked)
    return Episode(
        cls=cls,
        supports=tuple(supports),
        query=query,
        base_classes=split.base_classes,
        fold=split.fold,
    )


def enumerate_eval_episodes(
    split: SplitSpec, store: Mapping[str, LabeledSubject], seed: int | None = None, shots: int = 1
) -> list[Episode]:
    """
    For every novel class and novel-institution query, one episode per institution with a
    support sampled from that institution (the query itself excluded).
    """
    seed = split.seed if seed is None else seed
    queries = split.novel_query_ids
    if not queries:
        raise InsufficientSubjects("novel institution has no subjects")

    episodes = []
    for ci, cls in enumerate(split.novel_classes):
        for qi, query_id in enumerate(queries):
            rng = np.random.default_rng([seed, ci, qi])
            for u in split.institutions:
                candidates = [s for s in split.eligible_supports(u) if s != query_id]
                if len(candidates) < shots:
                    raise InsufficientSubjects(f"institution {u} has no support for query {query_id}")
                picked = rng.choice(len(candidates), size=shots, replace=False)
                episodes.append(
                    Episode(
                        cls=cls,
                        supports=tuple(store[candidates[int(i)]] for i in picked),
                        query=store[query_id],
                        scenarios=("all", split.scope(u)),
                        fold=split.fold,
                    )
                )
    return episodes


########################
# Augmentation


class AugmentationParams(NamedTuple):
    rotation_deg: tuple[float, float, float]
    translation: tuple[float, float, float]
    scale: float

    def transform(self) -> AffineTransform:
        return AffineTransform.from_parameters(self.rotation_deg, self.translation, self.scale)


def sample_augmentation(rng: np.random.Generator, config: AugmentConfig) -> AugmentationParams:
    """Rotation per axis, translation as a fraction of the extent, isotropic scale"""
    r, t = config.rotation_deg, config.translation
    rotation = tuple(float(a) for a in rng.uniform(-r, r, 3))
    # normalized extent is 2
    translation = tuple(float(2.0 * v) for v in rng.uniform(-t, t, 3))
    scale = float(rng.uniform(*config.scale))
    return AugmentationParams(rotation, translation, scale)  # type: ignore[arg-type]


def augment(
    image: Volume, masks: Mapping[str, MaskVolume], rng: np.random.Generator, config: AugmentConfig
) -> tuple[Volume, dict[str, MaskVolume]]:
    """Same random affine on image and masks; masks are resampled trilinearly and re-thresholded"""
    t = sample_augmentation(rng, config).transform()
    return warp_volume(image, t), {k: warp_volume(m, t, threshold=MASK_THRESHOLD) for k, m in masks.items()}


def augment_subject(subject: LabeledSubject, rng: np.random.Generator, config: AugmentConfig) -> LabeledSubject:
    """Augmented copy of a subject; the label map is resampled through its one-hot channels"""
    t = sample_augmentation(rng, config).transform()
    return LabeledSubject(
        id=subject.id,
        image=warp_volume(subject.image, t),
        labels=warp_labels(subject.labels, t, len(subject.classes)),
        classes=subject.classes,
        institution=subject.institution,
    )


@dataclass
class TrainingEpisodes(Dataset):
    """
    Map-style dataset of augmented training episodes; item `step` depends only on
    (seed, step), so workers and resumed runs draw identical episodes.
    """

    split: SplitSpec
    store: Mapping[str, LabeledSubject]
    seed: int
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    shots: int = 1
    steps: int = 0

    def __len__(self) -> int:
        return self.steps

    def __getitem__(self, step: int) -> Episode:
        rng = np.random.default_rng([self.seed, step])
        episode = sample_training_episode(self.split, rng, self.store, self.shots)
        if self.augment is None:
            return episode
        return Episode(
            cls=episode.cls,
            supports=tuple(augment_subject(s, rng, self.augment) for s in episode.supports),
            query=augment_subject(episode.query, rng, self.augment),
            base_classes=episode.base_classes,
            fold=episode.fold,
        )
