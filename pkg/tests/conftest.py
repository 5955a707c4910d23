from pathlib import Path

import numpy as np
import pytest

from protoalign.config import EvalConfig, GenerationConfig, ModelConfig, Settings, TrainConfig
from protoalign.episodes import SplitSpec, SubjectStore, make_splits
from protoalign.geometry import Volume
from protoalign.phantom import LABEL_DTYPE, DatasetManifest, LabeledSubject, generate_dataset, generate_subjects

SMALL_SHAPE = (40, 40, 8)


def make_subject(
    subject_id: str,
    institution: str = "inst0",
    labels: np.ndarray | None = None,
    classes: tuple[str, ...] = ("a", "b"),
    image: np.ndarray | None = None,
) -> LabeledSubject:
    """Hand-built subject, 1x1x1 background unless labels are given"""
    labels = np.zeros((1, 1, 1), dtype=LABEL_DTYPE) if labels is None else labels.astype(LABEL_DTYPE)
    image = np.zeros(labels.shape, dtype=np.float32) if image is None else image.astype(np.float32)
    return LabeledSubject(subject_id, Volume(image), labels, classes, institution)


@pytest.fixture(scope="session")
def generation() -> GenerationConfig:
    return GenerationConfig(institutions=3, subjects_per_institution=4, shape=SMALL_SHAPE, seed=7)


@pytest.fixture(scope="session")
def subjects(generation: GenerationConfig) -> list[LabeledSubject]:
    return list(generate_subjects(generation))


@pytest.fixture(scope="session")
def dataset(tmp_path_factory: pytest.TempPathFactory, generation: GenerationConfig) -> DatasetManifest:
    return generate_dataset(generation, tmp_path_factory.mktemp("phantoms"))


@pytest.fixture(scope="session")
def store(dataset: DatasetManifest) -> SubjectStore:
    return SubjectStore.from_manifest(dataset)


@pytest.fixture(scope="session")
def split(dataset: DatasetManifest) -> SplitSpec:
    return make_splits(dataset, "inst2", fold=1, seed=0)


@pytest.fixture
def model_config() -> ModelConfig:
    return ModelConfig(feature_channels=4, widths=(4, 8), align_width=2, align_pool=(2, 2, 1))


@pytest.fixture
def settings(generation: GenerationConfig, model_config: ModelConfig) -> Settings:
    return Settings(
        generation=generation,
        model=model_config,
        train=TrainConfig(steps=4, checkpoint_every=2, log_every=2, seed=3),
        evaluation=EvalConfig(permutations=200, store_predictions=1),
    )


@pytest.fixture
def out_dir(tmp_path: Path) -> Path:
    return tmp_path / "run"
