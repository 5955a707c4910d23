"""
Run configuration.

A config file is plain YAML with one mapping per section, for example::

    generation:
      institutions: 4
      subjects_per_institution: 8
      shape: [64, 64, 16]
    model:
      feature_channels: 32
      widths: [16, 32, 64]
    train:
      steps: 2000
      learning_rate: 0.001

Every key is optional; anything missing takes the dataclass default below.
"""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from protoalign.errors import InvalidConfig

# fmt: off
DEFAULT_CLASSES = (
    "bladder", "transition_zone",
    "bone", "rectum",
    "obturator_internus", "seminal_vesicle",
    "peripheral_zone", "neurovascular_bundle",
)
# fmt: on

VARIANTS = ("3d", "3d_seg", "3d_seg_align", "supervised")
FEW_SHOT_VARIANTS = VARIANTS[:3]

# smallest grid on which the thinnest structure keeps a radius of one voxel
MIN_SHAPE = (40, 40, 8)


@dataclass(frozen=True)
class GenerationConfig:
    """Phantom dataset generation"""

    institutions: int = 4
    subjects_per_institution: int = 8
    classes: tuple[str, ...] = DEFAULT_CLASSES
    shape: tuple[int, int, int] = (64, 64, 16)
    spacing: tuple[float, float, float] = (3.0, 3.0, 7.5)
    seed: int = 7
    # multiplies every institution-level affine offset
    institution_shift: float = 1.0
    institution_rotation_deg: float = 8.0
    institution_translation: float = 0.08
    institution_log_scale: float = 0.06
    # multiplies institution gamma / bias / noise spread
    intensity_shift: float = 1.0
    center_jitter: float = 0.03
    radius_jitter: float = 0.08
    deformation: float = 0.02
    noise: float = 0.03

    def __post_init__(self) -> None:
        if self.institutions < 2:
            raise InvalidConfig("need at least 2 institutions")
        if self.subjects_per_institution < 2:
            raise InvalidConfig("need at least 2 subjects per institution")
        if len(self.classes) < 4:
            raise InvalidConfig("need at least 4 classes")
        if len(set(self.classes)) != len(self.classes):
            raise InvalidConfig("duplicate class names")
        unknown = set(self.classes) - set(DEFAULT_CLASSES)
        if unknown:
            raise InvalidConfig(f"no phantom structure for classes {sorted(unknown)}")
        if len(self.shape) != 3 or any(s < m for s, m in zip(self.shape, MIN_SHAPE)):
            raise InvalidConfig(f"shape {self.shape} too small, minimum is {MIN_SHAPE}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise InvalidConfig("spacing components must be positive")
        if self.institution_shift < 0 or self.intensity_shift < 0:
            raise InvalidConfig("shift magnitudes must be non-negative")


@dataclass(frozen=True)
class ModelConfig:
    """Network layout. Flags select the 3d / 3d_seg / 3d_seg_align variants."""

    in_channels: int = 1
    feature_channels: int = 32
    widths: tuple[int, ...] = (16, 32, 64)
    norm: bool = True
    use_seg_head: bool = False
    use_align_head: bool = False
    supervised: bool = False
    # classes segmented by the shared head, background is channel 0
    head_classes: tuple[str, ...] = ()
    window_ratios: tuple[float, float, float] = (0.25, 0.25, 0.5)
    align_width: int = 8
    align_pool: tuple[int, int, int] = (4, 4, 2)

    def __post_init__(self) -> None:
        if self.feature_channels < 1:
            raise InvalidConfig("feature_channels must be >= 1")
        if not self.widths or any(w < 1 for w in self.widths):
            raise InvalidConfig("widths must be a non-empty list of positive ints")
        if self.use_align_head and not self.use_seg_head:
            raise InvalidConfig("use_align_head requires use_seg_head")
        if self.use_seg_head and not self.head_classes:
            raise InvalidConfig("segmentation head needs head_classes")
        if self.supervised and (not self.use_seg_head or self.use_align_head):
            raise InvalidConfig("supervised model is extractor + segmentation head only")
        if any(not 0 < r <= 1 for r in self.window_ratios):
            raise InvalidConfig("window ratios must lie in (0, 1]")

    @property
    def variant(self) -> str:
        if self.supervised:
            return "supervised"
        if self.use_align_head:
            return "3d_seg_align"
        if self.use_seg_head:
            return "3d_seg"
        return "3d"

    @property
    def depth(self) -> int:
        return len(self.widths)

    def for_variant(self, variant: str, head_classes: tuple[str, ...]) -> "ModelConfig":
        """Same layout with the head flags of `variant`"""
        if variant not in VARIANTS:
            raise InvalidConfig(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        return dataclasses.replace(
            self,
            use_seg_head=variant != "3d",
            use_align_head=variant == "3d_seg_align",
            supervised=variant == "supervised",
            head_classes=tuple(head_classes) if variant != "3d" else (),
        )


@dataclass(frozen=True)
class AugmentConfig:
    """Random rotation / translation / scaling applied in all training"""

    rotation_deg: float = 10.0
    # fraction of the image extent
    translation: float = 0.05
    scale: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self) -> None:
        if self.rotation_deg < 0 or self.translation < 0:
            raise InvalidConfig("augmentation ranges must be non-negative")
        if not 0 < self.scale[0] <= self.scale[1]:
            raise InvalidConfig("scale range must satisfy 0 < low <= high")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer loop"""

    steps: int = 2000
    learning_rate: float = 1e-3
    lambda_seg: float = 1.0
    lambda_align: float = 1.0
    seed: int = 0
    variant: str = "3d"
    checkpoint_every: int = 500
    log_every: int = 50
    shots: int = 1
    # episode preprocessing workers feeding the trainer, 0 = inline
    workers: int = 0
    atlas_institution: str | None = None

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise InvalidConfig("steps must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be positive")
        if self.lambda_seg < 0 or self.lambda_align < 0:
            raise InvalidConfig("loss weights must be non-negative")
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"unknown variant {self.variant!r}")
        if self.checkpoint_every < 1 or self.log_every < 1 or self.shots < 1:
            raise InvalidConfig("checkpoint_every, log_every and shots must be >= 1")
        if self.workers < 0:
            raise InvalidConfig("workers must be >= 0")


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation protocol"""

    threshold: float = 0.5
    shots: int = 1
    seed: int = 0
    store_predictions: int = 2
    permutations: int = 10_000

    def __post_init__(self) -> None:
        if not 0 < self.threshold < 1:
            raise InvalidConfig("threshold must lie in (0, 1)")
        if self.shots < 1 or self.permutations < 1 or self.store_predictions < 0:
            raise InvalidConfig("shots/permutations must be >= 1, store_predictions >= 0")


@dataclass(frozen=True)
class Settings:
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "Settings":
        """Override the seed of every section"""
        return dataclasses.replace(
            self,
            generation=dataclasses.replace(self.generation, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            evaluation=dataclasses.replace(self.evaluation, seed=seed),
        )


SECTIONS = {
    "generation": GenerationConfig,
    "model": ModelConfig,
    "augment": AugmentConfig,
    "train": TrainConfig,
    "evaluation": EvalConfig,
}


def _coerce(cls: type, values: dict[str, Any]) -> Any:
    """Build a config dataclass from a YAML mapping, turning lists into tuples"""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise InvalidConfig(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise InvalidConfig(str(e)) from e


def settings_from_dict(raw: dict[str, Any] | None) -> Settings:
    raw = raw or {}
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
    return Settings(**{name: _coerce(cls, raw.get(name) or {}) for name, cls in SECTIONS.items()})


def load_settings(path: str | Path | None) -> Settings:
    """Read a YAML config file, or defaults when no path is given"""
    if path is None:
        return Settings()
    with open(path, "r") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise InvalidConfig(f"{path}: {e}") from e
    if raw is not None and not isinstance(raw, dict):
        raise InvalidConfig(f"{path}: top level must be a mapping")
    return settings_from_dict(raw)


def to_dict(config: Any) -> dict[str, Any]:
    """JSON-friendly dict of a config dataclass"""
    return json.loads(json.dumps(dataclasses.asdict(config)))


def config_hash(config: ModelConfig) -> str:
    """Stable hash of a model config, written into checkpoints"""
    payload = json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()
