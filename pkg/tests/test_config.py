from pathlib import Path

import pytest

from protoalign.config import (
    DEFAULT_CLASSES,
    AugmentConfig,
    EvalConfig,
    GenerationConfig,
    ModelConfig,
    Settings,
    TrainConfig,
    config_hash,
    load_settings,
    settings_from_dict,
)
from protoalign.errors import InvalidConfig

CONFIGS = Path(__file__).parent.parent / "configs"


def test_defaults_are_valid():
    settings = Settings()
    assert settings.generation.classes == DEFAULT_CLASSES
    assert settings.generation.shape == (64, 64, 16)
    assert settings.model.feature_channels == 32
    assert settings.model.widths == (16, 32, 64)
    assert settings.train.lambda_seg == settings.train.lambda_align == 1.0
    assert settings.evaluation.threshold == 0.5


@pytest.mark.parametrize(
    "kwargs",
    [
        {"institutions": 1},
        {"subjects_per_institution": 1},
        {"classes": DEFAULT_CLASSES[:3]},
        {"classes": ("bladder", "bladder", "bone", "rectum")},
        {"classes": ("bladder", "bone", "rectum", "liver")},
        {"shape": (32, 64, 16)},
        {"shape": (64, 64, 4)},
        {"spacing": (1.0, 0.0, 1.0)},
        {"institution_shift": -1.0},
    ],
)
def test_generation_rejects(kwargs):
    with pytest.raises(InvalidConfig):
        GenerationConfig(**kwargs)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"feature_channels": 0},
        {"widths": ()},
        {"use_align_head": True, "use_seg_head": True},
        {"use_align_head": True, "head_classes": ("a",)},
        {"window_ratios": (0.0, 0.5, 0.5)},
        {"window_ratios": (0.5, 1.5, 0.5)},
    ],
)
def test_model_rejects(kwargs):
    with pytest.raises(InvalidConfig):
        ModelConfig(**kwargs)


def test_other_sections_reject():
    with pytest.raises(InvalidConfig):
        AugmentConfig(scale=(1.1, 0.9))
    with pytest.raises(InvalidConfig):
        TrainConfig(steps=0)
    with pytest.raises(InvalidConfig):
        TrainConfig(lambda_align=-0.5)
    with pytest.raises(InvalidConfig):
        TrainConfig(variant="2d")
    with pytest.raises(InvalidConfig):
        EvalConfig(threshold=1.0)


@pytest.mark.parametrize(
    "variant, seg, align, supervised",
    [
        ("3d", False, False, False),
        ("3d_seg", True, False, False),
        ("3d_seg_align", True, True, False),
        ("supervised", True, False, True),
    ],
)
def test_for_variant(variant, seg, align, supervised):
    config = ModelConfig().for_variant(variant, ("bone", "rectum"))
    assert (config.use_seg_head, config.use_align_head, config.supervised) == (seg, align, supervised)
    assert config.variant == variant
    assert config.head_classes == (() if variant == "3d" else ("bone", "rectum"))


def test_for_variant_unknown():
    with pytest.raises(InvalidConfig):
        ModelConfig().for_variant("2d", ())


def test_with_seed_overrides_every_section():
    settings = Settings().with_seed(11)
    assert settings.generation.seed == settings.train.seed == settings.evaluation.seed == 11


def test_load_settings_partial(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("generation:\n  shape: [48, 48, 8]\nmodel:\n  widths: [4, 8]\ntrain:\n  steps: 5\n")
    settings = load_settings(path)
    assert settings.generation.shape == (48, 48, 8)
    assert settings.model.widths == (4, 8)
    assert settings.train.steps == 5
    assert settings.train.learning_rate == TrainConfig().learning_rate


def test_load_settings_none_and_empty(tmp_path):
    assert load_settings(None) == Settings()
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert load_settings(path) == Settings()


@pytest.mark.parametrize(
    "text",
    ["model:\n  depth: 3\n", "optimizer:\n  lr: 1\n", "- 1\n- 2\n", "model: [unclosed\n"],
)
def test_load_settings_rejects(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(InvalidConfig):
        load_settings(path)


@pytest.mark.parametrize("name", ["desk.yaml", "full.yaml"])
def test_shipped_configs_load(name):
    settings = load_settings(CONFIGS / name)
    assert settings.train.variant == "3d_seg_align"


def test_full_config_scale():
    settings = load_settings(CONFIGS / "full.yaml")
    assert settings.generation.shape == (256, 256, 48)
    assert settings.model.window_ratios == (0.125, 0.125, 0.25)


def test_config_hash():
    a = ModelConfig()
    assert config_hash(a) == config_hash(ModelConfig())
    assert config_hash(a) != config_hash(ModelConfig(feature_channels=16))
    assert config_hash(settings_from_dict({"model": {"widths": [16, 32, 64]}}).model) == config_hash(a)
