from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import make_subject
from protoalign.config import DEFAULT_CLASSES, GenerationConfig, ModelConfig, load_settings
from protoalign.episodes import Episode, sample_training_episode
from protoalign.errors import HeadDisabled, ShapeError, ShapeMismatch
from protoalign.geometry import Volume, invert, warp_tensor
from protoalign.model import AffineHead, UNet3D, build_atlas, build_model, forward_episode, one_hot, parameter_counts
from protoalign.phantom import generate_subject

BASE = DEFAULT_CLASSES[2:]
FULL = Path(__file__).parent.parent / "configs" / "full.yaml"


@pytest.fixture
def episode(split, store) -> Episode:
    return sample_training_episode(split, np.random.default_rng(0), store)


def test_feature_shape_desk_scale():
    model = build_model(ModelConfig(), seed=0)
    image = Volume(np.random.default_rng(0).random((64, 64, 16)).astype(np.float32))
    with torch.no_grad():
        features = model.extract_features(image)
    assert features.data.shape == (32, 64, 64, 16)
    assert features.channels == 32


def test_features_are_deterministic(model_config):
    model = build_model(model_config, seed=0).eval()
    image = torch.rand(8, 6, 4)
    with torch.no_grad():
        assert torch.equal(model.extract_features(image).data, model.extract_features(image).data)
    again = build_model(model_config, seed=0).eval()
    with torch.no_grad():
        assert torch.equal(model.extract_features(image).data, again.extract_features(image).data)


def test_shape_must_divide():
    net = UNet3D(1, 4, widths=(4, 8, 16))
    assert net.divisor == 4
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 1, 30, 32, 8))
    net.check_shape((32, 32, 8))


def test_toy_parameter_count():
    # encoder 174 + 672, up-convolution 66, decoder 336, 1x1 head 9
    net = UNet3D(1, 3, widths=(2, 4), norm=True)
    assert sum(p.numel() for p in net.parameters()) == 1257


def test_full_scale_parameter_count():
    config = load_settings(FULL).model.for_variant("3d_seg_align", BASE)
    counts = parameter_counts(build_model(config))
    assert 4_300_000 <= counts["total"] <= 7_100_000
    assert counts["seg_head"] == 27_911
    assert counts["total"] == counts["extractor"] + counts["seg_head"] + counts["align_head"]


def test_align_head_adds_parameters(model_config):
    seg = parameter_counts(build_model(model_config.for_variant("3d_seg", BASE)))
    align = parameter_counts(build_model(model_config.for_variant("3d_seg_align", BASE)))
    plain = parameter_counts(build_model(model_config))
    assert plain["seg_head"] == plain["align_head"] == 0
    assert seg["align_head"] == 0
    assert align["total"] > seg["total"] > plain["total"]


def test_segmentation_head_is_a_distribution(model_config):
    model = build_model(model_config.for_variant("3d_seg", BASE), seed=0)
    with torch.no_grad():
        features = model.extract_features(torch.rand(8, 6, 4))
        probs = model.segment_base_classes(features)
    assert probs.shape == (len(BASE) + 1, 8, 6, 4)
    assert torch.allclose(probs.sum(0), torch.ones(8, 6, 4), atol=1e-5)


def test_disabled_heads(model_config):
    model = build_model(model_config)
    with pytest.raises(HeadDisabled):
        model.segment_base_classes(torch.zeros(4, 4, 4, 2))
    with pytest.raises(HeadDisabled):
        model.predict_affine(torch.zeros(7, 4, 4, 2))


def test_fresh_affine_head_is_identity(model_config):
    model = build_model(model_config.for_variant("3d_seg_align", BASE), seed=0)
    probs = torch.softmax(torch.randn(2, len(BASE) + 1, 8, 8, 4), dim=1)
    with torch.no_grad():
        transforms = model.predict_affine(probs)
        single = model.predict_affine(probs[0])
    assert len(transforms) == 2
    assert all(t.is_identity() for t in transforms)
    assert single.is_identity()


def test_affine_delta_is_bounded():
    head = AffineHead(classes=3, width=2, pool=(2, 2, 1))
    torch.nn.init.normal_(head.regressor[-1].weight, std=100.0)
    torch.nn.init.normal_(head.regressor[-1].bias, std=100.0)
    probs = torch.softmax(torch.randn(4, 4, 8, 8, 4), dim=1)
    with torch.no_grad():
        delta = head(probs)
    assert delta.shape == (4, 12)
    assert delta[:, :9].abs().max() <= AffineHead.LINEAR_BOUND
    assert delta[:, 9:].abs().max() <= AffineHead.TRANSLATION_BOUND
    for d in delta:
        assert abs(torch.linalg.det(torch.eye(3) + d[:9].reshape(3, 3))) >= 0.1


def test_one_hot():
    labels = np.array([0, 2, 1, 2]).reshape(2, 2, 1)
    encoded = one_hot(labels, 2)
    assert encoded.shape == (3, 2, 2, 1)
    assert np.array_equal(encoded.argmax(0), labels)
    assert np.array_equal(encoded.sum(0), np.ones((2, 2, 1)))


def test_atlas_of_one_subject(subjects):
    s = subjects[0]
    atlas = build_atlas([s], BASE, s.institution)
    assert np.array_equal(atlas.probabilities, one_hot(s.relabel(BASE), len(BASE)))
    assert atlas.shape == s.shape
    assert atlas.institution == s.institution


def test_atlas_mean_of_disjoint_masks():
    a = make_subject("a", labels=np.array([1, 0]).reshape(2, 1, 1))
    b = make_subject("b", labels=np.array([0, 1]).reshape(2, 1, 1))
    atlas = build_atlas([a, b], ("a",))
    assert np.allclose(atlas.probabilities[1], 0.5)
    assert np.allclose(atlas.probabilities.sum(0), 1.0, atol=1e-5)


def test_atlas_shape_mismatch():
    a = make_subject("a", labels=np.zeros((2, 1, 1)))
    b = make_subject("b", labels=np.zeros((1, 2, 1)))
    with pytest.raises(ShapeMismatch):
        build_atlas([a, b], ("a",))


def test_default_institution_atlas_has_every_class():
    config = GenerationConfig()
    subjects = [generate_subject(config, 0, k) for k in range(4)]
    atlas = build_atlas(subjects, BASE, "inst0")
    assert set(np.unique(atlas.probabilities.argmax(0))) == set(range(len(BASE) + 1))


def test_forward_shapes_per_variant(model_config, split, episode):
    for variant in ("3d", "3d_seg", "3d_seg_align"):
        model = build_model(model_config.for_variant(variant, split.base_classes), seed=0)
        output = forward_episode(model, episode)
        assert output.variant == variant
        assert output.prediction.shape == episode.query.shape
        assert bool(((output.prediction > 0) & (output.prediction < 1)).all())
        assert output.windows > 0
        if variant == "3d":
            assert output.base_probs is None
        else:
            assert output.base_probs.shape == (2, len(split.base_classes) + 1, *episode.query.shape)
            assert output.base_targets.shape == output.base_probs.shape
        if variant == "3d_seg_align":
            assert len(output.transforms) == 2
            assert output.aligned_prediction.shape == episode.query.shape
            assert output.aligned_query_target.shape == episode.query.shape
            assert output.aligned_base_probs.shape == output.base_probs.shape


def test_fresh_align_variant_equals_seg_variant(model_config, split, episode):
    model = build_model(model_config.for_variant("3d_seg_align", split.base_classes), seed=0)
    with torch.no_grad():
        aligned = forward_episode(model, episode)
        plain = forward_episode(model, episode, variant="3d_seg")
    assert torch.equal(aligned.prediction, plain.prediction)
    assert torch.equal(aligned.aligned_prediction, plain.prediction)
    assert torch.equal(aligned.aligned_base_probs, aligned.base_probs)


def test_shifted_align_prediction_stays_inside_unit_interval(model_config, split, episode):
    model = build_model(model_config.for_variant("3d_seg_align", split.base_classes), seed=0)
    with torch.no_grad():
        # constant translation, well inside the head's bound
        model.align_head.regressor[-1].bias[9:] = 0.2
        output = forward_episode(model, episode)
        zero_padded = warp_tensor(output.aligned_prediction, invert(output.transforms[0]))
    assert not output.transforms[0].is_identity()
    assert bool((zero_padded == 0).any())
    assert output.prediction.shape == episode.query.shape
    assert bool(((output.prediction > 0) & (output.prediction < 1)).all())


def test_variant_cannot_exceed_model(model_config, split, episode):
    model = build_model(model_config, seed=0)
    with pytest.raises(HeadDisabled):
        forward_episode(model, episode, variant="3d_seg")
    with pytest.raises(HeadDisabled):
        forward_episode(model, episode, variant="supervised")


def test_supervised_forward_picks_the_class_channel(model_config, split, episode):
    model = build_model(model_config.for_variant("supervised", split.classes), seed=0)
    with torch.no_grad():
        output = forward_episode(model, episode)
    channel = split.classes.index(episode.cls) + 1
    assert torch.equal(output.prediction, output.base_probs[0, channel])
