import json
from itertools import combinations

import numpy as np
import pytest

from conftest import SMALL_SHAPE
from protoalign.config import DEFAULT_CLASSES, GenerationConfig
from protoalign.errors import DatasetIOError, FormatError
from protoalign.phantom import (
    DatasetManifest,
    class_centroids,
    generate_dataset,
    generate_subject,
    institution_profile,
    institution_transform,
    load_subject,
    save_subject,
    volume_fractions,
)


def cross_institution_displacement(config: GenerationConfig) -> float:
    """Mean distance between institution-mean class centroids, over classes and institution pairs"""
    means = []
    for u in range(config.institutions):
        centroids = [class_centroids(generate_subject(config, u, k)) for k in range(config.subjects_per_institution)]
        means.append({c: np.mean([s[c] for s in centroids], axis=0) for c in config.classes})
    distances = [
        np.linalg.norm(a[c] - b[c]) for a, b in combinations(means, 2) for c in config.classes
    ]
    return float(np.mean(distances))


def test_generate_dataset_is_deterministic(tmp_path):
    config = GenerationConfig(institutions=2, subjects_per_institution=3, shape=SMALL_SHAPE, seed=7)
    first = generate_dataset(config, tmp_path / "a")
    second = generate_dataset(config, tmp_path / "b")
    assert len(first.subjects) == 6
    assert len(first.classes) == 8
    assert first.to_json() == second.to_json()
    for record in first.subjects:
        for name in ("image", "labels", "meta"):
            path = getattr(record, name)
            assert (first.root / path).read_bytes() == (second.root / path).read_bytes()


def test_subject_invariants(subjects, generation):
    for s in subjects:
        assert s.shape == generation.shape
        masks = s.masks
        assert set(masks) == set(generation.classes)
        total = sum(m.data for m in masks.values())
        assert total.max() <= 1
        assert all(m.data.any() for m in masks.values())
        assert 0.0 <= s.image.data.min() and s.image.data.max() <= 1.0


def test_default_volume_fractions():
    config = GenerationConfig()
    for u, k in [(0, 0), (1, 3), (3, 7)]:
        fractions = volume_fractions(generate_subject(config, u, k))
        assert set(fractions) == set(DEFAULT_CLASSES)
        for name, fraction in fractions.items():
            assert 0.001 <= fraction <= 0.2, name


def test_identity_offsets_keep_institutions_together():
    config = GenerationConfig(
        institutions=3, subjects_per_institution=3, shape=(48, 48, 12), institution_shift=0.0, seed=3
    )
    # subject jitter: centre jitter plus deformation, per axis in voxels
    half_extent = (np.array(config.shape) - 1) / 2
    jitter = (config.center_jitter + config.deformation) * half_extent * np.array([1.0, 1.0, 0.5])
    assert cross_institution_displacement(config) < np.linalg.norm(jitter)


def test_institution_shift_monotonic():
    displacements = [
        cross_institution_displacement(
            GenerationConfig(
                institutions=3, subjects_per_institution=2, shape=(48, 48, 12), institution_shift=m, seed=3
            )
        )
        for m in (0.5, 1.0, 2.0)
    ]
    assert displacements[0] < displacements[1] < displacements[2]


def test_institution_profile():
    config = GenerationConfig()
    profile = institution_profile(config, 1)
    assert profile == institution_profile(config, 1)
    assert profile != institution_profile(config, 2)
    assert abs(profile["rotation_deg"][2]) <= config.institution_rotation_deg
    assert institution_transform(profile).determinant() > 0
    still = institution_profile(GenerationConfig(institution_shift=0.0), 1)
    assert institution_transform(still).is_identity()


def test_save_load_round_trip(tmp_path, subjects):
    s = subjects[5]
    paths = save_subject(s, tmp_path / s.id, seed=7)
    loaded = load_subject(paths)
    assert loaded.id == s.id
    assert loaded.institution == s.institution
    assert loaded.classes == s.classes
    assert loaded.image.spacing == s.image.spacing
    assert loaded.image.data.tobytes() == s.image.data.tobytes()
    assert np.array_equal(loaded.labels, s.labels)
    # also from the directory or meta.json
    assert np.array_equal(load_subject(tmp_path / s.id).labels, s.labels)
    assert np.array_equal(load_subject(paths.meta).image.data, s.image.data)


def test_truncated_payload(tmp_path, subjects):
    paths = save_subject(subjects[0], tmp_path / "s")
    raw = paths.image.read_bytes()
    paths.image.write_bytes(raw[:-7])
    with pytest.raises(FormatError):
        load_subject(paths)


def test_header_shape_mismatch(tmp_path, subjects):
    paths = save_subject(subjects[0], tmp_path / "s")
    meta = json.loads(paths.meta.read_text())
    w, h, d = meta["shape"]
    meta["shape"] = [w, h, d - 1]
    paths.meta.write_text(json.dumps(meta))
    with pytest.raises(FormatError):
        load_subject(paths)


def test_bad_magic(tmp_path, subjects):
    paths = save_subject(subjects[0], tmp_path / "s")
    meta = json.loads(paths.meta.read_text())
    meta["magic"] = "NOPE"
    paths.meta.write_text(json.dumps(meta))
    with pytest.raises(FormatError):
        load_subject(paths)
    paths.meta.write_text("{not json")
    with pytest.raises(FormatError):
        load_subject(paths)


def test_missing_files(tmp_path, subjects):
    with pytest.raises(DatasetIOError):
        load_subject(tmp_path / "nowhere")
    paths = save_subject(subjects[0], tmp_path / "s")
    paths.labels.unlink()
    with pytest.raises(DatasetIOError):
        load_subject(paths)


def test_manifest(dataset, generation):
    loaded = DatasetManifest.load(dataset.root)
    assert loaded.to_json() == dataset.to_json()
    assert loaded.seed == generation.seed
    assert loaded.classes == generation.classes
    assert loaded.institutions == ("inst0", "inst1", "inst2")
    assert len(loaded.subject_ids("inst1")) == generation.subjects_per_institution
    s = loaded.load_subject("inst1_s02")
    assert s.institution == loaded.institution_of("inst1_s02") == "inst1"
    assert set(loaded.institution_profiles) == set(loaded.institutions)


def test_manifest_errors(tmp_path, dataset):
    with pytest.raises(DatasetIOError):
        DatasetManifest.load(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"magic": "other"}))
    with pytest.raises(FormatError):
        DatasetManifest.load(tmp_path)
    broken = json.loads(dataset.to_json())
    broken["subjects"][0]["image"] = "subjects/missing/image.raw"
    (tmp_path / "manifest.json").write_text(json.dumps(broken))
    with pytest.raises(DatasetIOError):
        DatasetManifest.load(tmp_path)
