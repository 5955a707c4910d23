import dataclasses
import math

import numpy as np
import pytest
import torch

from protoalign.checkpoint import load_checkpoint
from protoalign.episodic import EpisodicTrainer, choose_atlas_institution
from protoalign.errors import DivergenceError, InvalidConfig, NoValidPrototype, UnknownInstitution
from protoalign.evaluation import dice_score
from protoalign.losses import LossReport
from protoalign.model import supervised_probs
from protoalign.supervised import SupervisedTrainer
from protoalign.trainer import CHECKPOINT, METRIC_COLUMNS, METRICS


def train_settings(settings, **overrides):
    return dataclasses.replace(settings, train=dataclasses.replace(settings.train, **overrides))


def test_smoke_run(settings, split, store, out_dir):
    trainer = EpisodicTrainer(settings, split, store, out_dir)
    metrics = trainer.run()
    assert list(metrics.columns) == METRIC_COLUMNS
    assert list(metrics["step"]) == [1, 2, 3, 4]
    assert not metrics["skipped"].any()
    assert np.allclose(metrics["total"], metrics["few_shot"])
    assert metrics["seg"].isna().all() and metrics["align"].isna().all()
    assert (out_dir / CHECKPOINT).is_file() and (out_dir / METRICS).is_file()
    assert load_checkpoint(out_dir / CHECKPOINT).step == 4
    assert not trainer.model.training


def test_loss_composition(settings, split, store):
    settings = train_settings(settings, variant="3d_seg_align", lambda_seg=0.5, lambda_align=2.0, steps=2)
    metrics = EpisodicTrainer(settings, split, store).run()
    expected = metrics["few_shot"] + 0.5 * metrics["seg"] + 2.0 * metrics["align"]
    assert np.allclose(metrics["total"], expected, rtol=1e-5)
    assert metrics["few_shot_native"].notna().all()


def test_no_novel_leakage(settings, split, store):
    metrics = EpisodicTrainer(train_settings(settings, steps=6), split, store).run()
    train_ids = set(split.train_ids)
    for row in metrics.to_dict("records"):
        assert row["class"] in split.base_classes
        assert set(row["ids"].split()) <= train_ids
        assert set(row["institutions"].split()) <= set(split.base_institutions)


def test_resume_matches_uninterrupted(settings, split, store, tmp_path):
    full = EpisodicTrainer(settings, split, store, tmp_path / "full").run()

    EpisodicTrainer(train_settings(settings, steps=2), split, store, tmp_path / "half").run()
    resumed = EpisodicTrainer(settings, split, store, tmp_path / "resumed")
    resumed.resume(tmp_path / "half" / CHECKPOINT)
    assert resumed.step == 2
    metrics = resumed.run()
    assert list(metrics["step"]) == [1, 2, 3, 4]
    assert np.allclose(metrics["total"][2:], full["total"][2:], rtol=1e-5)


def test_zero_weight_keeps_the_trajectory(settings, split, store):
    plain = EpisodicTrainer(train_settings(settings, steps=3), split, store)
    weighted = EpisodicTrainer(train_settings(settings, steps=3, variant="3d_seg", lambda_seg=0.0), split, store)
    plain.run()
    weighted.run()
    for (name, a), (_, b) in zip(
        plain.model.extractor.named_parameters(), weighted.model.extractor.named_parameters()
    ):
        assert torch.equal(a, b), name


def test_divergence(settings, split, store, monkeypatch):
    trainer = EpisodicTrainer(settings, split, store)
    monkeypatch.setattr(trainer, "losses", lambda item: LossReport.compose(torch.tensor(math.nan)))
    with pytest.raises(DivergenceError):
        trainer.run()


def test_skipped_episodes_are_logged(settings, split, store, out_dir, monkeypatch):
    def no_prototype(*args, **kwargs):
        raise NoValidPrototype("every window empty")

    monkeypatch.setattr("protoalign.episodic.forward_episode", no_prototype)
    trainer = EpisodicTrainer(settings, split, store, out_dir)
    metrics = trainer.run()
    assert trainer.step == settings.train.steps
    assert metrics["skipped"].all()
    assert metrics["total"].isna().all()
    assert (out_dir / METRICS).is_file()


def test_episodic_rejects_supervised(settings, split, store):
    with pytest.raises(InvalidConfig):
        EpisodicTrainer(settings, split, store, variant="supervised")


def test_supervised_smoke(settings, split, store, out_dir):
    trainer = SupervisedTrainer(settings, split, store, out_dir)
    metrics = trainer.run()
    assert trainer.model.variant == "supervised"
    assert len(metrics) == settings.train.steps
    assert (metrics["class"] == "*").all()
    assert np.allclose(metrics["total"], metrics["seg"])
    assert set(metrics["ids"]) <= set(split.train_ids)
    assert load_checkpoint(out_dir / CHECKPOINT).header["variant"] == "supervised"


def test_choose_atlas_institution(split):
    assert choose_atlas_institution(split, seed=0, requested="inst1") == "inst1"
    with pytest.raises(UnknownInstitution):
        choose_atlas_institution(split, seed=0, requested="inst2")
    chosen = choose_atlas_institution(split, seed=4)
    assert chosen in split.base_institutions
    assert chosen == choose_atlas_institution(split, seed=4)


def test_checkpoint_extra(settings, split, store, out_dir):
    settings = train_settings(settings, variant="3d_seg_align", steps=1, atlas_institution="inst0")
    trainer = EpisodicTrainer(settings, split, store, out_dir)
    assert trainer.atlas.institution == "inst0"
    trainer.run()
    extra = load_checkpoint(out_dir / CHECKPOINT).extra
    assert extra["atlas_institution"] == "inst0"
    assert extra["fold"] == split.fold
    assert extra["novel_institutions"] == list(split.novel_institutions)
    assert extra["wall_time"] >= 0


@pytest.mark.slow
def test_training_lowers_the_loss(settings, split, store):
    settings = train_settings(settings, steps=50, log_every=10, checkpoint_every=50)
    metrics = EpisodicTrainer(settings, split, store).run()
    assert metrics["total"][-10:].mean() < metrics["total"][:10].mean()


@pytest.mark.slow
def test_supervised_overfits_one_subject(settings, split, store):
    settings = dataclasses.replace(
        train_settings(settings, steps=150, learning_rate=1e-2, log_every=50, checkpoint_every=150),
        augment=dataclasses.replace(settings.augment, rotation_deg=0.0, translation=0.0, scale=(1.0, 1.0)),
    )
    subject = store[split.train_ids[0]]
    trainer = SupervisedTrainer(settings, split, store, ids=[subject.id])
    trainer.run()
    with torch.no_grad():
        probs = supervised_probs(trainer.model, [subject])[0]
    scores = [dice_score(probs[i + 1].numpy() > 0.5, subject.mask(c).data > 0.5) for i, c in enumerate(split.classes)]
    assert np.mean(scores) > 0.8
