import dataclasses

import pytest
import torch

from protoalign.checkpoint import MAGIC, load_checkpoint, restore_model, save_checkpoint
from protoalign.config import DEFAULT_CLASSES
from protoalign.errors import ConfigMismatch, DatasetIOError, FormatError
from protoalign.model import build_model

BASE = DEFAULT_CLASSES[2:]


def trained(model_config, dtype=torch.float32):
    """Model plus an Adam optimizer that has taken one step, so it carries state"""
    model = build_model(model_config.for_variant("3d_seg_align", BASE), seed=0).to(dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    loss = sum((p**2).sum() for p in model.parameters())
    loss.backward()
    optimizer.step()
    return model, optimizer


def test_round_trip(tmp_path, model_config):
    model, optimizer = trained(model_config)
    path = save_checkpoint(tmp_path / "ckpt.bin", model, optimizer, step=17, seed=5, extra={"fold": 2})
    checkpoint = load_checkpoint(path, model.config)
    assert checkpoint.step == 17
    assert checkpoint.seed == 5
    assert checkpoint.extra == {"fold": 2}
    assert checkpoint.model_config == model.config
    assert checkpoint.header["variant"] == "3d_seg_align"

    restored = restore_model(checkpoint)
    assert not restored.training
    original = model.state_dict()
    for name, tensor in restored.state_dict().items():
        assert torch.equal(tensor, original[name]), name

    again = torch.optim.Adam(restored.parameters(), lr=1e-3)
    again.load_state_dict(checkpoint.optimizer_state)
    before, after = optimizer.state_dict(), again.state_dict()
    assert before["param_groups"][0]["lr"] == after["param_groups"][0]["lr"]
    for idx, values in before["state"].items():
        for key in ("exp_avg", "exp_avg_sq"):
            assert torch.equal(values[key], after["state"][idx][key])


def test_model_only(tmp_path, model_config):
    model = build_model(model_config, seed=1)
    checkpoint = load_checkpoint(save_checkpoint(tmp_path / "m.bin", model))
    assert checkpoint.optimizer_state is None
    assert checkpoint.step == 0


def test_stored_dtype_wins(tmp_path, model_config):
    model, _ = trained(model_config, torch.float64)
    restored = restore_model(load_checkpoint(save_checkpoint(tmp_path / "f64.bin", model)))
    assert all(p.dtype == torch.float64 for p in restored.parameters())


def test_config_mismatch(tmp_path, model_config):
    model, optimizer = trained(model_config)
    path = save_checkpoint(tmp_path / "ckpt.bin", model, optimizer)
    with pytest.raises(ConfigMismatch):
        load_checkpoint(path, model_config.for_variant("3d_seg", BASE))


def test_require_config(tmp_path, model_config):
    model, _ = trained(model_config)
    checkpoint = load_checkpoint(save_checkpoint(tmp_path / "ckpt.bin", model))
    checkpoint.require_config(model_config.for_variant("3d_seg_align", BASE))
    with pytest.raises(ConfigMismatch):
        checkpoint.require_config(dataclasses.replace(model_config, widths=(4, 16)).for_variant("3d_seg_align", BASE))


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTACKPT" + bytes(32))
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(MAGIC + b"\x00")
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_truncated(tmp_path, model_config):
    model, optimizer = trained(model_config)
    path = save_checkpoint(tmp_path / "ckpt.bin", model, optimizer)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_missing(tmp_path):
    with pytest.raises(DatasetIOError):
        load_checkpoint(tmp_path / "nowhere.bin")


def test_atomic_write(tmp_path, model_config, monkeypatch):
    model, optimizer = trained(model_config)
    path = save_checkpoint(tmp_path / "ckpt.bin", model, optimizer, step=1)
    assert [p.name for p in tmp_path.iterdir()] == ["ckpt.bin"]

    def fail(*args):
        raise OSError("disk full")

    monkeypatch.setattr("protoalign.checkpoint.os.replace", fail)
    with pytest.raises(OSError):
        save_checkpoint(path, model, optimizer, step=2)
    assert [p.name for p in tmp_path.iterdir()] == ["ckpt.bin"]
    assert load_checkpoint(path).step == 1
