"""
Single-file parameter checkpoints.

    b"PALNCKPT" | header length (uint64, little endian) | JSON header | raw array payload

The header holds the model config and its hash, step, seed, variant, optimizer param groups,
free-form extras and an index of every array (name, dtype, shape, offset, nbytes) in the
payload. Model arrays are named ``model.<state key>``, optimizer state arrays
``optimizer.<param index>.<key>``.
"""
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from loguru import logger

from protoalign.config import ModelConfig, config_hash, settings_from_dict, to_dict
from protoalign.errors import ConfigMismatch, DatasetIOError, FormatError
from protoalign.model import ProtoSegmenter, build_model

MAGIC = b"PALNCKPT"
LENGTH = struct.Struct("<Q")


@dataclass
class Checkpoint:
    header: dict[str, Any]
    arrays: dict[str, np.ndarray]
    optimizer_state: dict[str, Any] | None = None

    @property
    def step(self) -> int:
        return int(self.header["step"])

    @property
    def seed(self) -> int:
        return int(self.header["seed"])

    @property
    def extra(self) -> dict[str, Any]:
        return self.header.get("extra", {})

    @property
    def model_config(self) -> ModelConfig:
        return settings_from_dict({"model": self.header["config"]}).model

    def require_config(self, model_config: ModelConfig) -> None:
        stored, expected = self.header["config_hash"], config_hash(model_config)
        if stored != expected:
            raise ConfigMismatch(f"checkpoint config {stored[:12]} != run config {expected[:12]}")

    def model_state(self) -> dict[str, torch.Tensor]:
        prefix = "model."
        return {k[len(prefix) :]: torch.from_numpy(v) for k, v in self.arrays.items() if k.startswith(prefix)}


@dataclass
class _Payload:
    index: list[dict[str, Any]] = field(default_factory=list)
    chunks: list[bytes] = field(default_factory=list)
    size: int = 0

    def add(self, name: str, tensor: torch.Tensor) -> None:
        array = np.ascontiguousarray(tensor.detach().cpu().numpy())
        # explicit little endian so files are portable
        array = array.astype(array.dtype.newbyteorder("<"), copy=False)
        raw = array.tobytes()
        self.index.append(
            {
                "name": name,
                "dtype": array.dtype.str,
                "shape": list(array.shape),
                "offset": self.size,
                "nbytes": len(raw),
            }
        )
        self.chunks.append(raw)
        self.size += len(raw)


def save_checkpoint(
    path: str | Path,
    model: ProtoSegmenter,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    seed: int = 0,
    extra: dict[str, Any] | None = None,
) -> Path:
    """Write atomically: a temp file in the same directory is renamed over `path`"""
    path = Path(path)
    payload = _Payload()
    for name, tensor in model.state_dict().items():
        payload.add(f"model.{name}", tensor)

    groups, scalars = None, {}
    if optimizer is not None:
        state = optimizer.state_dict()
        groups = state["param_groups"]
        for idx, values in state["state"].items():
            for key, value in values.items():
                if isinstance(value, torch.Tensor):
                    payload.add(f"optimizer.{idx}.{key}", value)
                else:
                    scalars[f"{idx}.{key}"] = value

    header = {
        "config": to_dict(model.config),
        "config_hash": config_hash(model.config),
        "step": step,
        "seed": seed,
        "variant": model.variant,
        "arrays": payload.index,
        "optimizer": {"param_groups": groups, "scalars": scalars} if optimizer is not None else None,
        "extra": extra or {},
    }
    encoded = json.dumps(header, sort_keys=True).encode()

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(LENGTH.pack(len(encoded)))
            f.write(encoded)
            for chunk in payload.chunks:
                f.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.info(f"Checkpoint step {step} -> {path}")
    return path


def load_checkpoint(path: str | Path, model_config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with `model_config` given its hash must match the stored one"""
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(f"no checkpoint at {path}")
    data = path.read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path} is not a checkpoint")
    start = len(MAGIC) + LENGTH.size
    if len(data) < start:
        raise FormatError(f"{path} is truncated")
    (length,) = LENGTH.unpack(data[len(MAGIC) : start])
    try:
        header = json.loads(data[start : start + length])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt header: {e}") from e

    if model_config is not None and header["config_hash"] != config_hash(model_config):
        raise ConfigMismatch(f"{path} was written for a different model config")

    body = memoryview(data)[start + length :]
    arrays = {}
    for entry in header["arrays"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(body):
            raise FormatError(f"{path}: array {entry['name']} runs past the end of the file")
        raw = body[entry["offset"] : end]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()

    optimizer_state = None
    if header.get("optimizer"):
        state: dict[int, dict[str, Any]] = {}
        for name, array in arrays.items():
            if name.startswith("optimizer."):
                _, idx, key = name.split(".", 2)
                state.setdefault(int(idx), {})[key] = torch.from_numpy(array)
        for name, value in header["optimizer"]["scalars"].items():
            idx, key = name.split(".", 1)
            state.setdefault(int(idx), {})[key] = value
        optimizer_state = {"state": state, "param_groups": header["optimizer"]["param_groups"]}

    return Checkpoint(header, arrays, optimizer_state)


def restore_model(checkpoint: Checkpoint) -> ProtoSegmenter:
    """Model built from the stored config with the stored weights, in eval mode"""
    config = checkpoint.model_config
    if config_hash(config) != checkpoint.header["config_hash"]:
        raise ConfigMismatch("stored config does not match its stored hash")
    model = build_model(config)
    state = checkpoint.model_state()
    # stored dtype wins, e.g. float64 test models
    first = next(iter(state.values()), None)
    if first is not None and first.is_floating_point():
        model.to(first.dtype)
    model.load_state_dict(state)
    return model.eval()
