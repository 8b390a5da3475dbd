"""
Checkpoint file format (all integers little-endian u32):

    magic            8 bytes, b"WANDCKPT"
    version          u32
    config length    u32, followed by the ModelConfig as UTF-8 JSON
    tensor count     u32
    per tensor, in declaration order:
        name length  u32, followed by the UTF-8 name
        rank         u32
        dims         rank x u32
        data         prod(dims) little-endian fp32
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np
import torch

from hwattn.engine.model import DecoderModel, ModelConfig
from hwattn.run import Global as gl

logger = logging.getLogger(__name__)

_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def _write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(_U32.pack(value))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _read_u32(fh: BinaryIO) -> int:
    return _U32.unpack(_read_exact(fh, _U32.size))[0]


def save_checkpoint(model: DecoderModel, path: Union[str, Path]) -> Path:
    """
    This function writes model weights and config in the checkpoint format

    Args:
        model (DecoderModel): model to persist; weights are written as fp32
        path (Union[str, Path]): destination file

    Returns:
        Path: written file
    """
    path = Path(path)
    config_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(gl.CHECKPOINT_MAGIC)
        _write_u32(fh, gl.CHECKPOINT_VERSION)
        _write_u32(fh, len(config_blob))
        fh.write(config_blob)
        _write_u32(fh, len(state))
        for name, tensor in state.items():
            name_blob = name.encode("utf-8")
            _write_u32(fh, len(name_blob))
            fh.write(name_blob)
            _write_u32(fh, tensor.dim())
            for dim in tensor.shape:
                _write_u32(fh, dim)
            fh.write(tensor.detach().cpu().float().numpy().astype("<f4").tobytes())
    logger.info(f"saved checkpoint {path} ({len(state)} tensors)")
    return path


def load_checkpoint(path: Union[str, Path]) -> DecoderModel:
    """
    This function rebuilds a model from a checkpoint file

    Args:
        path (Union[str, Path]): checkpoint file

    Raises:
        FileNotFoundError: missing file
        CheckpointError: bad magic, unsupported version, or tensors that do not match the config

    Returns:
        DecoderModel: model with the stored weights, bit for bit
    """
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, len(gl.CHECKPOINT_MAGIC)) != gl.CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version = _read_u32(fh)
        if version != gl.CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        config = ModelConfig.from_dict(json.loads(_read_exact(fh, _read_u32(fh)).decode("utf-8")))
        tensors = {}
        for _ in range(_read_u32(fh)):
            name = _read_exact(fh, _read_u32(fh)).decode("utf-8")
            shape = tuple(_read_u32(fh) for _ in range(_read_u32(fh)))
            count = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
            tensors[name] = torch.from_numpy(data.astype(np.float32))
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")

    model = DecoderModel(config)
    expected = model.state_dict()
    if list(tensors) != list(expected):
        raise CheckpointError(f"{path}: tensor names do not match the model declared by its config")
    for name, tensor in tensors.items():
        if tensor.shape != expected[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {tuple(tensor.shape)}, expected {tuple(expected[name].shape)}")
    model.load_state_dict(tensors)
    model.eval()
    return model
