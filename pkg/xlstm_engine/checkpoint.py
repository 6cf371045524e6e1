"""
Checkpoint container.

Layout (all integers little-endian):
    magic        8 bytes  b"XLSTMCKP"
    version      uint32
    header_len   uint64
    header       UTF-8 JSON, sorted keys:
                 {"config": {...}, "format_version": 1,
                  "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}, ...]}
    payload      raw little-endian tensor bytes in manifest order;
                 offsets are relative to the start of the payload
"""
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch
from pydantic import ValidationError

from xlstm_engine.errors import CheckpointError, CheckpointManifestMismatch
from xlstm_engine.model import build_model, xLSTMLanguageModel
from xlstm_engine.models import ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"XLSTMCKP"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<IQ")
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def save_checkpoint(model: xLSTMLanguageModel, cfg: ModelConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    entries, payloads, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        if tensor.dtype not in _DTYPES:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {tensor.dtype}")
        dtype = _DTYPES[tensor.dtype]
        data = tensor.detach().cpu().contiguous().numpy().astype(dtype, copy=False).tobytes()
        entries.append(
            {"name": name, "shape": list(tensor.shape), "dtype": dtype, "offset": offset, "nbytes": len(data)}
        )
        payloads.append(data)
        offset += len(data)

    manifest = {
        "config": cfg.model_dump(mode="json"),
        "format_version": FORMAT_VERSION,
        "tensors": entries,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_PREAMBLE.pack(FORMAT_VERSION, len(header)))
        f.write(header)
        for data in payloads:
            f.write(data)

    logger.info(f"💾 Saved checkpoint {path} ({len(entries)} tensors, {offset:,} payload bytes)")
    return path


def _split(raw: bytes, path) -> Tuple[dict, int]:
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not an xLSTM checkpoint (bad magic)")
    version, header_len = _PREAMBLE.unpack_from(raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + _PREAMBLE.size
    try:
        manifest = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})") from e
    return manifest, start + header_len


def read_checkpoint_manifest(path) -> dict:
    manifest, _ = _split(Path(path).read_bytes(), path)
    return manifest


def load_checkpoint(path) -> Tuple[xLSTMLanguageModel, ModelConfig]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    raw = path.read_bytes()
    manifest, payload_start = _split(raw, path)

    try:
        cfg = ModelConfig(**manifest["config"])
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"{path}: invalid config in manifest ({e})") from e

    model = build_model(cfg)
    expected = model.state_dict()
    entries = {entry["name"]: entry for entry in manifest.get("tensors", [])}

    for name in expected:
        if name not in entries:
            raise CheckpointManifestMismatch(name, tuple(expected[name].shape), "missing")
    for name in entries:
        if name not in expected:
            raise CheckpointManifestMismatch(name, "absent from model", tuple(entries[name]["shape"]))

    tensors: Dict[str, torch.Tensor] = {}
    for name, entry in entries.items():
        shape = tuple(entry["shape"])
        if shape != tuple(expected[name].shape):
            raise CheckpointManifestMismatch(name, tuple(expected[name].shape), shape)
        if entry["dtype"] != _DTYPES[expected[name].dtype]:
            raise CheckpointManifestMismatch(name, _DTYPES[expected[name].dtype], entry["dtype"])
        count = int(np.prod(shape)) if shape else 1
        end = payload_start + entry["offset"] + entry["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: payload of '{name}' is truncated")
        array = np.frombuffer(raw, dtype=entry["dtype"], count=count, offset=payload_start + entry["offset"])
        tensors[name] = torch.from_numpy(array.reshape(shape).copy())

    model.load_state_dict(tensors)
    logger.info(f"📂 Loaded checkpoint {path} ({cfg.config_id})")
    return model, cfg
