"""Binary model checkpoint format.

Layout: an 8-byte magic string, a format version, a JSON config block,
then named tensors as (name, shape, little-endian float32 data), sorted by
name so that save -> load -> save is byte-identical. Writes are atomic
(temp file then rename), so an interrupted save never corrupts the last
good checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

MAGIC = b"TSVLABCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed files or config/tensor mismatches."""


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a checkpoint atomically; tensor data is stored as float32."""
    path = Path(path)
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<I", FORMAT_VERSION)
    config_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload += struct.pack("<I", len(config_bytes))
    payload += config_bytes
    names = sorted(tensors)
    payload += struct.pack("<I", len(names))
    for name in names:
        data = np.ascontiguousarray(tensors[name], dtype="<f4")
        name_bytes = name.encode("utf-8")
        payload += struct.pack("<H", len(name_bytes))
        payload += name_bytes
        payload += struct.pack("<B", data.ndim)
        payload += struct.pack(f"<{data.ndim}q", *data.shape)
        payload += data.tobytes()

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (config, {name: float32 array})."""
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    offset = 8
    (version,) = struct.unpack_from("<I", view, offset)
    offset += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (config_len,) = struct.unpack_from("<I", view, offset)
    offset += 4
    config = json.loads(bytes(view[offset : offset + config_len]).decode("utf-8"))
    offset += config_len
    (n_tensors,) = struct.unpack_from("<I", view, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        name = bytes(view[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", view, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}q", view, offset)
        offset += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(view, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        tensors[name] = data.copy()
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return config, tensors


def model_config_dict(model) -> dict:
    """Checkpoint config block for a TsVadModel or PretrainModel."""
    return {
        "kind": model.kind,
        "causal": True,
        "conditioning": model.method,
        "conformer": asdict(model.cfg),
    }


def save_model(path: str | Path, model, extra_config: dict | None = None) -> None:
    config = model_config_dict(model)
    if extra_config:
        config.update(extra_config)
    tensors = {name: t.data for name, t in model.params().items()}
    save_checkpoint(path, config, tensors)


def load_model(path: str | Path, dtype=np.float64):
    """Rebuild a model from a checkpoint, validating shapes against its config."""
    from .model import ConformerConfig, PretrainModel, TsVadModel

    config, tensors = load_checkpoint(path)
    cfg = ConformerConfig(**config["conformer"])
    if config["kind"] == "tsvad":
        model = TsVadModel(cfg, method=config["conditioning"], seed=0, dtype=dtype)
    elif config["kind"] == "pretrain":
        model = PretrainModel(cfg, seed=0, dtype=dtype)
    else:
        raise CheckpointError(f"{path}: unknown model kind {config['kind']!r}")
    params = model.params()
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        unexpected = sorted(set(tensors) - set(params))
        raise CheckpointError(
            f"{path}: tensor names do not match config "
            f"(missing {missing or 'none'}, unexpected {unexpected or 'none'})"
        )
    for name, tensor in params.items():
        stored = tensors[name]
        if stored.shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: checkpoint {stored.shape} "
                f"vs config-built {tensor.data.shape}"
            )
        tensor.data = stored.astype(model.dtype)
    return model, config
