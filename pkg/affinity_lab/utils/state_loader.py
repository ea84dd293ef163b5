"""
Model checkpoints: one binary container per model plus a JSON sidecar manifest.

Container layout (all integers little-endian):
    b"AFLB" | u32 version | u32 tensor count
    per tensor: u16 name length | name (utf-8) | u8 ndim | u32 dims[ndim]
    payload: every tensor's values as float64, in table order
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, Union

import numpy as np
import torch
from loguru import logger

from affinity_lab.utils.exceptions import CheckpointError

MAGIC = b"AFLB"
FORMAT_VERSION = 1


def manifest_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(
    model: torch.nn.Module,
    path: Union[str, Path],
    training_seed: int,
    data_hash: str = "",
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()

    header = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(state))]
    payload = []
    for name, tensor in state.items():
        encoded = name.encode("utf-8")
        header.append(struct.pack("<H", len(encoded)) + encoded)
        header.append(struct.pack("<B", tensor.dim()) + struct.pack(f"<{tensor.dim()}I", *tensor.shape))
        payload.append(tensor.detach().cpu().numpy().astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(header + payload))

    manifest = {
        "format_version": FORMAT_VERSION,
        "model": type(model).__name__,
        "architecture": model.architecture(),
        "training_seed": int(training_seed),
        "data_hash": data_hash,
        **(extra or {}),
    }
    with open(manifest_path(path), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Saved {type(model).__name__} checkpoint to {path}")
    return path


def read_container(path: Union[str, Path]) -> Dict[str, torch.Tensor]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(path, "checkpoint not found")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(path, "not an AFLB checkpoint")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(path, f"unsupported checkpoint version {version}")
        offset = 12
        table = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            table.append((name, shape))
        tensors = {}
        for name, shape in table:
            size = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            tensors[name] = torch.from_numpy(values.astype(np.float64).reshape(shape))
    except (struct.error, ValueError) as e:
        raise CheckpointError(path, f"corrupt checkpoint ({e})") from e
    if offset != len(blob):
        raise CheckpointError(path, "corrupt checkpoint (trailing bytes)")
    return tensors


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    sidecar = manifest_path(path)
    if not sidecar.exists():
        raise CheckpointError(sidecar, "checkpoint manifest not found")
    with open(sidecar, "r") as f:
        return json.load(f)


def load_checkpoint(model_cls: Type[torch.nn.Module], path: Union[str, Path]) -> Tuple[torch.nn.Module, Dict[str, Any]]:
    """Rebuilds a model from its manifest architecture and fills it from the container."""
    manifest = read_manifest(path)
    if manifest.get("model") != model_cls.__name__:
        raise CheckpointError(path, f"checkpoint holds a {manifest.get('model')}, not a {model_cls.__name__}")
    model = model_cls(**manifest["architecture"])
    tensors = read_container(path)
    expected = model.state_dict()
    if set(tensors) != set(expected):
        raise CheckpointError(path, "checkpoint tensors do not match the model")
    for name, tensor in tensors.items():
        if tuple(tensor.shape) != tuple(expected[name].shape):
            raise CheckpointError(path, f"shape mismatch for {name}")
    model.load_state_dict(tensors)
    model.eval()
    return model, manifest


def data_hash(directory: Union[str, Path]) -> str:
    """BLAKE2b over the dataset CSV files, used to tie checkpoints to their data."""
    digest = hashlib.blake2b(digest_size=16)
    for name in ("registry.csv", "energies.csv", "labels.csv"):
        file = Path(directory) / name
        if file.exists():
            digest.update(file.read_bytes())
    return digest.hexdigest()
