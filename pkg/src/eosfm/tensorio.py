"""Structured-text manifests and the little-endian float32 tensor blob format."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class ManifestError(CheckpointError):
    """Manifest missing, unparsable or missing required keys."""


class ShapeMismatchError(CheckpointError):
    """Blob size or tensor shapes disagree with the manifest's tensor table."""


class FormatVersionError(CheckpointError):
    pass


def write_manifest(path, data: dict):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_manifest(path, required=()) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ManifestError(f"corrupt manifest {path}: {e}") from None
    if not isinstance(data, dict):
        raise ManifestError(f"corrupt manifest {path}: top level is not a mapping")
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: unsupported format version {version!r} (expected {FORMAT_VERSION})")
    missing = [k for k in required if k not in data]
    if missing:
        raise ManifestError(f"corrupt manifest {path}: missing keys {missing}")
    return data


def save_tensors(path, tensors: dict[str, torch.Tensor]) -> list[dict]:
    """Write tensors back to back as ``<f4``; return the tensor table (name, shape, dtype, offset)."""
    table, offset = [], 0
    with open(path, "wb") as fh:
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy().astype("<f4", copy=False)
            fh.write(np.ascontiguousarray(arr).tobytes())
            table.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
            offset += arr.size * 4
    return table


def load_tensors(path, table: list[dict]) -> dict[str, torch.Tensor]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise ShapeMismatchError(f"tensor blob missing: {path}") from None
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) * 4 for e in table)
    if len(raw) != expected:
        raise ShapeMismatchError(f"{path}: {len(raw)} bytes on disk, tensor table needs {expected}")
    out = {}
    for e in table:
        if e.get("dtype", "float32") != "float32":
            raise ManifestError(f"unsupported dtype {e['dtype']!r} for tensor {e['name']}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return out


def load_state_into(module: torch.nn.Module, tensors: dict[str, torch.Tensor], where=""):
    state = module.state_dict()
    if set(state) != set(tensors):
        missing, extra = set(state) - set(tensors), set(tensors) - set(state)
        raise ShapeMismatchError(f"{where}: tensor names differ (missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, t in tensors.items():
        if tuple(state[name].shape) != tuple(t.shape):
            raise ShapeMismatchError(f"{where}: {name} has shape {tuple(t.shape)}, model needs {tuple(state[name].shape)}")
    module.load_state_dict(tensors)
