"""Named-tensor checkpoints: a flat little-endian float32 blob plus a JSON index.

``save_checkpoint("run/gen", ...)`` writes ``run/gen.bin`` and ``run/gen.json``.
The index lists, in file order, each tensor's name, shape and byte offset,
and carries an optional free-form ``meta`` object.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

FORMAT = "cuevis-ckpt-v1"


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".bin", ".json"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".bin"), path.with_name(path.name + ".json")


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    bin_path, index_path = _paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(bin_path, "wb") as fh:
        for name in tensors:
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    index = {"format": FORMAT, "dtype": "float32-le", "tensors": entries, "meta": meta or {}}
    index_path.write_text(json.dumps(index, indent=1, sort_keys=True))
    return index_path


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; tensors come back as native float32 arrays."""
    bin_path, index_path = _paths(path)
    index = json.loads(index_path.read_text())
    if index.get("format") != FORMAT:
        raise ValueError(f"{index_path}: unknown checkpoint format {index.get('format')!r}")
    blob = bin_path.read_bytes()
    tensors = {}
    for entry in index["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
    return tensors, index["meta"]


def checkpoint_digest(path) -> str:
    """sha256 of the binary blob (the tensor contents)."""
    bin_path, _ = _paths(path)
    return hashlib.sha256(bin_path.read_bytes()).hexdigest()


def tensors_digest(tensors: Mapping[str, np.ndarray], names=None) -> str:
    h = hashlib.sha256()
    for name in sorted(names if names is not None else tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name]).tobytes())
    return h.hexdigest()
