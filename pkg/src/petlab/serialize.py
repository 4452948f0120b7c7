"""Deterministic JSON checkpoint container.

One format for backbone, tuning-module and experiment artifacts: named
float64 tensors (base64 of little-endian bytes), optional bit-packed
binary masks, and a config mapping. Keys are sorted and separators fixed,
so identical contents serialize to identical bytes.
"""

from __future__ import annotations

import base64
import hashlib
import json

import numpy as np

from .errors import ConfigError

FORMAT_NAME = "petlab-checkpoint"
FORMAT_VERSION = 1


def _tensor_entry(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "dtype": "float64", "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _tensor_from_entry(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)


def _mask_entry(mask: np.ndarray) -> dict:
    bits = np.asarray(mask).astype(np.uint8).reshape(-1)
    packed = np.packbits(bits)
    return {"shape": list(np.asarray(mask).shape), "packed": base64.b64encode(packed.tobytes()).decode("ascii")}


def _mask_from_entry(entry: dict) -> np.ndarray:
    packed = np.frombuffer(base64.b64decode(entry["packed"]), dtype=np.uint8)
    size = int(np.prod(entry["shape"])) if entry["shape"] else 1
    bits = np.unpackbits(packed)[:size]
    return bits.reshape(entry["shape"]).astype(np.float64)


def checkpoint_bytes(kind: str, config: dict, tensors: dict, masks: dict | None = None,
                     extra: dict | None = None) -> bytes:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "tensors": {name: _tensor_entry(arr) for name, arr in tensors.items()},
    }
    if masks:
        doc["masks"] = {name: _mask_entry(m) for name, m in masks.items()}
    if extra:
        doc["extra"] = extra
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("ascii")


def save_checkpoint(path, kind: str, config: dict, tensors: dict, masks: dict | None = None,
                    extra: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(kind, config, tensors, masks, extra))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        doc = json.loads(fh.read().decode("ascii"))
    if doc.get("format") != FORMAT_NAME:
        raise ConfigError(f"not a {FORMAT_NAME} file: {path}")
    if doc.get("version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    doc["tensors"] = {name: _tensor_from_entry(e) for name, e in doc["tensors"].items()}
    doc["masks"] = {name: _mask_from_entry(e) for name, e in doc.get("masks", {}).items()}
    return doc


def tensors_hash(tensors: dict) -> str:
    """Order-independent content hash of a name -> array mapping."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()
