"""Deterministic JSON checkpoints.

Arrays are stored as base64 of their little-endian bytes so a save/load
round trip is bit-exact, and keys are sorted so identical models give
identical files.
"""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

FORMAT = "hnp-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_array(a: np.ndarray) -> dict:
    shape = list(np.shape(a))  # ascontiguousarray promotes 0-d to 1-d
    a = np.ascontiguousarray(a)
    le = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {"dtype": a.dtype.str.lstrip("<>|="), "shape": shape,
            "data": base64.b64encode(le.tobytes()).decode("ascii")}


def decode_array(doc: dict) -> np.ndarray:
    dt = np.dtype("<" + doc["dtype"]) if doc["dtype"][0] in "fiu" else np.dtype(doc["dtype"])
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype=dt).reshape(doc["shape"]).astype(dt.newbyteorder("="))


def checkpoint_bytes(model, meta: dict | None = None) -> bytes:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model.cfg.to_dict(),
        "meta": meta or {},
        "params": {k: encode_array(v) for k, v in model.state_dict().items()},
    }
    return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("utf-8")


def save_checkpoint(path, model, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, meta))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from exc
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {doc.get('format')!r}")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')!r}")
    return doc


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns (model, meta)."""
    from .models import ModelConfig, build_model

    doc = read_checkpoint(path)
    model = build_model(ModelConfig.from_dict(doc["model_config"]), 0)
    model.load_state_dict({k: decode_array(v) for k, v in doc["params"].items()})
    return model, doc["meta"]
