"""Checkpoint directory format.

``manifest.json`` lists every tensor's name, shape and byte offset inside
``weights.bin``; the blob starts with the ASCII magic ``CCTR-CKPT-1`` followed
by little-endian float32 data.  Parameters are held in float64 during training
and rounded to float32 on save, so a save/load/save cycle is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import AdamState
from .model import ContentCTR, ModelConfig

CKPT_MAGIC = b"CCTR-CKPT-1"
BLOB_NAME = "weights.bin"
MANIFEST_NAME = "manifest.json"


class CheckpointError(ValueError):
    """Checkpoint is malformed or does not match the requested configuration."""


def to_f32_grid(arr: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, returned as float64."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)


def save_checkpoint(path, model: ContentCTR, adam: AdamState | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = dict(model.parameter_arrays())
    if adam is not None:
        for name in model.params:
            if name in adam.m:
                tensors[f"adam.m/{name}"] = adam.m[name]
                tensors[f"adam.v/{name}"] = adam.v[name]
    entries = []
    chunks = [CKPT_MAGIC]
    offset = len(CKPT_MAGIC)
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    (path / BLOB_NAME).write_bytes(b"".join(chunks))
    manifest = {
        "format": CKPT_MAGIC.decode(),
        "blob": BLOB_NAME,
        "model_config": model.config.to_dict(),
        "tensors": entries,
        "adam": None if adam is None else {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "t": adam.t,
        },
        "meta": meta or {},
    }
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_checkpoint(path, expect_config: ModelConfig | None = None):
    """Returns ``(model, adam_state_or_None, meta)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {path}: {exc}") from None
    if manifest.get("format") != CKPT_MAGIC.decode():
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    blob = (path / manifest.get("blob", BLOB_NAME)).read_bytes()
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad blob magic")
    config = ModelConfig.from_dict(manifest["model_config"])
    if expect_config is not None and expect_config != config:
        raise CheckpointError("checkpoint model config does not match the requested config")
    arrays = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = entry["offset"] + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the end of the blob")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    try:
        model = ContentCTR(config, params)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    adam = None
    if manifest.get("adam") is not None:
        a = manifest["adam"]
        adam = AdamState(
            lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"],
            m={k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")},
            v={k[len("adam.v/"):]: v for k, v in arrays.items() if k.startswith("adam.v/")},
        )
    return model, adam, manifest.get("meta", {})
