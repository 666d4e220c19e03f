"""Checkpoint files: a magic line followed by one JSON document."""

from __future__ import annotations

import base64
import json
from dataclasses import fields
from pathlib import Path

import numpy as np

from .model import NFNPCDR, ModelConfig
from .npencoder import IdMaps
from .training import TrainConfig

MAGIC = "NFNPCDR-CKPT v1"


class CheckpointError(ValueError):
    def __init__(self, message, field=None):
        self.field = field
        super().__init__(message if field is None else f"{field}: {message}")


def _encode(array):
    return base64.b64encode(np.ascontiguousarray(array, dtype="<f8").tobytes()).decode("ascii")


def _decode(text, shape, name):
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, AttributeError) as exc:
        raise CheckpointError(f"corrupted payload ({exc})", field=f"params[{name}].data") from exc
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != 8 * count:
        raise CheckpointError(f"payload holds {len(raw) // 8} values, shape {shape} needs {count}",
                              field=f"params[{name}].data")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save_checkpoint(model, train_config, path):
    """Write ``model`` (plus the training config it came from) to ``path``."""
    params = []
    for p in model.parameters():
        if not np.all(np.isfinite(p.data)):
            raise CheckpointError("non-finite values", field=f"params[{p.name}]")
        params.append({"name": p.name, "shape": list(p.shape), "data": _encode(p.data)})
    config = {**train_config.to_dict(), **model.config.to_dict(), "model_seed": model.seed}
    doc = {"config": config, "id_maps": model.id_maps.to_json(), "params": params}
    Path(path).write_text(MAGIC + "\n" + json.dumps(doc) + "\n", encoding="utf-8")


def split_config(config):
    """Separate a flat config dict into (ModelConfig, TrainConfig, model seed)."""
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(config) - model_keys - train_keys - {"model_seed"}
    if unknown:
        raise CheckpointError(f"unknown keys {sorted(unknown)}", field="config")
    try:
        mc = ModelConfig(**{k: v for k, v in config.items() if k in model_keys})
        tc = TrainConfig(**{k: v for k, v in config.items() if k in train_keys})
    except (TypeError, ValueError) as exc:
        raise CheckpointError(str(exc), field="config") from exc
    return mc, tc, int(config.get("model_seed", tc.seed))


def load_checkpoint(path, expect=None):
    """Rebuild the model stored at ``path``; returns (model, train_config).

    ``expect`` optionally names a ModelConfig the checkpoint must match.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot read {path}: {exc}", field="file") from exc
    head, sep, body = text.partition("\n")
    if head != MAGIC:
        raise CheckpointError(f"expected {MAGIC!r}, found {head[:40]!r}", field="magic")
    if not sep:
        raise CheckpointError("file ends after the magic line", field="document")
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"truncated or malformed JSON ({exc})", field="document") from exc
    for key in ("config", "id_maps", "params"):
        if key not in doc:
            raise CheckpointError("missing", field=key)
    mc, tc, seed = split_config(doc["config"])
    if expect is not None and expect != mc:
        raise CheckpointError("model config differs from the expected one", field="config")
    try:
        id_maps = IdMaps.from_json(doc["id_maps"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(str(exc), field="id_maps") from exc
    model = NFNPCDR(mc, id_maps, seed)
    load_params(model, doc["params"])
    return model, tc


def load_params(model, entries):
    expected = model.named_parameters()
    seen = set()
    for entry in entries:
        try:
            name, shape, data = entry["name"], tuple(entry["shape"]), entry["data"]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed entry ({exc})", field="params") from exc
        if name not in expected:
            raise CheckpointError("not a parameter of this model", field=f"params[{name}]")
        block = expected[name]
        if shape != block.shape:
            raise CheckpointError(f"shape mismatch: stored {list(shape)}, model has {list(block.shape)}",
                                  field=f"params[{name}].shape")
        block.data = _decode(data, shape, name)
        seen.add(name)
    missing = sorted(set(expected) - seen)
    if missing:
        raise CheckpointError(f"missing parameters {missing[:5]}", field="params")
