"""Model checkpoints as a flat ``.npz`` of named arrays.

Layout: one entry per learned array under its dotted name (``stage0.mlp.w``,
``bev.b1.0.gamma``, ``head.w_cls`` ...), batch-norm statistics under
``<layer>.bn.running_mean`` / ``<layer>.bn.running_var``, and a ``__config__``
entry holding ``key = value`` text (uint8 bytes) that rebuilds the model
configuration. Arrays are stored in the model's own precision (f32 or f64).
"""
from __future__ import annotations

import ast
import os

import numpy as np

from .backbone import BackboneConfig
from .detect import DetectConfig
from .model import DetectorModel

__all__ = ["SchemaError", "save_checkpoint", "load_checkpoint", "config_to_text", "config_from_text"]

CONFIG_KEY = "__config__"
FORMAT_VERSION = 1


class SchemaError(ValueError):
    """Checkpoint contents do not fit the model they describe."""


def config_to_text(backbone: BackboneConfig, detect: DetectConfig) -> str:
    lines = [f"format = {FORMAT_VERSION}"]
    for k, v in backbone.to_dict().items():
        lines.append(f"backbone.{k} = {v!r}")
    for k, v in detect.to_dict().items():
        lines.append(f"detect.{k} = {v!r}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str):
    bb, det = {}, {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = (s.strip() for s in line.partition("="))
        value = ast.literal_eval(val)
        if key == "format":
            if value != FORMAT_VERSION:
                raise SchemaError(f"unsupported checkpoint format {value}")
        elif key.startswith("backbone."):
            bb[key[len("backbone."):]] = value
        elif key.startswith("detect."):
            det[key[len("detect."):]] = tuple(value) if isinstance(value, list) else value
        else:
            raise SchemaError(f"unknown config key {key!r}")
    try:
        return BackboneConfig.from_dict(bb), DetectConfig(**det)
    except TypeError as exc:
        raise SchemaError(str(exc)) from None


def save_checkpoint(path, model: DetectorModel) -> None:
    arrays = {name: arr.data for name, arr in model.arrays().items()}
    for name, st in model.bn_states().items():
        arrays[f"{name}.running_mean"] = st.running_mean
        arrays[f"{name}.running_var"] = st.running_var
    text = config_to_text(model.backbone_cfg, model.detect_cfg)
    arrays[CONFIG_KEY] = np.frombuffer(text.encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> DetectorModel:
    """Rebuild the model described by a checkpoint; shapes are checked name by name."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        data = np.load(path, allow_pickle=False)
    except (ValueError, OSError) as exc:
        raise SchemaError(f"{path}: not a checkpoint ({exc})") from None
    with data:
        if CONFIG_KEY not in data.files:
            raise SchemaError(f"{path}: missing {CONFIG_KEY} entry")
        backbone, detect = config_from_text(bytes(data[CONFIG_KEY]).decode())
        stored = {k: data[k] for k in data.files if k != CONFIG_KEY}
    dtype = next(iter(stored.values())).dtype if stored else np.float64
    model = DetectorModel.init(backbone, detect, seed=0, dtype=dtype)
    expected = {name: arr for name, arr in model.arrays().items()}
    for name, st in model.bn_states().items():
        expected[f"{name}.running_mean"] = st.running_mean
        expected[f"{name}.running_var"] = st.running_var
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise SchemaError(f"checkpoint names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, target in expected.items():
        src = stored[name]
        if src.shape != target.shape:
            raise SchemaError(f"{name}: checkpoint shape {src.shape}, model expects {target.shape}")
        buf = target if isinstance(target, np.ndarray) else target.data
        buf[...] = src
    return model
