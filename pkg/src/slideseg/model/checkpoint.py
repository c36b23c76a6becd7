"""Checkpoint serialization: flat named arrays plus a versioned config header."""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigError, CorruptDataError
from .encoder import EncoderConfig
from .network import PromptableSegmenter, create_model

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(model: PromptableSegmenter, path: Path | str) -> Path:
    """Write the model as an ``.npz`` of named arrays with a JSON header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "num_slices": model.num_slices,
    }
    arrays = {
        name: tensor.detach().cpu().numpy()
        for name, tensor in model.state_dict().items()
    }
    if _META_KEY in arrays:
        raise ConfigError(f"state dict may not contain a key named {_META_KEY}")
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: Path | str) -> PromptableSegmenter:
    """Rebuild a model from disk; raises ``CorruptDataError`` on bad files."""
    path = Path(path)
    if not path.exists():
        raise CorruptDataError(f"missing checkpoint {path}")
    try:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise CorruptDataError(f"{path}: unreadable checkpoint ({exc})") from exc
    if _META_KEY not in arrays:
        raise CorruptDataError(f"{path}: checkpoint header missing")
    try:
        meta = json.loads(arrays.pop(_META_KEY).tobytes().decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptDataError(f"{path}: bad checkpoint header ({exc})") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CorruptDataError(f"{path}: unsupported checkpoint version {version!r}")
    config = EncoderConfig.from_dict(meta.get("config", {}))
    model = create_model(config, num_slices=int(meta.get("num_slices", 3)))
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CorruptDataError(f"{path}: weights do not match config ({exc})") from exc
    return model
