"""Versioned checkpoints: parameter blobs plus a self-describing JSON header.

The header carries the config snapshot, the step counters, and the derived
random-stream positions, so a restored trainer continues bit-identically.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError, ParseError

SCHEMA_VERSION = 1

_HEADER_KEY = "__header__"
_PARAM_PREFIX = "param::"


def save_checkpoint(path, named_arrays: dict, header: dict) -> None:
    header = dict(header)
    header["schema_version"] = SCHEMA_VERSION
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    payload = {_HEADER_KEY: blob}
    for name, arr in named_arrays.items():
        payload[_PARAM_PREFIX + name] = np.asarray(arr)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    """Return (header dict, {name: array})."""
    try:
        with np.load(path, allow_pickle=False) as bundle:
            if _HEADER_KEY not in bundle:
                raise ParseError(f"{path}: not a checkpoint (missing header)")
            header = json.loads(bytes(bundle[_HEADER_KEY].tobytes()).decode("utf-8"))
            params = {
                name[len(_PARAM_PREFIX):]: bundle[name]
                for name in bundle.files
                if name.startswith(_PARAM_PREFIX)
            }
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except (ValueError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt checkpoint: {exc}") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint schema {header.get('schema_version')}")
    return header, params


def restore_parameters(model, params: dict, strict: bool = True) -> list:
    """Copy arrays into matching model parameters; returns the loaded names.

    With strict=False only the intersection with matching shapes is copied
    (stage-2 initialisation from a stage-1 checkpoint).
    """
    loaded = []
    for name, tensor in model.named_parameters():
        if name in params and params[name].shape == tensor.data.shape:
            tensor.data = params[name].astype(tensor.data.dtype).copy()
            loaded.append(name)
        elif strict:
            if name in params:
                raise ConfigError(
                    f"checkpoint parameter {name} has shape {params[name].shape}, "
                    f"model expects {tensor.data.shape}"
                )
            raise ConfigError(f"checkpoint is missing parameter {name}")
    return loaded
