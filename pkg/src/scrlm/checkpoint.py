"""Bit-exact parameter checkpoints (``.npz`` with a JSON header).

Arrays are stored under their ``ModelParams.named_arrays`` names.  Gate
projections live under the ``scr.`` prefix, so a checkpoint written without
gates loads with ``scr_gates == []``.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .exceptions import ConsistencyError, DataError
from .model import LayerParams, ModelConfig, ModelParams
from .scr import GateParams

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_params(path, params: ModelParams, include_gates: bool = True,
                extra: dict | None = None) -> Path:
    path = Path(path)
    arrays = {name: arr for name, arr in params.named_arrays()
              if include_gates or not name.startswith("scr.")}
    meta = {
        "format_version": FORMAT_VERSION,
        "config": dataclasses.asdict(params.config),
        "shapes": {name: list(arr.shape) for name, arr in arrays.items()},
        "scr_epsilon": [g.epsilon for g in params.scr_gates] if include_gates else [],
        "extra": extra or {},
    }
    with path.open("wb") as fh:
        np.savez(fh, **{_META_KEY: np.array(json.dumps(meta, sort_keys=True))}, **arrays)
    return path


def load_params(path) -> tuple[ModelParams, dict]:
    """Return ``(params, extra)`` from a checkpoint written by :func:`save_params`."""
    with np.load(Path(path), allow_pickle=False) as npz:
        if _META_KEY not in npz:
            raise DataError(f"{path} is not a checkpoint (no header)")
        meta = json.loads(str(npz[_META_KEY]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {meta.get('format_version')}")
        arrays = {k: npz[k] for k in npz.files if k != _META_KEY}
    for name, shape in meta["shapes"].items():
        if name not in arrays or list(arrays[name].shape) != shape:
            raise ConsistencyError(f"array {name} missing or shape differs from header")
    config = ModelConfig(**meta["config"])
    layers = [LayerParams(**{n: arrays[f"layers.{i}.{n}"] for n in LayerParams.NAMES})
              for i in range(config.n_layers)]
    gates = [GateParams(arrays[f"scr.{i}.W_p"], eps) for i, eps in enumerate(meta["scr_epsilon"])]
    params = ModelParams(config, arrays["token_embedding"], arrays["positional_embedding"],
                         layers, arrays["output_projection"], gates)
    return params, meta["extra"]
