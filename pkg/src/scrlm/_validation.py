"""Input validation helpers shared by the public functions."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .exceptions import InputError, LengthError, NumericError, ShapeError


def check_tokens(tokens, vocab_size: int, max_len: int | None = None) -> np.ndarray:
    """Return ``tokens`` as a 1-D int64 array, raising on bad ids or length."""
    arr = np.asarray(tokens)
    if arr.ndim != 1:
        raise InputError(f"token sequence must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise InputError("token sequence is empty")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InputError(f"token ids must be integers, got dtype {arr.dtype}")
    arr = arr.astype(np.int64, copy=False)
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise InputError(f"token id out of range [0, {vocab_size})")
    if max_len is not None and arr.size > max_len:
        raise LengthError(f"sequence length {arr.size} exceeds max_seq_len {max_len}")
    return arr


def check_finite(x: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {name}")
    return x


def check_same_shape(*arrays: np.ndarray, names: Sequence[str] | None = None) -> None:
    shapes = [np.shape(a) for a in arrays]
    if any(s != shapes[0] for s in shapes[1:]):
        label = ", ".join(names) if names else "arguments"
        raise ShapeError(f"shape mismatch between {label}: {shapes}")


def check_matrix(x, name: str, n_cols: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if n_cols is not None and arr.shape[1] != n_cols:
        raise ShapeError(f"{name} must have {n_cols} columns, got {arr.shape[1]}")
    return arr
