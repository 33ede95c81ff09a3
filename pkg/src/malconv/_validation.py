"""Input coercion shared by the estimator and the CLI."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .exceptions import InputError
from .model import pad_or_truncate
from .tensor import PAD_TOKEN


def _is_pathlike(x):
    return isinstance(x, (str, os.PathLike))


def check_byte_sequences(X, max_len):
    """Coerce ``X`` into a padded token matrix.

    ``X`` may be a 2D integer array of tokens (width ``max_len``, values in
    [0, 256]), or a sequence whose items are each bytes-like or a file path.

    Returns
    -------
    tokens : ndarray of int16, shape (n_samples, max_len)
    lengths : ndarray of int64
        Original byte lengths (``max_len`` minus trailing padding for token
        input).
    """
    if isinstance(X, np.ndarray) and X.ndim == 2 and np.issubdtype(X.dtype, np.integer):
        if X.shape[1] != max_len:
            raise InputError(f"token matrix must have {max_len} columns, got {X.shape[1]}")
        if X.size and (X.min() < 0 or X.max() > PAD_TOKEN):
            raise InputError(f"tokens must lie in [0, {PAD_TOKEN}]")
        tokens = X.astype(np.int16)
        not_pad = tokens != PAD_TOKEN
        lengths = np.where(not_pad.any(axis=1), max_len - np.argmax(not_pad[:, ::-1], axis=1), 0)
        return tokens, lengths.astype(np.int64)
    if isinstance(X, (bytes, bytearray, memoryview)) or _is_pathlike(X):
        raise InputError("X must be a sequence of samples; wrap a single sample in a list")
    try:
        items = list(X)
    except TypeError:
        raise InputError(f"cannot interpret {type(X).__name__} as byte sequences") from None
    if not items:
        raise InputError("X is empty")
    tokens = np.empty((len(items), max_len), dtype=np.int16)
    lengths = np.empty(len(items), dtype=np.int64)
    for i, item in enumerate(items):
        if _is_pathlike(item):
            item = Path(item).read_bytes()
        elif not isinstance(item, (bytes, bytearray, memoryview)):
            raise InputError(f"sample {i} is {type(item).__name__}, expected bytes or a path")
        tokens[i], lengths[i] = pad_or_truncate(item, max_len)
    return tokens, lengths


def check_binary_labels(y, n_samples):
    """Return ``(classes, encoded)`` with ``encoded`` in {0, 1}."""
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise InputError(f"y must be 1D with {n_samples} entries")
    classes, encoded = np.unique(y, return_inverse=True)
    if classes.size != 2:
        raise InputError(f"exactly two classes required, got {classes.size}")
    return classes, encoded.astype(np.int64)


def sample_keys(X, n_samples):
    """Stable identifiers used for the hashed validation split."""
    if not isinstance(X, np.ndarray):
        items = list(X)
        if items and all(_is_pathlike(x) for x in items):
            return [os.fspath(x) for x in items]
    return [str(i) for i in range(n_samples)]
