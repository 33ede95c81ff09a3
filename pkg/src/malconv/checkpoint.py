"""Binary checkpoint container.

Layout (all integers little-endian u32)::

    b"MCV1"
    config_len, config_len bytes of UTF-8 "key=value" lines
    n_arrays
    repeated n_arrays times:
        name_len, name (UTF-8), rank, dims[rank], prod(dims) float32 LE values

Batch-norm running statistics are stored as arrays named ``running:<key>``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .exceptions import FormatError, InputError
from .model import ModelConfig, ModelParams, param_shapes

MAGIC = b"MCV1"
RUNNING_PREFIX = "running:"
_U32 = struct.Struct("<I")


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value)


def config_to_text(config):
    return "".join(f"{f.name}={_format_value(getattr(config, f.name))}\n" for f in fields(config))


def config_from_text(text):
    types = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or key not in types:
            raise FormatError(f"config line {lineno}: unknown or malformed entry {line!r}")
        kind = types[key]
        try:
            if kind in ("bool", bool):
                if raw not in ("true", "false"):
                    raise ValueError(raw)
                values[key] = raw == "true"
            elif kind in ("int", int):
                values[key] = int(raw)
            else:
                values[key] = float(raw)
        except ValueError:
            raise FormatError(f"config field {key!r}: bad value {raw!r}") from None
    try:
        return ModelConfig(**values)
    except (InputError, TypeError) as exc:
        raise FormatError(f"config block invalid: {exc}") from None


def save_checkpoint(params, config, path):
    """Write ``params`` (cast to float32) and ``config`` to ``path``."""
    arrays = list(params.weights.items()) + [
        (RUNNING_PREFIX + k, v) for k, v in params.running.items()
    ]
    config_bytes = config_to_text(config).encode("utf-8")
    chunks = [MAGIC, _U32.pack(len(config_bytes)), config_bytes, _U32.pack(len(arrays))]
    for name, array in arrays:
        raw_name = name.encode("utf-8")
        chunks.append(_U32.pack(len(raw_name)) + raw_name)
        chunks.append(_U32.pack(array.ndim) + b"".join(_U32.pack(d) for d in array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns ``(params, config)``; raises :class:`FormatError` naming the
    offending field on bad magic, truncation or shape mismatch.
    """
    reader = _Reader(Path(path).read_bytes())
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    config_len = reader.u32("config length")
    try:
        text = reader.take(config_len, "config block").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("config block is not valid UTF-8") from None
    config = config_from_text(text)

    weights, running = {}, {}
    for i in range(reader.u32("array count")):
        name_len = reader.u32(f"array {i} name length")
        try:
            name = reader.take(name_len, f"array {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"array {i} name is not valid UTF-8") from None
        rank = reader.u32(f"{name} rank")
        if rank > 8:
            raise FormatError(f"{name}: implausible rank {rank}")
        shape = tuple(reader.u32(f"{name} dims") for _ in range(rank))
        count = math.prod(shape)  # python ints: corrupt dims cannot overflow
        raw = reader.take(4 * count, f"{name} data")
        array = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        if name.startswith(RUNNING_PREFIX):
            running[name[len(RUNNING_PREFIX):]] = array
        else:
            weights[name] = array
    if reader.pos != len(reader.data):
        raise FormatError(f"{len(reader.data) - reader.pos} trailing bytes after last array")

    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in weights:
            raise FormatError(f"missing parameter array {name!r}")
        if weights[name].shape != shape:
            raise FormatError(f"{name}: shape {weights[name].shape} does not match config {shape}")
    extra = set(weights) - set(expected)
    if extra:
        raise FormatError(f"unexpected parameter arrays {sorted(extra)}")
    if config.use_batchnorm:
        for branch in ("linear", "gate"):
            for stat in ("mean", "var"):
                key = f"bn_{branch}_{stat}"
                if running.get(key, np.empty(0)).shape != (config.filters,):
                    raise FormatError(f"missing or misshapen running statistic {key!r}")
    return ModelParams(weights, running), config
