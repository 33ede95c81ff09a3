"""Distribution of pre-gating convolution responses versus a unit Gaussian.

Batch-norm assumes roughly Gaussian, unimodal pre-activations. These helpers
collect the responses of a trained model, standardise them and emit Gaussian
KDE curves as ``x,pdf`` CSV for side-by-side plotting with N(0, 1).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .corpus import read_samples
from .exceptions import InputError
from .model import forward, pad_or_truncate

GRID_MIN, GRID_MAX, GRID_POINTS = -4.0, 4.0, 513
LINEAR, GATE, BOTH = "linear", "gate", "both"


@dataclass
class KdeCurve:
    x: np.ndarray
    pdf: np.ndarray
    bandwidth: float
    n_samples: int


def default_grid():
    """513 points on [-4, 4]; the odd count puts a grid point exactly at 0."""
    return np.linspace(GRID_MIN, GRID_MAX, GRID_POINTS)


class Reservoir:
    """Uniform fixed-size sample of a stream (Algorithm R, chunked)."""

    def __init__(self, capacity, seed=0):
        if capacity < 1:
            raise InputError("reservoir capacity must be >= 1")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self.buffer = np.empty(0, dtype=np.float64)
        self.seen = 0

    def extend(self, values):
        values = np.asarray(values, dtype=np.float64).ravel()
        room = self.capacity - self.buffer.size
        if room > 0:
            self.buffer = np.concatenate([self.buffer, values[:room]])
            self.seen += min(room, values.size)
            values = values[room:]
        if values.size:
            positions = self.seen + np.arange(values.size)
            slots = self.rng.integers(0, positions + 1)
            keep = np.flatnonzero(slots < self.capacity)
            # a slot hit twice keeps the later item, as in the serial algorithm
            _, first_rev = np.unique(slots[keep][::-1], return_index=True)
            last = keep[keep.size - 1 - first_rev]
            self.buffer[slots[last]] = values[last]
            self.seen += values.size

    @property
    def samples(self):
        return self.buffer.copy()


def collect_preactivations(params, config, manifest, n_files=None, sample_cap=10**6,
                           branch=LINEAR, seed=0, workers=1):
    """Reservoir-sample conv responses (before gating) over the first ``n_files`` files.

    Only windows inside the real file are counted, not padding.
    """
    if len(manifest) == 0:
        raise InputError("manifest is empty")
    if branch not in (LINEAR, GATE, BOTH):
        raise InputError(f"branch must be one of linear/gate/both, not {branch!r}")
    entries = manifest.entries if n_files is None else manifest.entries[:n_files]
    subset = type(manifest)(list(entries), manifest.base_dir)
    items, _ = read_samples(subset, workers)
    reservoir = Reservoir(sample_cap, seed)
    for _, _, data in items:
        tokens, length = pad_or_truncate(data, config.max_len)
        trace = forward(params, config, tokens)
        n_windows = min(trace.pre_activation_linear.shape[1],
                        max(1, -(-min(length, config.max_len) // config.stride)))
        if branch in (LINEAR, BOTH):
            reservoir.extend(trace.pre_activation_linear[0, :n_windows])
        if branch in (GATE, BOTH):
            reservoir.extend(trace.pre_activation_gate[0, :n_windows])
    return reservoir.samples


def standardize(samples):
    """``(x - mean) / std`` with the population standard deviation."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise InputError("need at least two samples to standardise")
    std = x.std()
    if std == 0:
        raise InputError("samples have zero variance")
    return (x - x.mean()) / std


def silverman_bandwidth(samples):
    x = np.asarray(samples, dtype=np.float64)
    return 1.06 * x.std() * x.size ** (-1 / 5)


def kde(samples, grid=None, bandwidth=None, chunk=4096):
    """Gaussian kernel density estimate evaluated on ``grid``.

    ``bandwidth`` defaults to Silverman's rule, 1.06 * std * n^(-1/5).
    """
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size == 0:
        raise InputError("kde needs at least one sample")
    x = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    h = silverman_bandwidth(s) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise InputError("bandwidth must be positive")
    pdf = np.zeros_like(x)
    for i in range(0, s.size, chunk):
        z = (x[:, None] - s[None, i:i + chunk]) / h
        pdf += np.exp(-0.5 * z * z).sum(axis=1)
    pdf /= s.size * h * np.sqrt(2 * np.pi)
    return KdeCurve(x, pdf, h, int(s.size))


def gaussian_reference(grid=None):
    x = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
    return KdeCurve(x, pdf, 0.0, 0)


def emit_kde_csv(curve, path):
    """Write ``x,pdf`` rows, one per grid point."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "pdf"])
        for xv, pv in zip(curve.x, curve.pdf):
            writer.writerow([repr(float(xv)), repr(float(pv))])


def read_kde_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]
