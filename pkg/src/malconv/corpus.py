"""Synthetic labelled PE corpora and ``path,label`` manifests.

Benign and malicious files are drawn from the same generator and differ only
in whether a fixed byte motif is planted inside one section's raw data.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InputError
from .pe import FILE_ALIGNMENT, build_pe

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
PLACEMENTS_NAME = "motifs.csv"
SECTION_NAMES = (".text", ".rdata", ".data", ".rsrc")
RANDOM_OFFSET = "random-offset"
WINDOW_ALIGNED = "window-aligned"
UNIFORM_RANDOM = "uniform-random"
REPEATED_BLOCK = "repeated-block"


def default_motif(seed, length=24):
    """A motif of distinct byte values derived from ``seed``."""
    rng = np.random.default_rng([seed, 0x6D6F74])
    return bytes(rng.permutation(256)[:length].astype(np.uint8))


@dataclass
class CorpusSpec:
    n_benign: int
    n_malicious: int
    file_size_range: tuple = (16384, 16384)
    motif: bytes = b""
    motif_policy: str = RANDOM_OFFSET
    background: str = REPEATED_BLOCK
    seed: int = 0
    window: int = 32

    def __post_init__(self):
        lo, hi = self.file_size_range
        if lo > hi:
            raise InputError("file_size_range min exceeds max")
        if lo < 2 * FILE_ALIGNMENT:
            raise InputError(f"files must be at least {2 * FILE_ALIGNMENT} bytes")
        if self.n_benign < 0 or self.n_malicious < 0:
            raise InputError("counts must be non-negative")
        if self.n_malicious and not self.motif:
            raise InputError("a non-empty motif is required for malicious files")
        if len(self.motif) > self.window:
            raise InputError(f"motif longer than window ({len(self.motif)} > {self.window})")
        if self.motif_policy not in (RANDOM_OFFSET, WINDOW_ALIGNED):
            raise InputError(f"unknown motif_policy {self.motif_policy!r}")
        if self.background not in (UNIFORM_RANDOM, REPEATED_BLOCK):
            raise InputError(f"unknown background {self.background!r}")


@dataclass(frozen=True)
class Placement:
    path: str
    offset: int
    length: int
    section: str


@dataclass
class Manifest:
    entries: list = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        paths = [p for p, _ in self.entries]
        if len(set(paths)) != len(paths):
            raise InputError("manifest paths must be unique")
        for p, label in self.entries:
            if label not in (0, 1):
                raise InputError(f"label for {p!r} must be 0 or 1")

    def __len__(self):
        return len(self.entries)

    @property
    def paths(self):
        return [p for p, _ in self.entries]

    @property
    def labels(self):
        return np.array([label for _, label in self.entries], dtype=np.int64)

    def resolve(self, path):
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path


def count_occurrences(data, motif):
    count, start = 0, data.find(motif)
    while start != -1:
        count += 1
        start = data.find(motif, start + 1)
    return count


BLOCK_LEN = 32


def _background(rng, n, kind, block):
    if kind == UNIFORM_RANDOM:
        return rng.integers(0, 256, n, dtype=np.uint8).tobytes()
    return (block * (n // len(block) + 1))[:n]


def _split_blocks(rng, n_blocks, n_sections):
    extra = rng.multinomial(n_blocks - n_sections, np.full(n_sections, 1 / n_sections))
    return [int(b) + 1 for b in extra]


def _make_file(spec, label, index):
    rng = np.random.default_rng([spec.seed, label, index])
    size = int(rng.integers(spec.file_size_range[0], spec.file_size_range[1] + 1))
    body = size - FILE_ALIGNMENT  # headers occupy one aligned block
    n_blocks = body // FILE_ALIGNMENT
    n_sections = min(len(SECTION_NAMES), n_blocks)
    blocks = _split_blocks(rng, n_blocks, n_sections)
    names = SECTION_NAMES[:n_sections]
    overlay_len = body - n_blocks * FILE_ALIGNMENT

    motif = spec.motif
    which = int(rng.integers(n_sections)) if label else -1
    section_start = FILE_ALIGNMENT + FILE_ALIGNMENT * sum(blocks[:which]) if label else 0
    section_len = blocks[which] * FILE_ALIGNMENT if label else 0
    if label:
        if spec.motif_policy == RANDOM_OFFSET:
            local = int(rng.integers(0, section_len - len(motif) + 1))
        else:
            first = -(-section_start // spec.window) * spec.window
            starts = np.arange(first, section_start + section_len - len(motif) + 1, spec.window)
            if starts.size == 0:
                raise InputError("no window-aligned slot fits the motif")
            local = int(rng.choice(starts)) - section_start

    for _ in range(1000):
        # repeated-block tiles one per-file block through every section
        block = rng.integers(0, 256, BLOCK_LEN, dtype=np.uint8).tobytes()
        contents = [_background(rng, b * FILE_ALIGNMENT, spec.background, block) for b in blocks]
        overlay = _background(rng, overlay_len, spec.background, block)
        if label:
            c = bytearray(contents[which])
            c[local:local + len(motif)] = motif
            contents[which] = bytes(c)
        data = build_pe(list(zip(names, contents)), seed=spec.seed * 1_000_003 + index, overlay=overlay)
        found = count_occurrences(data, motif) if motif else 0
        if found == (1 if label else 0):
            break
    else:
        raise InputError("could not draw a background free of stray motif copies")

    placement = None
    if label:
        placement = (section_start + local, len(motif), names[which])
    return data, placement


def generate(spec, out_dir, workers=1):
    """Write the corpus described by ``spec`` to ``out_dir``.

    Writes one ``.exe`` per sample plus ``manifest.csv`` (relative paths)
    and ``motifs.csv`` recording where each motif was planted. The output
    depends only on ``spec``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(0, i) for i in range(spec.n_benign)] + [(1, i) for i in range(spec.n_malicious)]

    def work(job):
        label, index = job
        data, placement = _make_file(spec, label, index)
        name = f"{'malicious' if label else 'benign'}_{index:05d}.exe"
        (out_dir / name).write_bytes(data)
        return name, label, placement

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]

    manifest = Manifest([(name, label) for name, label, _ in results], out_dir)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    with open(out_dir / PLACEMENTS_NAME, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "offset", "length", "section"])
        for name, _, placement in results:
            if placement is not None:
                writer.writerow([name, *placement])
    return manifest


def write_manifest(manifest, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        writer.writerows(manifest.entries)


def load_manifest(path):
    """Read a ``path,label`` CSV; the header line is optional.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1 and [c.strip() for c in row] == ["path", "label"]:
                continue
            if len(row) != 2:
                raise InputError(f"{path}:{lineno}: expected 'path,label', got {row!r}")
            file_path, label = row[0], row[1].strip()
            if label not in ("0", "1") or not file_path:
                raise InputError(f"{path}:{lineno}: invalid entry {row!r} (label must be 0 or 1)")
            entries.append((file_path, int(label)))
    try:
        return Manifest(entries, path.parent)
    except InputError as exc:
        raise InputError(f"{path}: {exc}") from None


def load_placements(path):
    path = Path(path)
    if path.is_dir():
        path = path / PLACEMENTS_NAME
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return {
            row["path"]: Placement(row["path"], int(row["offset"]), int(row["length"]), row["section"])
            for row in reader
        }


def read_samples(manifest, workers=1):
    """Read every manifest file, preserving order.

    Returns ``(items, skipped)`` where ``items`` is a list of
    ``(path, label, bytes)`` and unreadable/empty files are skipped with a
    warning.
    """
    def read(entry):
        p, label = entry
        try:
            data = manifest.resolve(p).read_bytes()
        except OSError as exc:
            return p, label, None, str(exc)
        if not data:
            return p, label, None, "empty file"
        return p, label, data, None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(read, manifest.entries))
    else:
        results = [read(e) for e in manifest.entries]

    items, skipped = [], 0
    for p, label, data, error in results:
        if data is None:
            skipped += 1
            logger.warning("skipping %s: %s", p, error)
            continue
        items.append((p, label, data))
    return items, skipped

