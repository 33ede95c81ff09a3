"""Sparse class-activation maps and per-section attribution.

Global max-pooling selects exactly one window per filter, so each filter
nominates a single W-byte span of the input. Its signed contribution to the
malicious-minus-benign logit gap says which way that span pushes the
decision.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import InputError
from .model import forward, pad_or_truncate
from .pe import offset_to_region, parse_pe

MALICIOUS = "malicious"
BENIGN = "benign"
REPORT_HEADER = ["filter", "start", "width", "contribution", "leaning", "section"]


@dataclass
class CamRegion:
    filter_index: int
    start_offset: int
    width: int
    contribution: float
    leaning: str
    section: str = ""
    merged_filters: tuple = ()


def class_gap_weights(params, trace, index=0):
    """d(logit_1 - logit_0)/d(pooled) with the FC ReLU pattern frozen.

    For the given input the head is piecewise linear, so these weights make
    ``sum_f w_f * pooled_f`` reproduce the logit gap up to a constant.
    """
    w = params.weights
    active = (trace.fc_pre[index] > 0).astype(np.float64)
    out_gap = w["out_weights"][:, 1].astype(np.float64) - w["out_weights"][:, 0]
    return w["fc_weights"].astype(np.float64) @ (active * out_gap)


def sparse_cam(params, config, trace, file_len, index=0):
    """Explain one input of ``trace`` as a list of :class:`CamRegion`.

    Regions whose window starts inside padding (at or beyond ``file_len``)
    are dropped; the number dropped is returned alongside the regions.
    Filters selecting the same window are merged and their contributions
    summed, and zero-contribution regions are omitted.

    Returns
    -------
    regions : list of CamRegion, ordered by start offset
    dropped : int
    """
    if trace.pooled.ndim != 2 or index >= trace.pooled.shape[0]:
        raise InputError("trace does not contain the requested input")
    if trace.pooled.shape[1] != config.filters or params.weights["fc_weights"].shape[0] != config.filters:
        raise InputError("trace, params and config disagree on the number of filters")
    weights = class_gap_weights(params, trace, index)
    pooled = trace.pooled[index].astype(np.float64)
    contributions = weights * pooled

    spans, dropped = {}, 0
    for f in range(config.filters):
        if contributions[f] == 0:
            continue
        start = int(trace.argmax[index, f]) * config.stride
        if start >= file_len:
            dropped += 1
            continue
        spans.setdefault(start, []).append(f)

    regions = []
    for start in sorted(spans):
        members = spans[start]
        total = float(sum(contributions[f] for f in members))
        if total == 0:
            continue
        width = min(config.conv_spec.effective_width, file_len - start)
        regions.append(CamRegion(
            filter_index=members[0], start_offset=start, width=width,
            contribution=total, leaning=MALICIOUS if total > 0 else BENIGN,
            merged_filters=tuple(members)))
    return regions, dropped


def attribute_sections(regions, section_map):
    """Tally regions per (region name, leaning) using each region's start offset.

    Also fills in ``region.section``. Returns a :class:`collections.Counter`
    keyed by ``(section, leaning)``.
    """
    counts = Counter()
    for region in regions:
        region.section = offset_to_region(section_map, region.start_offset)
        counts[(region.section, region.leaning)] += 1
    return counts


def section_table_rows(counts):
    """Rows ``(section, malicious, benign)`` sorted by section name."""
    sections = sorted({s for s, _ in counts})
    return [(s, counts[(s, MALICIOUS)], counts[(s, BENIGN)]) for s in sections]


def write_section_table(counts, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["section", "malicious", "benign"])
        writer.writerows(section_table_rows(counts))


def explain_bytes(params, config, data):
    """Forward, sparse-CAM and attribution for one file's bytes.

    Returns ``(regions sorted by |contribution| desc, counts, dropped)``.
    """
    tokens, file_len = pad_or_truncate(data, config.max_len)
    trace = forward(params, config, tokens)
    regions, dropped = sparse_cam(params, config, trace, min(file_len, config.max_len))
    counts = attribute_sections(regions, parse_pe(data))
    regions.sort(key=lambda r: (-abs(r.contribution), r.start_offset))
    return regions, counts, dropped


def format_report(regions):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in regions:
        writer.writerow([r.filter_index, r.start_offset, r.width,
                         repr(r.contribution), r.leaning, r.section])
    return buf.getvalue()


def explain_report(params, config, path):
    """Explain the file at ``path``.

    Returns ``(csv_text, summary_text, regions, counts)`` where the CSV has
    columns ``filter,start,width,contribution,leaning,section``.
    """
    data = Path(path).read_bytes()
    regions, counts, dropped = explain_bytes(params, config, data)
    lines = [f"{path}: {len(regions)} regions ({dropped} in padding dropped)"]
    for r in regions[:10]:
        lines.append(f"  {r.leaning:9s} {r.contribution:+.4f}  bytes "
                     f"[{r.start_offset}, {r.start_offset + r.width})  {r.section}")
    return format_report(regions), "\n".join(lines), regions, counts
