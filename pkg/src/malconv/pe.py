"""Just enough PE/COFF to map file offsets to named regions.

``parse_pe`` never raises on malformed input: malware routinely violates the
format, so failures are reported through ``SectionMap.parse_status``.
``build_pe`` writes small but structurally valid PE32 images used by the
synthetic corpus and the tests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InputError

OK = "ok"
DEGRADED = "degraded"
UNPARSEABLE = "unparseable"

HEADER_REGION = "PE-Header"
OVERLAY_REGION = "overlay"
SLACK_REGION = "slack"
UNKNOWN_REGION = "unknown"

DOS_HEADER_SIZE = 64
E_LFANEW_OFFSET = 0x3C
COFF_HEADER_SIZE = 20
SECTION_HEADER_SIZE = 40
OPTIONAL_HEADER32_SIZE = 224
FILE_ALIGNMENT = 512
SECTION_ALIGNMENT = 4096
MAX_SECTIONS = 16

_SECTION_FORMAT = "<8sIIIIIIHHI"


@dataclass(frozen=True)
class SectionRecord:
    name: str
    raw_offset: int
    raw_size: int
    virtual_size: int

    @property
    def raw_end(self):
        return self.raw_offset + self.raw_size


@dataclass
class SectionMap:
    header_end: int
    sections: list = field(default_factory=list)
    file_len: int = 0
    parse_status: str = OK
    problems: list = field(default_factory=list)


def _decode_name(raw):
    return raw.rstrip(b"\x00").decode("latin-1")


def parse_pe(data):
    """Parse the section table of a PE file.

    Offsets read: ``MZ`` at 0, ``e_lfanew`` (u32 LE) at 0x3C, ``PE\\0\\0``
    at e_lfanew, NumberOfSections at +6, SizeOfOptionalHeader at +20, then
    40-byte section headers.
    """
    data = bytes(data)
    n = len(data)

    def unparseable(reason):
        return SectionMap(header_end=n, file_len=n, parse_status=UNPARSEABLE, problems=[reason])

    if n < DOS_HEADER_SIZE or data[:2] != b"MZ":
        return unparseable("missing MZ header")
    (pe_offset,) = struct.unpack_from("<I", data, E_LFANEW_OFFSET)
    if pe_offset + 4 + COFF_HEADER_SIZE > n:
        return unparseable("e_lfanew points past end of file")
    if data[pe_offset:pe_offset + 4] != b"PE\x00\x00":
        return unparseable("missing PE signature")

    coff = pe_offset + 4
    n_sections, = struct.unpack_from("<H", data, coff + 2)
    opt_size, = struct.unpack_from("<H", data, coff + 16)
    opt_start = coff + COFF_HEADER_SIZE
    table = opt_start + opt_size

    status, problems = OK, []
    size_of_headers = None
    if opt_size >= 64 and opt_start + 64 <= n:
        size_of_headers, = struct.unpack_from("<I", data, opt_start + 60)

    sections = []
    for i in range(n_sections):
        start = table + i * SECTION_HEADER_SIZE
        if start + SECTION_HEADER_SIZE > n:
            status = DEGRADED
            problems.append(f"section table truncated after {i} of {n_sections} entries")
            break
        name, vsize, _va, raw_size, raw_ptr = struct.unpack_from(_SECTION_FORMAT, data, start)[:5]
        record = SectionRecord(_decode_name(name), raw_ptr, raw_size, vsize)
        if record.raw_end > n:
            status = DEGRADED
            problems.append(f"section {record.name!r} raw data extends past end of file")
        sections.append(record)

    table_end = min(table + len(sections) * SECTION_HEADER_SIZE, n)
    populated = [s.raw_offset for s in sections if s.raw_size > 0 and s.raw_offset < n]
    if populated:
        header_end = min(populated)
    elif size_of_headers is not None:
        header_end = size_of_headers
    else:
        header_end = table_end
    header_end = max(0, min(header_end, n))
    return SectionMap(header_end, sections, n, status, problems)


def offset_to_region(section_map, offset):
    """Name the region that contains byte ``offset``.

    One of ``"PE-Header"``, a section name, ``"overlay"`` (past every
    section), ``"slack"`` (between sections) or ``"unknown"`` when the file
    could not be parsed.
    """
    if not 0 <= offset < section_map.file_len:
        raise InputError(f"offset {offset} outside file of length {section_map.file_len}")
    if section_map.parse_status == UNPARSEABLE:
        return UNKNOWN_REGION
    if offset < section_map.header_end:
        return HEADER_REGION
    last_end = section_map.header_end
    for s in section_map.sections:
        if s.raw_offset <= offset < s.raw_end:
            return s.name
        if s.raw_size > 0:
            last_end = max(last_end, s.raw_end)
    return OVERLAY_REGION if offset >= last_end else SLACK_REGION


def _align(value, alignment):
    return -(-value // alignment) * alignment


def build_pe(sections, seed=0, overlay=b""):
    """Emit a minimal PE32 image.

    Parameters
    ----------
    sections : list of (name, content)
        Names are str or bytes of at most 8 bytes. Raw data is zero-padded
        to a 512-byte boundary.
    seed : int
        Drives the COFF timestamp; output is a pure function of the
        arguments.
    overlay : bytes
        Appended after the last section.
    """
    if len(sections) > MAX_SECTIONS:
        raise InputError(f"at most {MAX_SECTIONS} sections supported")
    encoded = []
    for name, content in sections:
        raw_name = name.encode("latin-1") if isinstance(name, str) else bytes(name)
        if len(raw_name) > 8:
            raise InputError(f"section name {name!r} longer than 8 bytes")
        encoded.append((raw_name, bytes(content)))

    pe_offset = DOS_HEADER_SIZE
    table = pe_offset + 4 + COFF_HEADER_SIZE + OPTIONAL_HEADER32_SIZE
    size_of_headers = _align(table + len(encoded) * SECTION_HEADER_SIZE, FILE_ALIGNMENT)

    raw_ptr = size_of_headers
    rva = SECTION_ALIGNMENT
    headers, bodies = [], []
    size_of_code = size_of_data = 0
    for raw_name, content in encoded:
        raw_size = _align(len(content), FILE_ALIGNMENT)
        code = raw_name in (b".text", b"CODE")
        characteristics = 0x60000020 if code else 0x40000040
        if code:
            size_of_code += raw_size
        else:
            size_of_data += raw_size
        headers.append(struct.pack(
            _SECTION_FORMAT, raw_name, len(content), rva, raw_size,
            raw_ptr if raw_size else 0, 0, 0, 0, 0, characteristics))
        bodies.append(content.ljust(raw_size, b"\x00"))
        raw_ptr += raw_size
        rva += _align(max(len(content), 1), SECTION_ALIGNMENT)

    timestamp = int(np.random.default_rng(seed).integers(0, 2**31))
    dos = bytearray(DOS_HEADER_SIZE)
    dos[:2] = b"MZ"
    struct.pack_into("<I", dos, E_LFANEW_OFFSET, pe_offset)
    coff = struct.pack(
        "<4sHHIIIHH", b"PE\x00\x00", 0x14C, len(encoded), timestamp, 0, 0,
        OPTIONAL_HEADER32_SIZE, 0x0102)
    optional = bytearray(OPTIONAL_HEADER32_SIZE)
    struct.pack_into(
        "<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII", optional, 0,
        0x10B, 14, 0, size_of_code, size_of_data, 0,
        SECTION_ALIGNMENT if encoded else 0, SECTION_ALIGNMENT, 0,
        0x400000, SECTION_ALIGNMENT, FILE_ALIGNMENT,
        6, 0, 0, 0, 6, 0, 0,
        rva, size_of_headers, 0, 2, 0,
        0x100000, 0x1000, 0x100000, 0x1000, 0, 16)

    header = bytes(dos) + coff + bytes(optional) + b"".join(headers)
    return header.ljust(size_of_headers, b"\x00") + b"".join(bodies) + bytes(overlay)
