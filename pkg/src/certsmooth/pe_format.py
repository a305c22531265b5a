"""
Portable Executable parsing and byte-exact rewriting.

Only the file layout is modelled: DOS header, COFF header, the layout fields
of the optional header, the section table, section payloads, the gaps between
them and the overlay. Imports, relocations and resources are carried as opaque
bytes. A :class:`PeImage` is immutable; every edit returns a new image.

The file is modelled as a sequence of parts::

    header block | section 0 data | gap 0 | section 1 data | gap 1 | ... | overlay

where the header block runs from offset 0 to the first section's raw data and
each gap holds whatever bytes sit between a section's raw extent and the next
one. Serialising concatenates the parts, so ``serialize(parse(b)) == b``.
"""

from __future__ import annotations

import dataclasses
import logging
import struct
from dataclasses import dataclass, field

from .errors import LayoutConflict, Malformed, NotPe, Truncated

logger = logging.getLogger(__name__)

PE_SIGNATURE = b"PE\0\0"
PE32_MAGIC = 0x10B
PE32PLUS_MAGIC = 0x20B
COFF_SIZE = 20
SECTION_ENTRY_SIZE = 40

_COFF = struct.Struct("<HHIIIHH")
_SECTION = struct.Struct("<8sIIIIIIHHI")

# offsets inside the optional header (identical for PE32 and PE32+)
_OPT_ENTRY = 16
_OPT_SECTION_ALIGN = 32
_OPT_FILE_ALIGN = 36
_OPT_SIZE_OF_IMAGE = 56
_OPT_SIZE_OF_HEADERS = 60
_OPT_MIN_SIZE = 64


def align_up(value: int, alignment: int) -> int:
    if alignment <= 1:
        return value
    return -(-value // alignment) * alignment


@dataclass(frozen=True)
class CoffHeader:
    machine: int
    number_of_sections: int
    time_date_stamp: int
    pointer_to_symbol_table: int
    number_of_symbols: int
    size_of_optional_header: int
    characteristics: int

    def pack(self) -> bytes:
        return _COFF.pack(
            self.machine,
            self.number_of_sections,
            self.time_date_stamp,
            self.pointer_to_symbol_table,
            self.number_of_symbols,
            self.size_of_optional_header,
            self.characteristics,
        )


@dataclass(frozen=True)
class OptionalHeader:
    """Layout fields of the optional header; ``raw`` keeps every other byte."""

    magic: int
    entry_point: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    size_of_headers: int
    raw: bytes = field(repr=False)

    def pack(self) -> bytes:
        out = bytearray(self.raw)
        struct.pack_into("<I", out, _OPT_ENTRY, self.entry_point)
        struct.pack_into("<I", out, _OPT_SECTION_ALIGN, self.section_alignment)
        struct.pack_into("<I", out, _OPT_FILE_ALIGN, self.file_alignment)
        struct.pack_into("<I", out, _OPT_SIZE_OF_IMAGE, self.size_of_image)
        struct.pack_into("<I", out, _OPT_SIZE_OF_HEADERS, self.size_of_headers)
        return bytes(out)

    @property
    def is_pe32plus(self) -> bool:
        return self.magic == PE32PLUS_MAGIC


@dataclass(frozen=True)
class SectionEntry:
    name: bytes
    virtual_size: int
    virtual_address: int
    size_of_raw_data: int
    pointer_to_raw_data: int
    characteristics: int
    pointer_to_relocations: int = 0
    pointer_to_linenumbers: int = 0
    number_of_relocations: int = 0
    number_of_linenumbers: int = 0

    def pack(self) -> bytes:
        return _SECTION.pack(
            self.name.ljust(8, b"\0")[:8],
            self.virtual_size,
            self.virtual_address,
            self.size_of_raw_data,
            self.pointer_to_raw_data,
            self.pointer_to_relocations,
            self.pointer_to_linenumbers,
            self.number_of_relocations,
            self.number_of_linenumbers,
            self.characteristics,
        )

    @property
    def display_name(self) -> str:
        return self.name.rstrip(b"\0").decode("latin-1")

    @property
    def mapped_size(self) -> int:
        """Bytes the loader maps for this section (before section alignment)."""
        return self.virtual_size if self.virtual_size else self.size_of_raw_data


@dataclass(frozen=True)
class SlackRegion:
    section_index: int
    file_offset: int
    length: int


@dataclass(frozen=True)
class Violation:
    offset: int
    message: str

    def __str__(self) -> str:
        return f"0x{self.offset:08x}: {self.message}"


@dataclass(frozen=True)
class PeImage:
    dos_header: bytes
    coff_header: CoffHeader
    optional_header: OptionalHeader
    sections: tuple[SectionEntry, ...]
    header_tail: bytes
    section_data: tuple[bytes, ...]
    section_gaps: tuple[bytes, ...]
    overlay: bytes
    original_len: int

    @property
    def e_lfanew(self) -> int:
        return struct.unpack_from("<I", self.dos_header, 0x3C)[0]

    @property
    def file_alignment(self) -> int:
        return self.optional_header.file_alignment

    @property
    def section_table_offset(self) -> int:
        return self.e_lfanew + 4 + COFF_SIZE + self.coff_header.size_of_optional_header

    @property
    def section_table_end(self) -> int:
        return self.section_table_offset + SECTION_ENTRY_SIZE * len(self.sections)

    @property
    def header_block_len(self) -> int:
        return self.section_table_end + len(self.header_tail)

    def raw_indices(self) -> list[int]:
        """Indices of sections that occupy file space, in file order."""
        return [i for i, s in enumerate(self.sections) if s.size_of_raw_data > 0]

    def part_extents(self) -> list[tuple[str, int, int, int]]:
        """(kind, index, offset, length) of every part; gaps are folded into
        the section that precedes them."""
        out = [("header", -1, 0, self.header_block_len)]
        for i in self.raw_indices():
            s = self.sections[i]
            out.append(("section", i, s.pointer_to_raw_data, s.size_of_raw_data + len(self.section_gaps[i])))
        end = out[-1][2] + out[-1][3]
        out.append(("overlay", -1, end, len(self.overlay)))
        return out

    @property
    def overlay_offset(self) -> int:
        return self.part_extents()[-1][2]

    def __len__(self) -> int:
        return self.overlay_offset + len(self.overlay)

    def replace(self, **changes) -> PeImage:
        return dataclasses.replace(self, **changes)


def _u16(data: bytes, off: int) -> int:
    return struct.unpack_from("<H", data, off)[0]


def _u32(data: bytes, off: int) -> int:
    return struct.unpack_from("<I", data, off)[0]


def parse(data: bytes) -> PeImage:
    data = bytes(data)
    n = len(data)
    if n < 2 or data[:2] != b"MZ":
        raise NotPe("missing MZ signature", 0)
    if n < 64:
        raise Truncated(f"file is {n} bytes, shorter than a DOS header", 0)
    e_lfanew = _u32(data, 0x3C)
    if e_lfanew < 0x40 or e_lfanew + 4 + COFF_SIZE > n:
        raise Truncated(f"no PE header reachable at e_lfanew={e_lfanew:#x}", 0x3C)
    if data[e_lfanew:e_lfanew + 4] != PE_SIGNATURE:
        raise NotPe("missing PE signature", e_lfanew)

    coff_off = e_lfanew + 4
    coff = CoffHeader(*_COFF.unpack_from(data, coff_off))
    opt_off = coff_off + COFF_SIZE
    if coff.size_of_optional_header == 0:
        raise NotPe("object file without optional header", coff_off + 16)
    if coff.size_of_optional_header < _OPT_MIN_SIZE:
        raise Malformed(f"optional header too small ({coff.size_of_optional_header} bytes)", coff_off + 16)
    if opt_off + coff.size_of_optional_header > n:
        raise Truncated("optional header runs past end of file", opt_off)
    raw_opt = data[opt_off:opt_off + coff.size_of_optional_header]
    magic = _u16(raw_opt, 0)
    if magic not in (PE32_MAGIC, PE32PLUS_MAGIC):
        raise Malformed(f"unknown optional header magic {magic:#x}", opt_off)
    opt = OptionalHeader(
        magic=magic,
        entry_point=_u32(raw_opt, _OPT_ENTRY),
        section_alignment=_u32(raw_opt, _OPT_SECTION_ALIGN),
        file_alignment=_u32(raw_opt, _OPT_FILE_ALIGN),
        size_of_image=_u32(raw_opt, _OPT_SIZE_OF_IMAGE),
        size_of_headers=_u32(raw_opt, _OPT_SIZE_OF_HEADERS),
        raw=raw_opt,
    )

    table_off = opt_off + coff.size_of_optional_header
    table_end = table_off + SECTION_ENTRY_SIZE * coff.number_of_sections
    if table_end > n:
        raise Truncated("section table runs past end of file", table_off)
    sections = []
    for i in range(coff.number_of_sections):
        fields = _SECTION.unpack_from(data, table_off + SECTION_ENTRY_SIZE * i)
        (name, vsize, va, raw_size, raw_ptr, p_reloc, p_line, n_reloc, n_line, chars) = fields
        sections.append(SectionEntry(name, vsize, va, raw_size, raw_ptr, chars, p_reloc, p_line, n_reloc, n_line))

    raw_idx = [i for i, s in enumerate(sections) if s.size_of_raw_data > 0]
    for i in raw_idx:
        s = sections[i]
        if s.pointer_to_raw_data + s.size_of_raw_data > n:
            raise Truncated(
                f"section {s.display_name!r} raw extent ends at {s.pointer_to_raw_data + s.size_of_raw_data:#x}"
                f" past end of file ({n:#x})",
                table_off + SECTION_ENTRY_SIZE * i,
            )
    prev_end = table_end
    for i in raw_idx:
        s = sections[i]
        if s.pointer_to_raw_data < prev_end:
            raise Malformed(
                f"section {s.display_name!r} at {s.pointer_to_raw_data:#x} overlaps preceding data ending at {prev_end:#x}",
                table_off + SECTION_ENTRY_SIZE * i + 20,
            )
        prev_end = s.pointer_to_raw_data + s.size_of_raw_data

    first_raw = sections[raw_idx[0]].pointer_to_raw_data if raw_idx else max(table_end, min(opt.size_of_headers, n))
    header_tail = data[table_end:first_raw]

    section_data = [b""] * len(sections)
    gaps = [b""] * len(sections)
    for k, i in enumerate(raw_idx):
        s = sections[i]
        start, end = s.pointer_to_raw_data, s.pointer_to_raw_data + s.size_of_raw_data
        section_data[i] = data[start:end]
        if k + 1 < len(raw_idx):
            gaps[i] = data[end:sections[raw_idx[k + 1]].pointer_to_raw_data]
    overlay = data[prev_end if raw_idx else first_raw:]

    img = PeImage(
        dos_header=data[:e_lfanew],
        coff_header=coff,
        optional_header=opt,
        sections=tuple(sections),
        header_tail=header_tail,
        section_data=tuple(section_data),
        section_gaps=tuple(gaps),
        overlay=overlay,
        original_len=n,
    )
    logger.debug("parsed PE: %d sections, overlay %d bytes", len(sections), len(overlay))
    return img


def serialize(img: PeImage) -> bytes:
    out = bytearray(img.dos_header)
    out += PE_SIGNATURE
    out += dataclasses.replace(img.coff_header, number_of_sections=len(img.sections)).pack()
    out += img.optional_header.pack()
    for s in img.sections:
        out += s.pack()
    out += img.header_tail
    for i in img.raw_indices():
        s = img.sections[i]
        if s.pointer_to_raw_data != len(out):
            raise LayoutConflict(
                f"section {s.display_name!r} expects raw data at {s.pointer_to_raw_data:#x}, layout places it at {len(out):#x}",
                s.pointer_to_raw_data,
            )
        if len(img.section_data[i]) != s.size_of_raw_data:
            raise LayoutConflict(f"section {s.display_name!r} payload length differs from size_of_raw_data", s.pointer_to_raw_data)
        out += img.section_data[i]
        out += img.section_gaps[i]
    out += img.overlay
    return bytes(out)


def relayout(img: PeImage) -> PeImage:
    """Recompute every raw pointer so sections follow each other in part order.

    Used after edits that change part lengths (header growth, gap insertion).
    Zero-length sections keep their pointer untouched.
    """
    cursor = img.header_block_len
    sections = list(img.sections)
    for i in img.raw_indices():
        sections[i] = dataclasses.replace(sections[i], pointer_to_raw_data=cursor)
        cursor += sections[i].size_of_raw_data + len(img.section_gaps[i])
    return img.replace(sections=tuple(sections))


def slack_regions(img: PeImage) -> list[SlackRegion]:
    regions = []
    for i in img.raw_indices():
        s = img.sections[i]
        # virtual_size == 0 means the loader maps the whole raw extent: no slack
        if 0 < s.virtual_size < s.size_of_raw_data:
            regions.append(SlackRegion(i, s.pointer_to_raw_data + s.virtual_size, s.size_of_raw_data - s.virtual_size))
    return regions


def _is_pow2(v: int) -> bool:
    return v > 0 and v & (v - 1) == 0


def validate_structure(img: PeImage) -> list[Violation]:
    """Structural checks a loader would care about. Empty list means valid."""
    v: list[Violation] = []
    opt = img.optional_header
    opt_off = img.e_lfanew + 4 + COFF_SIZE
    table_off = img.section_table_offset
    fa, sa = opt.file_alignment, opt.section_alignment

    if img.coff_header.number_of_sections != len(img.sections):
        v.append(Violation(img.e_lfanew + 6, "number_of_sections does not match section table"))
    if not _is_pow2(fa):
        v.append(Violation(opt_off + _OPT_FILE_ALIGN, f"file_alignment {fa:#x} is not a power of two"))
    if not _is_pow2(sa) or sa < fa:
        v.append(Violation(opt_off + _OPT_SECTION_ALIGN, f"section_alignment {sa:#x} invalid for file_alignment {fa:#x}"))
    if _is_pow2(fa) and opt.size_of_headers % fa:
        v.append(Violation(opt_off + _OPT_SIZE_OF_HEADERS, "size_of_headers not a multiple of file_alignment"))
    if opt.size_of_headers < img.section_table_end:
        v.append(Violation(opt_off + _OPT_SIZE_OF_HEADERS, "size_of_headers smaller than header structures"))

    file_len = len(img)
    raw = img.raw_indices()
    if raw and opt.size_of_headers > img.sections[raw[0]].pointer_to_raw_data:
        v.append(Violation(opt_off + _OPT_SIZE_OF_HEADERS, "size_of_headers overlaps first section"))

    prev_end = img.section_table_end
    for i in raw:
        s = img.sections[i]
        entry_off = table_off + SECTION_ENTRY_SIZE * i
        if _is_pow2(fa) and s.pointer_to_raw_data % fa:
            v.append(Violation(entry_off + 20, f"section {s.display_name!r} raw pointer not file-aligned"))
        if s.pointer_to_raw_data < prev_end:
            v.append(Violation(entry_off + 20, f"section {s.display_name!r} overlaps preceding data"))
        if s.pointer_to_raw_data + s.size_of_raw_data > file_len:
            v.append(Violation(entry_off + 16, f"section {s.display_name!r} raw extent past end of file"))
        prev_end = max(prev_end, s.pointer_to_raw_data + s.size_of_raw_data)

    prev_vend = align_up(opt.size_of_headers, sa) if _is_pow2(sa) else opt.size_of_headers
    for i, s in enumerate(img.sections):
        entry_off = table_off + SECTION_ENTRY_SIZE * i
        if _is_pow2(sa) and s.virtual_address % sa:
            v.append(Violation(entry_off + 12, f"section {s.display_name!r} virtual address not section-aligned"))
        if s.virtual_address < prev_vend:
            v.append(Violation(entry_off + 12, f"section {s.display_name!r} virtual range overlaps preceding section"))
        prev_vend = s.virtual_address + align_up(s.mapped_size, sa)
    if opt.size_of_image < prev_vend:
        v.append(Violation(opt_off + _OPT_SIZE_OF_IMAGE, "size_of_image smaller than mapped sections"))

    ep = opt.entry_point
    if not any(s.virtual_address <= ep < s.virtual_address + s.mapped_size for s in img.sections):
        v.append(Violation(opt_off + _OPT_ENTRY, "entry point unmapped"))
    return v


def format_violations(violations: list[Violation]) -> str:
    return "".join(f"{x}\n" for x in violations)
