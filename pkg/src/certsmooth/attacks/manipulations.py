"""
Structure-preserving PE manipulations.

Each function takes a parsed image and returns an ``AttackPlan``: the
rewritten image, the byte regions an optimizer may fill, the header regions
whose structural fields changed, and the patch/insertion sizes a certificate
has to cover. Plans compose (see ``combined``); regions are always expressed
in offsets of the plan's own transformed file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .. import pe_format
from ..chunking import Relocation, num_chunks, preprocess_with_map
from ..errors import AlignmentError, NoHeaderRoom
from ..pe_format import PeImage, SectionEntry, align_up

SCN_INJECTED = 0x40000040  # initialized data, readable


class PlanKind(str, Enum):
    IDENTITY = "identity"
    PADDING_SLACK = "padding_slack"
    SHIFT = "shift"
    SECTION_INJECT = "section_inject"
    CODE_CAVES = "code_caves"
    COMBINED = "combined"


@dataclass(frozen=True)
class AttackPlan:
    kind: PlanKind
    transformed: PeImage
    writable_regions: tuple[tuple[int, int], ...]
    relocation: Relocation  # original file offsets -> transformed offsets
    base_len: int
    structural_regions: tuple[tuple[int, int], ...] = ()
    patch_sizes: tuple[int, ...] = ()
    insertion_sizes: tuple[int, ...] = ()
    provenance: dict = field(default_factory=dict)

    @property
    def n_writable(self) -> int:
        return sum(n for _, n in self.writable_regions)

    def to_bytes(self) -> bytes:
        return pe_format.serialize(self.transformed)

    def current_fill(self) -> np.ndarray:
        data = np.frombuffer(self.to_bytes(), dtype=np.uint8)
        if not self.writable_regions:
            return np.zeros(0, dtype=np.uint8)
        return np.concatenate([data[o:o + n] for o, n in self.writable_regions])

    def apply(self, fill: bytes | np.ndarray, base: bytes | None = None) -> bytes:
        """Transformed file with the writable regions overwritten by ``fill``
        (concatenated in region order)."""
        fill = np.frombuffer(fill, dtype=np.uint8) if isinstance(fill, (bytes, bytearray)) else np.asarray(fill, np.uint8)
        if fill.size != self.n_writable:
            raise ValueError(f"fill has {fill.size} bytes, plan has {self.n_writable} writable")
        out = np.frombuffer(base if base is not None else self.to_bytes(), dtype=np.uint8).copy()
        pos = 0
        for off, n in self.writable_regions:
            out[off:off + n] = fill[pos:pos + n]
            pos += n
        return out.tobytes()


def _table_region(img: PeImage) -> tuple[int, int]:
    """Everything from the PE signature to the end of the section table."""
    return (img.e_lfanew, img.section_table_end - img.e_lfanew)


def _part_relocation(old: PeImage, new: PeImage, tail_segment: tuple[int, int, int] | None = None) -> Relocation:
    """Map each part of ``old`` onto the same part of ``new`` (same section
    indices, overlay to overlay). When the section table was rewritten, only
    bytes before it map in place and ``tail_segment`` places the surviving
    header tail."""
    if tail_segment is None:
        segs = [(0, 0, old.header_block_len)]
    else:
        segs = [(0, 0, old.section_table_offset), tail_segment]
    for i in old.raw_indices():
        s_old, s_new = old.sections[i], new.sections[i]
        segs.append((s_old.pointer_to_raw_data, s_new.pointer_to_raw_data,
                     s_old.size_of_raw_data + len(old.section_gaps[i])))
    if old.overlay:
        segs.append((old.overlay_offset, new.overlay_offset, len(old.overlay)))
    return Relocation(tuple(s for s in segs if s[2] > 0))


def identity(img: PeImage) -> AttackPlan:
    return AttackPlan(PlanKind.IDENTITY, img, (), Relocation.identity(len(img)), len(img))


def padding_slack(img: PeImage, pad_bytes: int, include_slack: bool = True) -> AttackPlan:
    """Append ``pad_bytes`` zeros to the overlay and expose slack space.

    Slack is an in-place patch; the appended bytes are an insertion.
    """
    if pad_bytes < 0:
        raise ValueError("pad_bytes must be non-negative")
    regions, patches = [], []
    if include_slack:
        for r in pe_format.slack_regions(img):
            if r.length > 0:
                regions.append((r.file_offset, r.length))
                patches.append(r.length)
    old_len = len(img)
    out = img.replace(overlay=img.overlay + bytes(pad_bytes))
    if pad_bytes:
        regions.append((old_len, pad_bytes))
    return AttackPlan(
        PlanKind.PADDING_SLACK, out, tuple(regions), Relocation.identity(old_len), len(img),
        patch_sizes=tuple(patches), insertion_sizes=(pad_bytes,) if pad_bytes else (),
        provenance={"steps": [{"op": "padding_slack", "pad_bytes": pad_bytes, "include_slack": include_slack}]},
    )


def shift_sections(img: PeImage, amount: int) -> AttackPlan:
    """Open a gap of ``amount`` bytes between the headers and the first section."""
    fa = img.file_alignment
    if amount < 0 or amount % fa:
        raise AlignmentError(f"shift amount {amount} is not a non-negative multiple of file_alignment {fa}")
    prov = {"steps": [{"op": "shift", "amount": amount}]}
    if amount == 0:
        return dataclasses.replace(identity(img), kind=PlanKind.SHIFT, provenance=prov)
    gap_at = img.header_block_len
    out = pe_format.relayout(img.replace(header_tail=img.header_tail + bytes(amount)))
    return AttackPlan(
        PlanKind.SHIFT, out, ((gap_at, amount),), _part_relocation(img, out), len(img),
        structural_regions=(_table_region(out),), insertion_sizes=(amount,), provenance=prov,
    )


def extend_code_caves(img: PeImage, per_gap: int) -> AttackPlan:
    """Insert a writable gap of ``per_gap`` bytes after every section's data."""
    fa = img.file_alignment
    if per_gap < 0 or per_gap % fa:
        raise AlignmentError(f"cave size {per_gap} is not a non-negative multiple of file_alignment {fa}")
    raw = img.raw_indices()
    prov = {"steps": [{"op": "code_caves", "per_gap": per_gap, "n_gaps": len(raw) if per_gap else 0}]}
    if per_gap == 0 or not raw:
        return dataclasses.replace(identity(img), kind=PlanKind.CODE_CAVES, provenance=prov)
    gaps = list(img.section_gaps)
    for i in raw:
        gaps[i] = gaps[i] + bytes(per_gap)
    out = pe_format.relayout(img.replace(section_gaps=tuple(gaps)))
    regions = []
    for i in raw:
        s = out.sections[i]
        end = s.pointer_to_raw_data + s.size_of_raw_data + len(out.section_gaps[i])
        regions.append((end - per_gap, per_gap))
    return AttackPlan(
        PlanKind.CODE_CAVES, out, tuple(regions), _part_relocation(img, out), len(img),
        structural_regions=(_table_region(out),), insertion_sizes=(per_gap,) * len(raw), provenance=prov,
    )


def pool_content(pool: bytes | None, n: int, rng: np.random.Generator) -> bytes:
    if not pool:
        return bytes(n)
    arr = np.frombuffer(pool, dtype=np.uint8)
    out = np.empty(n, dtype=np.uint8)
    pos = 0
    while pos < n:
        take = min(n - pos, arr.size)
        start = int(rng.integers(0, arr.size - take + 1))
        out[pos:pos + take] = arr[start:start + take]
        pos += take
    return out.tobytes()


def inject_sections(img: PeImage, count: int, per_section_size: int | None = None,
                    seed_content: bytes | None = None, seed: int = 0,
                    cap_base: int | None = None, keep_header_tail: bool = False) -> AttackPlan:
    """Append ``count`` new sections filled from a benign byte pool.

    Total injected bytes stay within twice the original file size
    (``cap_base`` overrides that size when the image was already modified).
    The section table grows into zero bytes after it; if there are not
    enough (or ``keep_header_tail`` is set) the header block is grown by
    whole file-alignment units instead.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    prov = {"steps": [{"op": "section_inject", "count": count}]}
    if count == 0:
        return dataclasses.replace(identity(img), kind=PlanKind.SECTION_INJECT, provenance=prov)
    fa, sa = img.file_alignment, img.optional_header.section_alignment
    cap = 2 * (cap_base if cap_base is not None else len(img))
    per = per_section_size if per_section_size is not None else (cap // count) // fa * fa
    per = align_up(per, fa)
    if per <= 0 or per * count > cap:
        raise ValueError(f"{count} sections of {per} bytes exceed the injection cap of {cap} bytes")

    need = pe_format.SECTION_ENTRY_SIZE * count
    tail = img.header_tail
    # new entries go right after the table: reuse unused zero bytes there,
    # otherwise open fresh space and keep the old tail bytes behind it
    reuse = len(tail) >= need and not tail[:need].strip(b"\0") and not keep_header_tail
    growth = 0 if reuse else align_up(need, fa)
    opt = img.optional_header
    new_soh = opt.size_of_headers + growth
    first_va = min((s.virtual_address for s in img.sections), default=align_up(new_soh, sa))
    if align_up(new_soh, sa) > first_va:
        raise NoHeaderRoom(f"growing headers to {new_soh:#x} bytes would overlap the first section's image",
                           img.section_table_end)
    header_tail = tail[need:] if reuse else bytes(growth - need) + tail
    new_table_end = img.section_table_end + need
    if reuse:
        tail_segment = (img.section_table_end + need, new_table_end, len(tail) - need)
    else:
        tail_segment = (img.section_table_end, new_table_end + growth - need, len(tail))

    rng = np.random.default_rng(seed)
    va = max((s.virtual_address + align_up(s.mapped_size, sa) for s in img.sections), default=align_up(new_soh, sa))
    sections, data, gaps = list(img.sections), list(img.section_data), list(img.section_gaps)
    for k in range(count):
        sections.append(SectionEntry(f".inj{k}".encode(), per, va, per, 0, SCN_INJECTED))
        data.append(pool_content(seed_content, per, rng))
        gaps.append(b"")
        va += align_up(per, sa)
    out = img.replace(
        sections=tuple(sections), section_data=tuple(data), section_gaps=tuple(gaps), header_tail=header_tail,
        optional_header=dataclasses.replace(opt, size_of_headers=new_soh, size_of_image=va),
        coff_header=dataclasses.replace(img.coff_header, number_of_sections=len(sections)),
    )
    out = pe_format.relayout(out)
    regions = tuple((out.sections[i].pointer_to_raw_data, per) for i in range(len(img.sections), len(sections)))
    insertions = (per,) * count + ((growth,) if growth else ())
    prov["steps"][0].update(per_section_size=per, header_growth=growth, cap=cap)
    return AttackPlan(
        PlanKind.SECTION_INJECT, out, regions, _part_relocation(img, out, tail_segment),
        len(img), structural_regions=(_table_region(out),), insertion_sizes=insertions, provenance=prov,
    )


def compose(first: AttackPlan, second: AttackPlan, kind: PlanKind = PlanKind.COMBINED) -> AttackPlan:
    """``second`` must have been built on ``first.transformed``."""
    regions = []
    for off, n in first.writable_regions:
        mapped = second.relocation.map_region(off, n)
        if mapped is None:
            raise ValueError(f"writable region at {off:#x} is split by the second transform")
        regions.append(mapped)
    regions = tuple(sorted(regions + list(second.writable_regions)))
    structural = (_table_region(second.transformed),) if (first.structural_regions or second.structural_regions) else ()
    return AttackPlan(
        kind, second.transformed, regions, first.relocation.then(second.relocation), first.base_len,
        structural_regions=structural,
        patch_sizes=first.patch_sizes + second.patch_sizes,
        insertion_sizes=first.insertion_sizes + second.insertion_sizes,
        provenance={"steps": first.provenance.get("steps", []) + second.provenance.get("steps", [])},
    )


def combined(img: PeImage, seed_content: bytes | None = None, seed: int = 0, shift: int = 4096,
             cave: int | None = None, n_sections: int = 5, append: int = 10000) -> AttackPlan:
    """Shift by 4096, extend caves, inject five benign sections, append 10000
    bytes. The GA fill is the fifth step and happens in ``ga_optimize``."""
    base = len(img)
    cave = img.file_alignment if cave is None else cave
    plan = shift_sections(img, shift)
    plan = compose(plan, extend_code_caves(plan.transformed, cave))
    plan = compose(plan, inject_sections(plan.transformed, n_sections, seed_content=seed_content, seed=seed,
                                         cap_base=base, keep_header_tail=True))
    plan = compose(plan, padding_slack(plan.transformed, append, include_slack=False))
    return plan


def validate_plan(plan: AttackPlan) -> list[str]:
    """Problems with a plan's invariants (empty when sound)."""
    problems = [str(v) for v in pe_format.validate_structure(plan.transformed)]
    regions = sorted(plan.writable_regions)
    for (a, n), (b, _) in zip(regions, regions[1:]):
        if a + n > b:
            problems.append(f"writable regions overlap at {b:#x}")
    table_end = plan.transformed.section_table_end
    length = len(plan.transformed)
    for off, n in regions:
        if off < table_end:
            problems.append(f"writable region at {off:#x} overlaps headers")
        if off + n > length:
            problems.append(f"writable region at {off:#x} runs past end of file")
    return problems


def alignment_mismatches(original: bytes, plan: AttackPlan, z: int) -> tuple[int, int]:
    """(mismatches, checked) over chunks of the preprocessed attacked file that
    cover no writable or structural region.

    Each such chunk is mapped back through PREPROCESS and the plan's
    relocation. It must land on a chunk boundary of the preprocessed original
    and hold the same bytes there; a chunk with no source must be all zeros
    (padding added by PREPROCESS).
    """
    x_img, rel_x = preprocess_with_map(pe_format.parse(original), z)
    x = pe_format.serialize(x_img)
    y_img, rel_y = preprocess_with_map(plan.transformed, z)
    y = pe_format.serialize(y_img)
    excluded = []
    for off, n in list(plan.writable_regions) + list(plan.structural_regions):
        image = rel_y.map_region(off, n)
        if image is None:
            raise AlignmentError(f"region of {n} bytes is split by PREPROCESS", off)
        excluded.append(image)
    back = rel_y.inverse().then(plan.relocation.inverse()).then(rel_x)
    bad = checked = 0
    for c in range(num_chunks(len(y), z)):
        lo, hi = c * z, min((c + 1) * z, len(y))
        if any(o < hi and lo < o + n for o, n in excluded):
            continue
        checked += 1
        src = back.map(lo)
        if src is None:
            bad += int(bool(y[lo:hi].strip(b"\0")))
        elif src % z or x[src:src + hi - lo] != y[lo:hi]:
            bad += 1
    return bad, checked
