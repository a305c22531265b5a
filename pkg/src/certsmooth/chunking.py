"""Chunk alignment (PREPROCESS), inference-time splitting and training ablation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import pe_format
from .errors import EmptyInput
from .pe_format import PeImage

STANDARD_CHUNK_SIZES = (512, 1024, 2048, 4096)


@dataclass(frozen=True)
class ChunkSpec:
    z: int
    pad_byte: int = 0

    def __post_init__(self):
        if self.z <= 0:
            raise ValueError(f"chunk size must be positive, got {self.z}")
        if not 0 <= self.pad_byte <= 255:
            raise ValueError(f"pad byte out of range: {self.pad_byte}")


@dataclass(frozen=True)
class ChunkView:
    index: int
    payload: bytes
    start: int
    end: int

    @property
    def n_pad(self) -> int:
        """Pad bytes at the end of the payload (only the last view has any)."""
        return len(self.payload) - (self.end - self.start)


@dataclass(frozen=True)
class Relocation:
    """Maps offsets of an original file to a relocated copy, part by part.

    Each segment is ``(old_start, new_start, length)``; offsets that fall in no
    segment have no image in the new file.
    """

    segments: tuple[tuple[int, int, int], ...]

    def map(self, offset: int) -> int | None:
        for old, new, length in self.segments:
            if old <= offset < old + length:
                return new + (offset - old)
        return None

    def map_region(self, offset: int, length: int) -> tuple[int, int] | None:
        """Image of ``[offset, offset+length)`` if it lies inside one segment."""
        for old, new, seg_len in self.segments:
            if old <= offset and offset + length <= old + seg_len:
                return new + (offset - old), length
        return None

    def inverse(self) -> Relocation:
        return Relocation(tuple((new, old, length) for old, new, length in self.segments))

    def then(self, other: Relocation) -> Relocation:
        """Composition: apply self, then other."""
        out = []
        for old, mid, length in self.segments:
            for mid2, new2, length2 in other.segments:
                lo, hi = max(mid, mid2), min(mid + length, mid2 + length2)
                if lo < hi:
                    out.append((old + lo - mid, new2 + lo - mid2, hi - lo))
        return Relocation(tuple(sorted(out)))

    @classmethod
    def identity(cls, length: int) -> Relocation:
        return cls(((0, 0, length),))


def alignment_unit(img: PeImage, z: int) -> int:
    """Padding unit for PREPROCESS: a multiple of z that keeps raw pointers
    file-aligned. Equals z whenever z is a multiple of the file alignment."""
    fa = img.file_alignment
    return math.lcm(z, fa) if fa > 0 else z


def preprocess_with_map(img: PeImage, z: int) -> tuple[PeImage, Relocation]:
    if z <= 0:
        raise ValueError(f"chunk size must be positive, got {z}")
    unit = alignment_unit(img, z)
    segments = []

    header_len = img.header_block_len
    header_tail = img.header_tail + bytes(pe_format.align_up(header_len, unit) - header_len)
    segments.append((0, 0, header_len))

    gaps = list(img.section_gaps)
    new_cursor = img.section_table_end + len(header_tail)
    for i in img.raw_indices():
        s = img.sections[i]
        part_len = s.size_of_raw_data + len(gaps[i])
        segments.append((s.pointer_to_raw_data, new_cursor, part_len))
        gaps[i] = gaps[i] + bytes(pe_format.align_up(part_len, unit) - part_len)
        new_cursor += s.size_of_raw_data + len(gaps[i])
    segments.append((img.overlay_offset, new_cursor, len(img.overlay)))

    out = pe_format.relayout(img.replace(header_tail=header_tail, section_gaps=tuple(gaps)))
    return out, Relocation(tuple(segments))


def preprocess(img: PeImage, z: int) -> PeImage:
    """Zero-pad the header block and every section part to a multiple of z.

    Afterwards every section starts on a chunk boundary, so content that is
    inserted between parts never shares a chunk with original bytes. Payload
    bytes are neither removed nor reordered; the overlay is left as is.
    """
    return preprocess_with_map(img, z)[0]


def is_preprocessed(img: PeImage, z: int) -> bool:
    return all(off % z == 0 for kind, _, off, _ in img.part_extents() if kind != "header")


def num_chunks(length: int, z: int) -> int:
    return -(-length // z)


def chunk_matrix(data: bytes | np.ndarray, z: int, pad_byte: int = 0) -> np.ndarray:
    """(N, z) uint8 matrix of consecutive chunks, last row padded with pad_byte."""
    arr = np.frombuffer(data, dtype=np.uint8) if isinstance(data, (bytes, bytearray, memoryview)) else np.asarray(data, dtype=np.uint8)
    if arr.size == 0:
        raise EmptyInput("cannot split an empty byte sequence")
    n = num_chunks(arr.size, z)
    if n * z != arr.size:
        padded = np.full(n * z, pad_byte, dtype=np.uint8)
        padded[: arr.size] = arr
        arr = padded
    return arr.reshape(n, z)


def split(data: bytes, spec: ChunkSpec) -> list[ChunkView]:
    if not data:
        raise EmptyInput("cannot split an empty byte sequence")
    z = spec.z
    mat = chunk_matrix(data, z, spec.pad_byte)
    return [ChunkView(b, mat[b].tobytes(), b * z, min((b + 1) * z, len(data))) for b in range(mat.shape[0])]


def ablate_train(data: bytes, z: int, rng: np.random.Generator | int | None) -> bytes:
    """One contiguous window of min(z, len(data)) bytes with a uniform start.

    Bytes outside the window are dropped rather than masked.
    """
    if z <= 0:
        raise ValueError(f"chunk size must be positive, got {z}")
    if not data:
        raise EmptyInput("cannot ablate an empty byte sequence")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    start = int(rng.integers(0, max(len(data) - z, 0) + 1))
    return bytes(data[start:start + z])
