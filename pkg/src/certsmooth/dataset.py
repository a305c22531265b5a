"""
Corpus handling: JSONL manifests, timestamp splits and a synthetic PE corpus.

The synthetic generator stands in for a real malware corpus. Each file is a
structurally valid PE32 (or PE32+) image whose sections are filled with
blocks of class-specific content: benign files get low-entropy structured
filler (ASCII text, a small "benign opcode" vocabulary, sparse integer
tables); malicious files replace most blocks with high-entropy or "malicious
opcode" content and carry a fixed 64-byte motif planted 1-4 times. Every
layout fact the tests need (section offsets, slack, motif offsets) is written
to a ground-truth JSONL next to the manifest.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import pe_format
from .errors import HashMismatch, IoFailure, OversizeFile

logger = logging.getLogger(__name__)

LABELS = ("benign", "malicious")
DEFAULT_SIZE_CAP = 1 << 20
BASE_TIMESTAMP = 1565000000  # August 2019

BENIGN_MOTIF = bytes((i * 37 + 11) % 96 + 32 for i in range(64))
MALICIOUS_MOTIF = bytes((i * 113 + 7) % 128 + 128 for i in range(64))

_BENIGN_OPS = [
    b"\x55", b"\x8b\xec", b"\x83\xec\x10", b"\x8b\x45\x08", b"\x89\x45\xfc", b"\x8b\x4d\x0c",
    b"\x50", b"\x51", b"\x52", b"\x53", b"\x56", b"\x57", b"\x5f", b"\x5e", b"\x5b", b"\x5d",
    b"\xc3", b"\x33\xc0", b"\x85\xc0", b"\x74\x05", b"\x75\x0a", b"\x6a\x00", b"\x6a\x01",
    b"\xe8\x10\x00\x00\x00", b"\x8d\x45\xf8", b"\x03\xc1", b"\x2b\xc2", b"\x3b\xc1", b"\x90",
]
_MALICIOUS_OPS = [
    b"\x31\xc9", b"\x80\x34\x0e\xaa", b"\x41", b"\x81\xf9\xff\x00\x00\x00", b"\x7c\xf4",
    b"\x0f\xa2", b"\xf7\xd0", b"\xd3\xc8", b"\xc1\xc0\x0d", b"\x64\xa1\x30\x00\x00\x00",
    b"\x8b\x40\x0c", b"\xad", b"\x96", b"\xff\xd0", b"\xeb\xfe", b"\xcd\x2e", b"\x0f\x34",
    b"\xf3\xa4", b"\xfc", b"\x60", b"\x61", b"\x9c", b"\x9d",
]
_WORDS = (
    b"the of and to in is for on with as by at from file error data system window message "
    b"user value string version library module resource table function return status open "
    b"close read write create delete copy program service config path name size count"
).split()


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    sha256: str
    label: str
    family: str | None
    timestamp: int
    size_bytes: int

    @property
    def y(self) -> int:
        return LABELS.index(self.label)


@dataclass
class CorpusSpec:
    n_benign: int = 50
    n_malicious: int = 50
    size_range: tuple[int, int] = (4096, 65536)
    n_sections_range: tuple[int, int] = (2, 5)
    malicious_block_ratio: tuple[float, float] = (0.8, 1.0)
    motif_plants: tuple[int, int] = (1, 4)
    slack_max: int = 300
    overlay_prob: float = 0.0
    overlay_range: tuple[int, int] = (16, 2048)
    file_alignment: int = 512
    section_alignment: int = 4096
    pe32plus_prob: float = 0.0
    seed: int = 0
    benign_motif: bytes = BENIGN_MOTIF
    malicious_motif: bytes = MALICIOUS_MOTIF

    def __post_init__(self):
        if self.n_benign < 0 or self.n_malicious < 0:
            raise ValueError("class counts must be non-negative")
        if not 0 < self.size_range[0] <= self.size_range[1]:
            raise ValueError("invalid size range")
        if set(self.benign_motif) & set(self.malicious_motif):
            raise ValueError("class motifs must use disjoint byte values")


@dataclass
class Dataset:
    root: Path
    entries: list[ManifestEntry]
    rejected: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def read(self, entry: ManifestEntry) -> bytes:
        return (self.root / entry.path).read_bytes()

    def samples(self) -> Iterator[tuple[bytes, int]]:
        for e in self.entries:
            yield self.read(e), e.y

    def subset(self, entries: list[ManifestEntry]) -> Dataset:
        return Dataset(self.root, list(entries))

    def by_label(self, label: str) -> Dataset:
        return self.subset([e for e in self.entries if e.label == label])


# -- manifest I/O ------------------------------------------------------------

def write_manifest(entries: list[ManifestEntry], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(asdict(e), sort_keys=True) + "\n")


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                entry = ManifestEntry(**raw)
            except (json.JSONDecodeError, TypeError) as exc:
                raise IoFailure(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
            if entry.label not in LABELS:
                raise IoFailure(f"{path}:{lineno}: unknown label {entry.label!r}")
            entries.append(entry)
    return entries


def ingest(directory: str | os.PathLike, manifest_path: str | os.PathLike,
           size_cap: int = DEFAULT_SIZE_CAP, strict: bool = True) -> Dataset:
    """Load a manifest and check every file's hash and size.

    With ``strict`` the first bad entry raises; otherwise bad entries are
    collected in ``Dataset.rejected`` and left out.
    """
    root = Path(directory)
    good, rejected = [], []
    for e in read_manifest(manifest_path):
        path = root / e.path
        try:
            if path.stat().st_size > size_cap:
                raise OversizeFile(f"{e.path}: {path.stat().st_size} bytes exceeds cap of {size_cap}")
            data = path.read_bytes()
            digest = hashlib.sha256(data).hexdigest()
            if digest != e.sha256:
                raise HashMismatch(f"{e.path}: sha256 {digest} does not match manifest {e.sha256}")
        except (HashMismatch, OversizeFile) as exc:
            if strict:
                raise
            rejected.append((e.path, str(exc)))
            continue
        except OSError as exc:
            if strict:
                raise IoFailure(f"{e.path}: {exc}") from exc
            rejected.append((e.path, str(exc)))
            continue
        good.append(e)
    for path, reason in rejected:
        logger.warning("rejected %s: %s", path, reason)
    return Dataset(root, good, rejected)


def split_by_time(dataset: Dataset, train_frac: float, val_frac: float) -> tuple[Dataset, Dataset, Dataset]:
    """Oldest files to train, then validation, newest to test."""
    if train_frac < 0 or val_frac < 0 or train_frac + val_frac >= 1:
        raise ValueError("fractions must be non-negative and sum to less than 1")
    ordered = sorted(dataset.entries, key=lambda e: (e.timestamp, e.sha256))
    n = len(ordered)
    n_train = int(n * train_frac + 1e-9)
    n_val = int(n * val_frac + 1e-9)
    return (
        dataset.subset(ordered[:n_train]),
        dataset.subset(ordered[n_train:n_train + n_val]),
        dataset.subset(ordered[n_train + n_val:]),
    )


# -- synthetic PE construction -----------------------------------------------

_DOS_STUB = (
    b"\x0e\x1f\xba\x0e\x00\xb4\x09\xcd\x21\xb8\x01\x4c\xcd\x21"
    b"This program cannot be run in DOS mode.\r\r\n$"
)
SCN_CODE = 0x60000020
SCN_RDATA = 0x40000040
SCN_DATA = 0xC0000040


@dataclass
class SectionSpec:
    name: bytes
    data: bytes
    virtual_size: int
    characteristics: int = SCN_DATA


def build_pe(sections: list[SectionSpec], *, file_alignment: int = 512, section_alignment: int = 4096,
             pe32plus: bool = False, entry_section: int = 0, overlay: bytes = b"",
             timestamp: int = BASE_TIMESTAMP, header_size: int | None = None) -> bytes:
    """Assemble a PE image. Section payloads are zero-padded to file alignment.

    ``header_size`` overrides size_of_headers (must cover the section table).
    """
    e_lfanew = 0x80
    opt_size = 0xF0 if pe32plus else 0xE0
    table_end = e_lfanew + 4 + 20 + opt_size + 40 * len(sections)
    size_of_headers = header_size if header_size is not None else pe_format.align_up(table_end, file_alignment)
    if size_of_headers < table_end:
        raise ValueError("header_size smaller than header structures")

    dos = bytearray(e_lfanew)
    dos[:2] = b"MZ"
    struct.pack_into("<HHHHH", dos, 2, 0x90, 3, 0, 4, 0)
    struct.pack_into("<I", dos, 0x3C, e_lfanew)
    dos[0x40:0x40 + len(_DOS_STUB)] = _DOS_STUB

    entries, payloads = [], []
    raw_ptr = size_of_headers
    va = pe_format.align_up(size_of_headers, section_alignment)
    for s in sections:
        raw = s.data + bytes(pe_format.align_up(len(s.data), file_alignment) - len(s.data))
        entries.append(pe_format.SectionEntry(s.name, s.virtual_size, va, len(raw), raw_ptr if raw else 0, s.characteristics))
        payloads.append(raw)
        raw_ptr += len(raw)
        va += pe_format.align_up(max(s.virtual_size, len(raw)), section_alignment)
    size_of_image = va

    machine, characteristics = (0x8664, 0x0022) if pe32plus else (0x014C, 0x0102)
    coff = pe_format.CoffHeader(machine, len(sections), timestamp & 0xFFFFFFFF, 0, 0, opt_size, characteristics)
    opt = bytearray(opt_size)
    struct.pack_into("<HBB", opt, 0, pe_format.PE32PLUS_MAGIC if pe32plus else pe_format.PE32_MAGIC, 14, 0)
    code_size = sum(len(p) for p, s in zip(payloads, sections) if s.characteristics & 0x20)
    struct.pack_into("<III", opt, 4, code_size, sum(len(p) for p in payloads) - code_size, 0)
    entry = entries[entry_section].virtual_address if entries else 0
    struct.pack_into("<II", opt, 16, entry, entries[0].virtual_address if entries else 0)
    if pe32plus:
        struct.pack_into("<Q", opt, 24, 0x140000000)
    else:
        struct.pack_into("<II", opt, 24, entries[-1].virtual_address if entries else 0, 0x400000)
    struct.pack_into("<II", opt, 32, section_alignment, file_alignment)
    struct.pack_into("<HHHHHH", opt, 40, 6, 0, 0, 0, 6, 0)
    struct.pack_into("<III", opt, 56, size_of_image, size_of_headers, 0)
    struct.pack_into("<HH", opt, 68, 2, 0x8140)
    if pe32plus:
        struct.pack_into("<QQQQII", opt, 72, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
    else:
        struct.pack_into("<IIIIII", opt, 72, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16)

    out = bytearray(dos) + pe_format.PE_SIGNATURE + coff.pack() + opt
    for e in entries:
        out += e.pack()
    out += bytes(size_of_headers - len(out))
    for p in payloads:
        out += p
    out += overlay
    return bytes(out)


def _benign_block(rng: np.random.Generator, length: int, flavor: str) -> bytes:
    out = bytearray()
    if flavor == "text":
        while len(out) < length:
            out += _WORDS[rng.integers(len(_WORDS))] + (b"\n" if rng.random() < 0.08 else b" ")
    elif flavor == "table":
        vals = rng.geometric(0.05, size=length // 4 + 1).astype("<u4")
        out += vals.tobytes()
    else:
        while len(out) < length:
            out += _BENIGN_OPS[rng.integers(len(_BENIGN_OPS))]
    return bytes(out[:length])


def _malicious_block(rng: np.random.Generator, length: int) -> bytes:
    if rng.random() < 0.5:
        return rng.integers(0, 256, size=length, dtype=np.uint8).tobytes()
    out = bytearray()
    while len(out) < length:
        out += _MALICIOUS_OPS[rng.integers(len(_MALICIOUS_OPS))]
    return bytes(out[:length])


_SECTION_LAYOUT = [
    (b".text", SCN_CODE, "code"),
    (b".rdata", SCN_RDATA, "text"),
    (b".data", SCN_DATA, "table"),
    (b".rsrc", SCN_RDATA, "text"),
    (b".reloc", SCN_RDATA, "table"),
]


def _fill(rng: np.random.Generator, length: int, flavor: str, malicious_ratio: float) -> bytes:
    out = bytearray()
    while len(out) < length:
        n = int(rng.integers(256, 2049))
        if rng.random() < malicious_ratio:
            out += _malicious_block(rng, n)
        else:
            out += _benign_block(rng, n, flavor)
    return bytes(out[:length])


def synth_file(spec: CorpusSpec, label: str, rng: np.random.Generator, timestamp: int) -> tuple[bytes, dict]:
    """One synthetic PE plus its ground-truth layout record."""
    fa = spec.file_alignment
    malicious = label == "malicious"
    ratio = float(rng.uniform(*spec.malicious_block_ratio)) if malicious else 0.0
    n_sec = int(rng.integers(spec.n_sections_range[0], spec.n_sections_range[1] + 1))
    target = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
    body = max(target - 1024, n_sec * fa)
    weights = rng.dirichlet(np.ones(n_sec))
    raw_sizes = [max(fa, pe_format.align_up(int(w * body), fa)) for w in weights]

    sections, motif_sites = [], []
    motif = spec.malicious_motif if malicious else spec.benign_motif
    n_plants = int(rng.integers(spec.motif_plants[0], spec.motif_plants[1] + 1))
    plant_in = rng.integers(0, n_sec, size=n_plants)
    for i, raw in enumerate(raw_sizes):
        name, chars, flavor = _SECTION_LAYOUT[i % len(_SECTION_LAYOUT)]
        slack = int(rng.integers(0, min(spec.slack_max, raw - 64) + 1)) if spec.slack_max else 0
        vsize = raw - slack
        data = bytearray(_fill(rng, vsize, flavor, ratio))
        for _ in range(int(np.sum(plant_in == i))):
            if vsize >= len(motif):
                off = int(rng.integers(0, vsize - len(motif) + 1))
                data[off:off + len(motif)] = motif
                motif_sites.append((i, off))
        sections.append(SectionSpec(name, bytes(data), vsize, chars))

    overlay = b""
    if rng.random() < spec.overlay_prob:
        n = int(rng.integers(spec.overlay_range[0], spec.overlay_range[1] + 1))
        overlay = _fill(rng, n, "text", ratio)
    pe32plus = bool(rng.random() < spec.pe32plus_prob)
    blob = build_pe(sections, file_alignment=fa, section_alignment=spec.section_alignment,
                    pe32plus=pe32plus, overlay=overlay, timestamp=timestamp)

    img = pe_format.parse(blob)
    # motifs may be overwritten by later plants; keep only those still present
    motifs = sorted({img.sections[i].pointer_to_raw_data + off for i, off in motif_sites
                     if blob[img.sections[i].pointer_to_raw_data + off:][:len(motif)] == motif})
    record = {
        "label": label,
        "size": len(blob),
        "pe32plus": pe32plus,
        "malicious_block_ratio": ratio,
        "file_alignment": fa,
        "size_of_headers": img.optional_header.size_of_headers,
        "number_of_sections": len(img.sections),
        "entry_point": img.optional_header.entry_point,
        "sections": [
            {"name": s.display_name, "pointer_to_raw_data": s.pointer_to_raw_data,
             "size_of_raw_data": s.size_of_raw_data, "virtual_size": s.virtual_size,
             "virtual_address": s.virtual_address}
            for s in img.sections
        ],
        "slack": [asdict(r) for r in pe_format.slack_regions(img)],
        "motif": motif.hex(),
        "motif_offsets": motifs,
        "overlay_offset": img.overlay_offset,
        "overlay_len": len(img.overlay),
    }
    return blob, record


def generate_corpus(spec: CorpusSpec, out_dir: str | os.PathLike) -> list[ManifestEntry]:
    """Write files, ``manifest.jsonl`` and ``ground_truth.jsonl`` under out_dir."""
    out = Path(out_dir)
    try:
        (out / "files").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    rng = np.random.default_rng(spec.seed)
    labels = ["benign"] * spec.n_benign + ["malicious"] * spec.n_malicious
    order = rng.permutation(len(labels))
    entries, truth = [], []
    for k, idx in enumerate(order):
        label = labels[idx]
        timestamp = BASE_TIMESTAMP + int(rng.integers(0, 400 * 86400))
        blob, record = synth_file(spec, label, rng, timestamp)
        digest = hashlib.sha256(blob).hexdigest()
        rel = f"files/{k:05d}_{label[:3]}.exe"
        try:
            (out / rel).write_bytes(blob)
        except OSError as exc:
            raise IoFailure(f"cannot write {rel}: {exc}") from exc
        family = "synthetic" if label == "malicious" else None
        entries.append(ManifestEntry(rel, digest, label, family, timestamp, len(blob)))
        truth.append({"path": rel, "sha256": digest, **record})
    write_manifest(entries, out / "manifest.jsonl")
    with open(out / "ground_truth.jsonl", "w", encoding="utf-8") as fh:
        for t in truth:
            fh.write(json.dumps(t, sort_keys=True) + "\n")
    logger.info("generated %d files in %s", len(entries), out)
    return entries


def read_ground_truth(path: str | os.PathLike) -> dict[str, dict]:
    with open(path, encoding="utf-8") as fh:
        return {r["path"]: r for r in map(json.loads, filter(str.strip, fh))}


def separability(dataset: Dataset, ridge: float = 1e-3) -> float:
    """Training accuracy of a closed-form linear discriminant on full-file
    byte histograms (Fisher LDA with a ridge term)."""
    feats, ys = [], []
    for data, y in dataset.samples():
        arr = np.frombuffer(data, dtype=np.uint8)
        feats.append(np.bincount(arr, minlength=256) / arr.size)
        ys.append(y)
    x, y = np.array(feats), np.array(ys)
    if len(set(ys)) < 2:
        raise ValueError("separability needs both classes")
    mu0, mu1 = x[y == 0].mean(0), x[y == 1].mean(0)
    cov = np.cov(x[y == 0], rowvar=False) + np.cov(x[y == 1], rowvar=False) + ridge * np.eye(x.shape[1])
    w = np.linalg.solve(cov, mu1 - mu0)
    threshold = 0.5 * (mu0 + mu1) @ w
    return float(np.mean((x @ w > threshold) == (y == 1)))
