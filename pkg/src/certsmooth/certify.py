"""
Deterministic certificates for the chunk-smoothed classifier.

A patch of p bytes can intersect at most ceil(p/z)+1 chunks, so a vote
difference of 2*delta protects against it (each touched chunk can move from
one class to the other). An inserted payload adds new chunks instead of
touching old ones, which halves the requirement to delta, provided the
payload starts on a chunk boundary. When it does not (it lands in a chunk
that ends a file part without filling it, e.g. an unaligned overlay tail)
that one original chunk is touched too and the vote difference can move by
delta+1; the margin accounts for that case per payload.

``adversary_oracle`` checks all of this by brute force over placements.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .classifiers import TrainedModel
from .errors import MismatchedZ, TooLarge, UnalignedTally, ZeroPayload
from .smoothing import BENIGN, MALICIOUS, ChunkTally, tally_chunks, vote

ORACLE_MAX_CHUNKS = 20


class AttackKind(str, Enum):
    PATCH = "patch"
    INSERTION = "insertion"


@dataclass(frozen=True)
class Certificate:
    kind: AttackKind
    z: int
    payload_sizes: tuple[int, ...]
    delta: int
    margin_required: int
    margin_actual: int
    certified: bool
    max_certified_p: int
    label: int
    patch_sizes: tuple[int, ...] = field(default=())


def delta(payload_sizes: Iterable[int], z: int) -> int:
    """Chunks that payloads of the given sizes can intersect: sum of ceil(p/z)+1."""
    if z < 1:
        raise ValueError(f"chunk size must be positive, got {z}")
    sizes = list(payload_sizes)
    if not sizes or any(p < 1 for p in sizes):
        raise ZeroPayload(f"payload sizes must all be >= 1, got {sizes}")
    return sum(-(-p // z) + 1 for p in sizes)


def margin_actual(tally: ChunkTally) -> tuple[int, int]:
    """(predicted label, n_c' - n_c'' - indicator) for a tally."""
    label = vote(tally.n_benign, tally.n_malicious)
    other = BENIGN if label == MALICIOUS else MALICIOUS
    indicator = 1 if label < other else 0
    return label, tally.count(label) - tally.count(other) - indicator


def required_margin(tally: ChunkTally, patch_sizes: Sequence[int], insertion_sizes: Sequence[int]) -> int:
    """Vote difference needed to survive the given patches and insertions together.

    Patch sizes are in original-file bytes; PREPROCESS padding can spread a
    patch over more chunks, so it is added to each patch size (a no-op when
    the file needed no padding).
    """
    z = tally.z
    need = 0
    if patch_sizes:
        need += 2 * delta([p + tally.pad_bytes for p in patch_sizes], z)
    if insertion_sizes:
        need += delta(insertion_sizes, z)
        if tally.open_chunks:
            need += min(len(insertion_sizes), len(tally.open_chunks))
    return need


def _check(tally: ChunkTally, kind: AttackKind, z: int) -> None:
    if tally.z != z:
        raise MismatchedZ(f"tally computed with z={tally.z}, certificate requested for z={z}")
    if kind is AttackKind.INSERTION and not tally.preprocessed:
        raise UnalignedTally("insertion certificates need a tally of a PREPROCESSed input")


def max_certified_p(tally: ChunkTally, kind: AttackKind) -> int:
    """Largest single payload size (bytes) the tally certifies, 0 if none."""
    _, actual = margin_actual(tally)

    def ok(p: int) -> bool:
        if kind is AttackKind.PATCH:
            return actual >= required_margin(tally, [p], [])
        return actual >= required_margin(tally, [], [p])

    if not ok(1):
        return 0
    lo, hi = 1, tally.z * (tally.n + 2)  # ok(hi) is always False: delta > n
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def certify(tally: ChunkTally, kind: AttackKind | str, payload_sizes: Sequence[int], z: int) -> Certificate:
    kind = AttackKind(kind)
    _check(tally, kind, z)
    sizes = tuple(int(p) for p in payload_sizes)
    d = delta(sizes, z)
    label, actual = margin_actual(tally)
    if kind is AttackKind.PATCH:
        need = required_margin(tally, sizes, [])
    else:
        need = required_margin(tally, [], sizes)
    return Certificate(kind, z, sizes, d, need, actual, actual >= need, max_certified_p(tally, kind), label)


def certify_mixed(tally: ChunkTally, patch_sizes: Sequence[int], insertion_sizes: Sequence[int],
                  z: int) -> Certificate:
    """Certificate against patches and insertions applied together (e.g. an
    injection that also rewrites header fields)."""
    if not insertion_sizes:
        return certify(tally, AttackKind.PATCH, patch_sizes, z)
    if not patch_sizes:
        return certify(tally, AttackKind.INSERTION, insertion_sizes, z)
    _check(tally, AttackKind.INSERTION, z)
    label, actual = margin_actual(tally)
    need = required_margin(tally, patch_sizes, insertion_sizes)
    return Certificate(AttackKind.INSERTION, z, tuple(insertion_sizes), delta(insertion_sizes, z), need, actual,
                       actual >= need, max_certified_p(tally, AttackKind.INSERTION), label, tuple(patch_sizes))


# -- brute-force adversary ---------------------------------------------------

@dataclass(frozen=True)
class OracleResult:
    label: int
    original_label: int
    placements: int
    flip: tuple | None
    max_touched: int
    max_inserted: int

    @property
    def flipped(self) -> bool:
        return self.label != self.original_label


def _patch_placements(tally: ChunkTally, p: int) -> list[frozenset[int]]:
    """Distinct sets of chunks a p-byte patch can intersect, over all start offsets."""
    z, length = tally.z, tally.length
    if p >= length:
        return [frozenset(range(tally.n))]
    seen = set()
    for start in range(0, length - p + 1):
        seen.add((start // z, (start + p - 1) // z))
    return [frozenset(range(a, b + 1)) for a, b in sorted(seen)]


def _insertion_placements(tally: ChunkTally, p: int) -> list[tuple[frozenset[int], int]]:
    """(touched original chunks, new chunks) for every admissible placement:
    any chunk boundary, or appended into an open (partially filled) chunk."""
    z = tally.z
    k = -(-p // z)
    out = [(frozenset(), k)] * (tally.n + 1)  # one per boundary 0..n
    for idx, used in tally.open_chunks:
        spill = max(0, p - (z - used))
        out.append((frozenset([idx]), -(-spill // z)))
    return out


def oracle_search(tally: ChunkTally, kind: AttackKind | str, payload_sizes: Sequence[int], z: int,
                  patch_sizes: Sequence[int] = ()) -> OracleResult:
    """Enumerate every placement of every payload and report the worst label.

    The adversary controls the label of each touched or inserted chunk. The
    vote is monotone in those labels, so assigning all of them to the
    opposite class is the worst case for each placement; enumerating the
    other 2^k assignments could not find a flip this one misses.
    For kind=insertion, ``patch_sizes`` adds patches applied alongside.
    """
    kind = AttackKind(kind)
    if tally.n > ORACLE_MAX_CHUNKS:
        raise TooLarge(f"oracle limited to {ORACLE_MAX_CHUNKS} chunks, tally has {tally.n}")
    if tally.z != z:
        raise MismatchedZ(f"tally computed with z={tally.z}, oracle requested for z={z}")
    delta(list(payload_sizes) + list(patch_sizes), z)  # validates sizes
    labels = tally.labels
    original = vote(tally.n_benign, tally.n_malicious)
    target = BENIGN if original == MALICIOUS else MALICIOUS

    if kind is AttackKind.PATCH:
        per_payload = [[(s, 0) for s in _patch_placements(tally, p)] for p in payload_sizes]
    else:
        per_payload = [[(s, 0) for s in _patch_placements(tally, p)] for p in patch_sizes]
        per_payload += [_insertion_placements(tally, p) for p in payload_sizes]

    count, worst, max_touched, max_inserted = 0, None, 0, 0
    for combo in itertools.product(*per_payload):
        count += 1
        touched = frozenset().union(*(t for t, _ in combo))
        inserted = sum(k for _, k in combo)
        max_touched, max_inserted = max(max_touched, len(touched)), max(max_inserted, inserted)
        n_target = sum(1 for i, lab in enumerate(labels) if lab == target or i in touched) + inserted
        n_orig = tally.n - sum(1 for i, lab in enumerate(labels) if lab == target or i in touched)
        counts = {target: n_target, original: n_orig}
        if vote(counts[BENIGN], counts[MALICIOUS]) != original and worst is None:
            worst = combo
    label = target if worst is not None else original
    flip = None if worst is None else tuple((tuple(sorted(t)), k) for t, k in worst)
    return OracleResult(label, original, count, flip, max_touched, max_inserted)


def adversary_oracle(tally: ChunkTally, kind: AttackKind | str, payload_sizes: Sequence[int], z: int) -> int:
    """Worst-case smoothed label over all admissible placements."""
    return oracle_search(tally, kind, payload_sizes, z).label


# -- dataset sweeps -----------------------------------------------------------

def payload_for(original_len: int, p_fraction: float) -> int:
    return max(1, math.ceil(p_fraction * original_len))


def certified_accuracy(samples: Iterable[tuple[bytes, int]], model: TrainedModel, z: int,
                       kind: AttackKind | str, p_fraction: float) -> float:
    """Fraction of files both correctly classified and certified against a
    payload of ceil(p_fraction * original size) bytes."""
    if p_fraction <= 0:
        raise ValueError("p_fraction must be positive")
    tallies = [(tally_chunks(model, data, z), len(data), y) for data, y in samples]
    return certified_accuracy_from_tallies(tallies, kind, p_fraction)


def certified_accuracy_from_tallies(tallies: Sequence[tuple[ChunkTally, int, int]], kind: AttackKind | str,
                                    p_fraction: float) -> float:
    kind = AttackKind(kind)
    if not tallies:
        return 0.0
    hits = 0
    for tally, original_len, y in tallies:
        cert = certify(tally, kind, [payload_for(original_len, p_fraction)], tally.z)
        hits += int(cert.certified and cert.label == y)
    return hits / len(tallies)


def clean_accuracy_from_tallies(tallies: Sequence[tuple[ChunkTally, int, int]]) -> float:
    if not tallies:
        return 0.0
    return sum(vote(t.n_benign, t.n_malicious) == y for t, _, y in tallies) / len(tallies)


def sweep(tallies: Sequence[tuple[ChunkTally, int, int]], kinds: Sequence[AttackKind | str],
          p_fractions: Sequence[float]) -> list[tuple[float, str, float, int]]:
    rows = []
    for kind in kinds:
        for frac in p_fractions:
            rows.append((frac, AttackKind(kind).value, certified_accuracy_from_tallies(tallies, kind, frac), len(tallies)))
    return rows


def sweep_csv(rows: Sequence[tuple[float, str, float, int]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p_fraction", "kind", "certified_accuracy", "n_files"])
    for frac, kind, acc, n in rows:
        w.writerow([f"{frac:g}", kind, f"{acc:.6f}", n])
    return buf.getvalue()
