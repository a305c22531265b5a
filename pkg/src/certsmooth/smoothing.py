"""
The smoothed classifier: score every chunk, count votes, break ties toward
malicious. Also hosts the two randomized-smoothing baselines (byte ablation
and byte deletion), which vote over noisy copies scored by a whole-file model.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import chunking, pe_format
from .classifiers import PAD_TOKEN, InputMode, TrainedModel, as_tokens
from .errors import ModelChunkMismatch

BENIGN, MALICIOUS = 0, 1
LABEL_NAMES = ("benign", "malicious")


@dataclass(frozen=True)
class ChunkTally:
    """Per-chunk votes over a (normally preprocessed) file.

    ``open_chunks`` lists ``(index, used_bytes)`` for chunks that end a file
    part without filling it; bytes appended to that part would land in the
    same chunk. ``pad_bytes`` is the zero padding PREPROCESS added.
    """

    n: int
    n_benign: int
    n_malicious: int
    per_chunk: tuple[tuple[int, int, float], ...]
    z: int
    preprocessed: bool = True
    open_chunks: tuple[tuple[int, int], ...] = ()
    pad_bytes: int = 0

    def __post_init__(self):
        if self.n_benign < 0 or self.n_malicious < 0 or self.n_benign + self.n_malicious != self.n:
            raise ValueError(f"inconsistent tally: {self.n_benign}+{self.n_malicious} != {self.n}")

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(lab for _, lab, _ in self.per_chunk)

    @property
    def scores(self) -> np.ndarray:
        return np.array([s for _, _, s in self.per_chunk], dtype=np.float64)

    @property
    def length(self) -> int:
        """Byte length of the chunked sequence (last chunk may be partial)."""
        last = dict(self.open_chunks).get(self.n - 1, self.z)
        return (self.n - 1) * self.z + last

    def count(self, label: int) -> int:
        return self.n_malicious if label == MALICIOUS else self.n_benign

    @classmethod
    def from_scores(cls, scores: Sequence[float] | np.ndarray, z: int, *, preprocessed: bool = True,
                    length: int | None = None, open_chunks: tuple[tuple[int, int], ...] | None = None,
                    pad_bytes: int = 0) -> ChunkTally:
        """Build a tally. Without explicit ``open_chunks`` only a partial last
        chunk (derived from ``length``) is considered open."""
        scores = np.asarray(scores, dtype=np.float64)
        labels = (scores >= 0.5).astype(int)
        n_m = int(labels.sum())
        if open_chunks is None:
            tail = z if length is None else length - (len(scores) - 1) * z
            open_chunks = ((len(scores) - 1, tail),) if tail % z else ()
        per = tuple((i, int(lab), float(s)) for i, (lab, s) in enumerate(zip(labels, scores)))
        return cls(len(scores), len(scores) - n_m, n_m, per, z, preprocessed, tuple(open_chunks), pad_bytes)

    @classmethod
    def from_labels(cls, labels: Sequence[int], z: int, *, preprocessed: bool = True,
                    tail_bytes: int | None = None) -> ChunkTally:
        """Tally with synthetic scores (1.0 / 0.0); handy for certificate tests."""
        scores = [1.0 if lab else 0.0 for lab in labels]
        length = None if tail_bytes is None else (len(labels) - 1) * z + tail_bytes
        return cls.from_scores(scores, z, preprocessed=preprocessed, length=length)


def vote(n_benign: int, n_malicious: int) -> int:
    """Majority vote, ties go to malicious (the larger class index)."""
    return MALICIOUS if n_malicious >= n_benign else BENIGN


@dataclass(frozen=True)
class SmoothedPrediction:
    label: int
    tally: ChunkTally

    @property
    def prob_malicious(self) -> float:
        return self.tally.n_malicious / self.tally.n

    @property
    def label_name(self) -> str:
        return LABEL_NAMES[self.label]


def prediction_from_tally(tally: ChunkTally) -> SmoothedPrediction:
    return SmoothedPrediction(vote(tally.n_benign, tally.n_malicious), tally)


def preprocessed_bytes(data: bytes, z: int) -> bytes:
    return pe_format.serialize(chunking.preprocess(pe_format.parse(data), z))


def _open_chunks(reloc: chunking.Relocation, z: int) -> tuple[tuple[int, int], ...]:
    out = []
    for _, new, length in reloc.segments:
        if length and length % z:
            end = new + length
            out.append(((end - 1) // z, end - ((end - 1) // z) * z))
    return tuple(out)


def chunk_scores(model: TrainedModel, data: bytes, z: int) -> tuple[np.ndarray, bytes]:
    """Scores for every chunk of the preprocessed file, and that file."""
    if model.z != z:
        raise ModelChunkMismatch(f"model trained with z={model.z}, inference requested z={z}")
    pre = preprocessed_bytes(data, z)
    return model.score_matrix(chunking.chunk_matrix(pre, z)), pre


def tally_chunks(model: TrainedModel, data: bytes, z: int) -> ChunkTally:
    if model.z != z:
        raise ModelChunkMismatch(f"model trained with z={model.z}, inference requested z={z}")
    img, reloc = chunking.preprocess_with_map(pe_format.parse(data), z)
    pre = pe_format.serialize(img)
    scores = model.score_matrix(chunking.chunk_matrix(pre, z))
    return ChunkTally.from_scores(scores, z, preprocessed=True, open_chunks=_open_chunks(reloc, z),
                                  pad_bytes=len(pre) - len(data))


def predict_smoothed(model: TrainedModel, data: bytes, z: int) -> SmoothedPrediction:
    return prediction_from_tally(tally_chunks(model, data, z))


def chunk_score_map(model: TrainedModel, data: bytes, z: int) -> list[tuple[int, float]]:
    scores, _ = chunk_scores(model, data, z)
    return [(i, float(s)) for i, s in enumerate(scores)]


def score_map_csv(score_map: list[tuple[int, float]], z: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["chunk_index", "offset", "score", "label"])
    for i, s in score_map:
        w.writerow([i, i * z, f"{s:.6f}", LABEL_NAMES[int(s >= 0.5)]])
    return buf.getvalue()


# -- whole-file baseline and randomized smoothing ---------------------------

def predict_ns(model: TrainedModel, data: bytes) -> float:
    """P(malicious) from the undefended prefix model."""
    return model.score_file(data)


class NoiseKind(str, Enum):
    ABLATE = "ablate"
    DELETE = "delete"


@dataclass(frozen=True)
class RandomizedScheme:
    kind: NoiseKind
    p: float
    votes: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p < 1:
            raise ValueError(f"noise probability must lie in [0, 1), got {self.p}")
        if self.votes < 1:
            raise ValueError("at least one vote is required")

    @classmethod
    def byte_ablate(cls, p: float = 0.20, votes: int = 20, seed: int = 0) -> RandomizedScheme:
        return cls(NoiseKind.ABLATE, p, votes, seed)

    @classmethod
    def byte_delete(cls, p: float = 0.03, votes: int = 20, seed: int = 0) -> RandomizedScheme:
        return cls(NoiseKind.DELETE, p, votes, seed)


def noisy_copy(tokens: np.ndarray, scheme: RandomizedScheme, rng: np.random.Generator) -> np.ndarray:
    hit = rng.random(tokens.size, dtype=np.float32) < scheme.p
    if scheme.kind is NoiseKind.ABLATE:
        return np.where(hit, PAD_TOKEN, tokens)
    return tokens[~hit]


def _deleted_prefix(tokens: np.ndarray, scheme: RandomizedScheme, rng: np.random.Generator,
                    length: int) -> np.ndarray:
    """First ``length`` survivors of byte deletion over the whole sequence.

    Noise is drawn block by block and stops once enough bytes survive;
    later bytes could only land past the prefix.
    """
    out, pos = [], 0
    block = int(length / (1.0 - scheme.p)) + 64
    kept = 0
    while kept < length and pos < tokens.size:
        part = tokens[pos:pos + block]
        part = part[rng.random(part.size, dtype=np.float32) >= scheme.p]
        out.append(part)
        kept += part.size
        pos += block
        block = max(64, int((length - kept) / (1.0 - scheme.p)) + 64)
    return np.concatenate(out)[:length] if out else tokens[:0]


def predict_randomized(model: TrainedModel, data: bytes, scheme: RandomizedScheme) -> SmoothedPrediction:
    """Majority vote of the baseline model over ``scheme.votes`` noisy copies."""
    rng = np.random.default_rng(scheme.seed)
    tokens = as_tokens(data)
    prefix = model.mode is InputMode.PREFIX
    if scheme.kind is NoiseKind.ABLATE and prefix:
        tokens = tokens[: model.prefix_len]  # bytes past the prefix are never read
    scores = []
    for _ in range(scheme.votes):
        if prefix and scheme.kind is NoiseKind.DELETE:
            scores.append(model.score_prefix(_deleted_prefix(tokens, scheme, rng, model.prefix_len)))
        elif prefix:
            scores.append(model.score_prefix(noisy_copy(tokens, scheme, rng)))
        else:
            scores.append(model.score_tokens(noisy_copy(tokens, scheme, rng)))
    return prediction_from_tally(ChunkTally.from_scores(scores, model.z, preprocessed=False))
