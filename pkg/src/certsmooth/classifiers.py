"""
Desk-scale base classifiers trained on ablated chunks.

Two models share one contract: they read a token sequence (bytes 0..255 plus
the PAD token 256) and return P(malicious) in [0, 1].

* ``histogram``: normalized 257-bin token histogram -> affine -> sigmoid.
* ``tinyconv``: token embedding (dim 8) -> 1-D convolution (kernel 16,
  stride 8) -> global max pool -> affine -> sigmoid.

Training follows the ablated-chunk loop: every epoch, every file is aligned
with PREPROCESS, one random window of z bytes is cut from it and the model
takes one binary cross-entropy step on that window. A ``prefix`` input mode
trains the same models on the first 64*z bytes of the raw file instead
(PAD-filled when the file is shorter); that is the undefended whole-file
baseline.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import chunking, pe_format
from .errors import (
    ChecksumFail,
    CorruptSample,
    DivergedLoss,
    ModelChunkMismatch,
    PeFormatError,
    SingleClassDataset,
    VersionMismatch,
)

logger = logging.getLogger(__name__)

PAD_TOKEN = 256
VOCAB = 257
PREFIX_CHUNKS = 64
FORMAT_VERSION = 1
MAGIC = b"CSMD"


class ClassifierKind(str, Enum):
    HISTOGRAM = "histogram"
    TINYCONV = "tinyconv"


class InputMode(str, Enum):
    CHUNK = "chunk"
    PREFIX = "prefix"


_KIND_TAG = {ClassifierKind.HISTOGRAM: 1, ClassifierKind.TINYCONV: 2}
_MODE_TAG = {InputMode.CHUNK: 0, InputMode.PREFIX: 1}


@dataclass(frozen=True)
class TrainConfig:
    z: int = 512
    max_epochs: int = 5
    learning_rate: float = 0.0  # 0 picks the per-kind default
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("z", "max_epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.seed < 0:
            raise ValueError("learning_rate and seed must be non-negative")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bce(logit: float, y: float) -> float:
    return float(np.logaddexp(0.0, logit) - y * logit)


def as_tokens(data: bytes | np.ndarray) -> np.ndarray:
    if isinstance(data, (bytes, bytearray, memoryview)):
        return np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    return np.asarray(data, dtype=np.int64)


class HistogramLogistic:
    default_lr = 10.0

    @staticmethod
    def init_params(rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {"w": np.zeros(VOCAB), "b": np.zeros(1)}

    @staticmethod
    def features(tokens: np.ndarray) -> np.ndarray:
        return np.bincount(tokens, minlength=VOCAB) / max(tokens.size, 1)

    @classmethod
    def logit(cls, params, tokens: np.ndarray) -> float:
        return float(cls.features(tokens) @ params["w"] + params["b"][0])

    @staticmethod
    def logit_batch(params, mat: np.ndarray) -> np.ndarray:
        n, width = mat.shape
        offsets = (np.arange(n, dtype=np.int64) * VOCAB)[:, None]
        counts = np.bincount((mat.astype(np.int64) + offsets).ravel(), minlength=n * VOCAB).reshape(n, VOCAB)
        return counts @ params["w"] / width + params["b"][0]

    @classmethod
    def loss_and_grad(cls, params, tokens: np.ndarray, y: float):
        h = cls.features(tokens)
        z = float(h @ params["w"] + params["b"][0])
        d = float(_sigmoid(z)) - y
        return bce(z, y), z, {"w": d * h, "b": np.array([d])}


class TinyConv:
    embed_dim = 8
    kernel = 16
    stride = 8
    channels = 16
    default_lr = 0.05

    @classmethod
    def init_params(cls, rng: np.random.Generator) -> dict[str, np.ndarray]:
        fan_in = cls.kernel * cls.embed_dim
        return {
            "embed": rng.normal(0.0, 1.0, (VOCAB, cls.embed_dim)),
            "conv_w": rng.normal(0.0, 1.0 / np.sqrt(fan_in), (cls.channels, fan_in)),
            "conv_b": np.zeros(cls.channels),
            "out_w": rng.normal(0.0, 0.1, cls.channels),
            "out_b": np.zeros(1),
        }

    @classmethod
    def _pad(cls, tokens: np.ndarray) -> np.ndarray:
        if tokens.size >= cls.kernel:
            return tokens
        return np.concatenate([tokens, np.full(cls.kernel - tokens.size, PAD_TOKEN, dtype=np.int64)])

    @classmethod
    def _windows(cls, tokens: np.ndarray) -> np.ndarray:
        """(T, kernel) token windows at the conv stride."""
        return sliding_window_view(tokens, cls.kernel)[:: cls.stride]

    @classmethod
    def _forward(cls, params, tokens: np.ndarray):
        tokens = cls._pad(tokens)
        win = cls._windows(tokens)
        x = params["embed"][win].reshape(win.shape[0], -1)
        conv = x @ params["conv_w"].T + params["conv_b"]
        arg = conv.argmax(axis=0)
        h = conv[arg, np.arange(cls.channels)]
        z = float(h @ params["out_w"] + params["out_b"][0])
        return z, win, x, arg, h

    @classmethod
    def logit(cls, params, tokens: np.ndarray) -> float:
        return cls._forward(params, tokens)[0]

    @classmethod
    def logit_batch(cls, params, mat: np.ndarray) -> np.ndarray:
        mat = mat.astype(np.int64)
        if mat.shape[1] < cls.kernel:
            mat = np.concatenate([mat, np.full((mat.shape[0], cls.kernel - mat.shape[1]), PAD_TOKEN)], axis=1)
        win = sliding_window_view(mat, cls.kernel, axis=1)[:, :: cls.stride]
        n, t = win.shape[:2]
        x = params["embed"][win].reshape(n, t, -1)
        conv = x @ params["conv_w"].T + params["conv_b"]
        return conv.max(axis=1) @ params["out_w"] + params["out_b"][0]

    @classmethod
    def loss_and_grad(cls, params, tokens: np.ndarray, y: float):
        z, win, x, arg, h = cls._forward(params, tokens)
        d = float(_sigmoid(z)) - y
        dh = d * params["out_w"]
        xs = x[arg]  # (C, fan_in) input row that won each channel's max
        grads = {
            "out_w": d * h,
            "out_b": np.array([d]),
            "conv_b": dh,
            "conv_w": dh[:, None] * xs,
        }
        dx = (dh[:, None] * params["conv_w"]).reshape(cls.channels, cls.kernel, cls.embed_dim)
        d_embed = np.zeros_like(params["embed"])
        np.add.at(d_embed, win[arg].ravel(), dx.reshape(-1, cls.embed_dim))
        grads["embed"] = d_embed
        return bce(z, y), z, grads


_ARCH = {ClassifierKind.HISTOGRAM: HistogramLogistic, ClassifierKind.TINYCONV: TinyConv}


@dataclass
class TrainedModel:
    kind: ClassifierKind
    z: int
    params: dict[str, np.ndarray]
    config: TrainConfig
    mode: InputMode = InputMode.CHUNK
    format_version: int = FORMAT_VERSION
    history: list[dict] = field(default_factory=list)

    @property
    def arch(self):
        return _ARCH[self.kind]

    @property
    def prefix_len(self) -> int:
        return PREFIX_CHUNKS * self.z

    def score_tokens(self, tokens: np.ndarray) -> float:
        return float(_sigmoid(self.arch.logit(self.params, tokens)))

    def score_matrix(self, mat: np.ndarray) -> np.ndarray:
        """Scores for every row of an (N, width) token matrix."""
        return _sigmoid(self.arch.logit_batch(self.params, mat))

    def score_prefix(self, tokens: np.ndarray) -> float:
        return self.score_tokens(prefix_tokens(tokens, self.prefix_len))

    def score_file(self, data: bytes) -> float:
        """Whole-file score for prefix-mode (baseline) models."""
        return self.score_prefix(as_tokens(data[: self.prefix_len]))


def score_chunk(model: TrainedModel, chunk: bytes, z: int | None = None) -> float:
    if z is not None and z != model.z:
        raise ModelChunkMismatch(f"model trained with z={model.z}, caller supplied z={z}")
    if len(chunk) > model.z:
        raise ModelChunkMismatch(f"chunk of {len(chunk)} bytes exceeds model chunk size {model.z}")
    return model.score_tokens(as_tokens(chunk))


def prefix_tokens(tokens: np.ndarray, length: int) -> np.ndarray:
    """Exactly ``length`` tokens: truncated, or right-padded with PAD."""
    if tokens.size >= length:
        return tokens[:length]
    out = np.full(length, PAD_TOKEN, dtype=tokens.dtype)
    out[: tokens.size] = tokens
    return out


def _prepare(data: bytes, mode: InputMode, z: int) -> bytes:
    if mode is InputMode.PREFIX:
        return data[: PREFIX_CHUNKS * z]
    img = chunking.preprocess(pe_format.parse(data), z)
    return pe_format.serialize(img)


def train(
    dataset: Iterable[tuple[bytes, int]],
    config: TrainConfig,
    kind: ClassifierKind | str = ClassifierKind.HISTOGRAM,
    mode: InputMode | str = InputMode.CHUNK,
) -> TrainedModel:
    """Fit a base classifier with plain SGD on binary cross-entropy.

    In chunk mode each step sees one ablated window per file; in prefix mode it
    sees the file's first 64*z bytes, PAD-filled to that length. Files that fail to parse are skipped and
    counted. Deterministic for a fixed ``config.seed``.
    """
    kind, mode = ClassifierKind(kind), InputMode(mode)
    arch = _ARCH[kind]
    samples = list(dataset)
    labels = {int(y) for _, y in samples}
    if labels != {0, 1}:
        raise SingleClassDataset(f"training data must contain both classes, found {sorted(labels)}")

    prepared, ys, n_corrupt = [], [], 0
    for data, y in samples:
        try:
            prepared.append(_prepare(data, mode, config.z))
            ys.append(float(y))
        except PeFormatError as exc:
            n_corrupt += 1
            logger.warning("skipping corrupt sample: %s", exc)
    if not prepared:
        raise CorruptSample("no usable training samples")
    if n_corrupt:
        logger.info("skipped %d corrupt samples", n_corrupt)

    rng = np.random.default_rng(config.seed)
    params = arch.init_params(rng)
    lr = config.learning_rate or arch.default_lr
    history = []
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(prepared))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            acc = {k: np.zeros_like(v) for k, v in params.items()}
            for i in batch:
                x = prepared[i]
                if mode is InputMode.CHUNK:
                    tokens = as_tokens(chunking.ablate_train(x, config.z, rng))
                else:
                    tokens = prefix_tokens(as_tokens(x), PREFIX_CHUNKS * config.z)
                loss, logit, grads = arch.loss_and_grad(params, tokens, ys[i])
                if not np.isfinite(loss):
                    raise DivergedLoss(f"non-finite loss at epoch {epoch}")
                total_loss += loss
                correct += int((logit >= 0.0) == (ys[i] >= 0.5))
                for k in acc:
                    acc[k] += grads[k]
            for k in params:
                params[k] = params[k] - lr * acc[k] / len(batch)
        history.append({
            "epoch": epoch + 1,
            "loss": total_loss / len(prepared),
            "train_accuracy": correct / len(prepared),
        })
        logger.info("epoch %d loss %.4f acc %.3f", epoch + 1, history[-1]["loss"], history[-1]["train_accuracy"])
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise DivergedLoss(f"non-finite weights in {k}")
    model = TrainedModel(kind, config.z, params, config, mode, history=history)
    model.history.append({"corrupt_samples": n_corrupt})
    return model


# -- serialization ---------------------------------------------------------

_HEADER = struct.Struct("<4sHIBB")


def save(model: TrainedModel) -> bytes:
    meta = json.dumps({"config": asdict(model.config), "history": model.history}, sort_keys=True).encode()
    out = bytearray(_HEADER.pack(MAGIC, model.format_version, model.z, _KIND_TAG[model.kind], _MODE_TAG[model.mode]))
    out += struct.pack("<I", len(meta)) + meta
    out += struct.pack("<I", len(model.params))
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        enc = name.encode()
        out += struct.pack("<B", len(enc)) + enc + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def load(blob: bytes) -> TrainedModel:
    if len(blob) < _HEADER.size + 4 or blob[:4] != MAGIC:
        raise ChecksumFail("not a model file or truncated header")
    magic, version, z, kind_tag, mode_tag = _HEADER.unpack_from(blob, 0)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version}, expected {FORMAT_VERSION}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumFail("model checksum mismatch")
    kind = {v: k for k, v in _KIND_TAG.items()}[kind_tag]
    mode = {v: k for k, v in _MODE_TAG.items()}[mode_tag]
    pos = _HEADER.size
    (meta_len,) = struct.unpack_from("<I", body, pos)
    meta = json.loads(body[pos + 4:pos + 4 + meta_len])
    pos += 4 + meta_len
    (n_arrays,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<B", body, pos)
        name = body[pos + 1:pos + 1 + name_len].decode()
        pos += 1 + name_len
        (ndim,) = struct.unpack_from("<B", body, pos)
        shape = struct.unpack_from(f"<{ndim}I", body, pos + 1)
        pos += 1 + 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return TrainedModel(kind, z, params, TrainConfig(**meta["config"]), mode, version, meta["history"])


def save_file(model: TrainedModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save(model))


def load_file(path) -> TrainedModel:
    with open(path, "rb") as fh:
        return load(fh.read())


def predict_labels(scores: Sequence[float] | np.ndarray) -> np.ndarray:
    """Hard labels: 1 (malicious) iff score >= 0.5."""
    return (np.asarray(scores) >= 0.5).astype(np.int8)
